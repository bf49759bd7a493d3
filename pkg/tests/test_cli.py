"""Command-line surface: every subcommand end to end on small data, plus
error reporting and byte-identical reruns."""

import json
import os

import pytest
from click.testing import CliRunner

from grood.cli import main
from grood.pipeline import write_experiment

from conftest import small_experiment


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def dataset_dir(tmp_path):
    manifest = write_experiment(small_experiment(), str(tmp_path / "data"))
    return manifest


def run_ok(runner, args, env=None):
    result = runner.invoke(main, args, env=env, catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


def read_tree(root):
    blobs = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            path = os.path.join(dirpath, name)
            blobs[os.path.relpath(path, root)] = open(path, "rb").read()
    return blobs


class TestFitScoreEval:
    def test_full_cycle(self, runner, tmp_path, dataset_dir):
        bundle = tmp_path / "bundle"
        out = run_ok(runner, ["fit", "--manifest", dataset_dir, "--out", str(bundle),
                              "--strategy", "mean_of_prototypes", "--index", "exact",
                              "--seed", "0"])
        line = json.loads(out.output.strip().splitlines()[-1])
        assert line["num_classes"] == 3
        assert (bundle / "bundle.json").exists()

        score_prefix = tmp_path / "train_scores"
        out = run_ok(runner, ["score", "--bundle", str(bundle),
                              "--features", os.path.join(os.path.dirname(dataset_dir),
                                                         "id_train.grfd"),
                              "--out", str(score_prefix)])
        counts = json.loads(out.output.strip().splitlines()[-1])
        # training rows score zero under the main variant: all ID
        assert counts == {"ID": 240, "OOD": 0}
        csv_lines = (tmp_path / "train_scores.csv").read_text().splitlines()
        assert csv_lines[0] == "row,score,verdict"
        assert len(csv_lines) == 241

        eval_dir = tmp_path / "eval"
        out = run_ok(runner, ["eval", "--manifest", dataset_dir, "--bundle",
                              str(bundle), "--out", str(eval_dir)])
        metrics = json.loads(out.output.strip().splitlines()[-1])
        assert metrics["auroc"] == 1.0
        assert (eval_dir / "metrics.csv").exists()
        assert (eval_dir / "hist_id.csv").exists()
        assert (eval_dir / "hist_far.csv").exists()
        summary = json.loads((eval_dir / "summary.json").read_text())
        assert summary["ncp_accuracy"] == 1.0
        assert summary["metrics"]["per_dataset"]["far"]["auroc"] == 1.0

    def test_fit_respects_config_file_and_flag_precedence(self, runner, tmp_path,
                                                          dataset_dir):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"strategy": "mean_of_prototypes",
                                   "index_mode": "exact", "k": 2}))
        bundle = tmp_path / "b"
        run_ok(runner, ["fit", "--manifest", dataset_dir, "--out", str(bundle),
                        "--config", str(cfg), "--k", "1", "--seed", "0"])
        doc = json.loads((bundle / "bundle.json").read_text())
        assert doc["config"]["strategy"] == "mean_of_prototypes"
        assert doc["config"]["k"] == 1
        assert doc["info"]["sample_counts"] == [80, 80, 80]

    def test_filter_quantile_none_disables_filtering(self, runner, tmp_path,
                                                     dataset_dir):
        bundle = tmp_path / "nf"
        run_ok(runner, ["fit", "--manifest", dataset_dir, "--out", str(bundle),
                        "--strategy", "synthetic_mixup", "--filter-quantile",
                        "none", "--index", "exact", "--seed", "0"])
        doc = json.loads((bundle / "bundle.json").read_text())
        assert doc["config"]["filter_quantile"] == "none"
        assert doc["info"]["filter_quantile"] is None
        assert "kept_size" not in doc["info"]

    def test_missing_inputs_yield_machine_readable_error(self, runner, tmp_path):
        data = small_experiment(with_aux=False)
        manifest = write_experiment(data, str(tmp_path / "d"))
        result = runner.invoke(main, ["fit", "--manifest", manifest, "--out",
                                      str(tmp_path / "b"), "--strategy",
                                      "aux_validation", "--seed", "0"])
        assert result.exit_code == 1
        err = json.loads(result.stderr.strip().splitlines()[-1])
        assert err["category"] == "config"
        assert "ood_aux" in err["message"]


class TestOracleCli:
    def test_local_oracle_reports_audit_rows(self, runner, tmp_path, dataset_dir):
        out_dir = tmp_path / "oracle"
        run_ok(runner, ["oracle", "--manifest", dataset_dir, "--mode", "local",
                        "-m", "30", "--out", str(out_dir), "--index", "exact",
                        "--seed", "0"])
        doc = json.loads((out_dir / "oracle.json").read_text())
        entry = doc["datasets"]["far"]
        sampled = set(entry["prototype_rows"]["far"])
        held = set(entry["held_out_rows"])
        assert len(sampled) == 30 and not sampled & held
        assert (out_dir / "oracle.csv").read_text().startswith("dataset,auroc")

    def test_global_oracle_needs_two_sets(self, runner, tmp_path, dataset_dir):
        result = runner.invoke(main, ["oracle", "--manifest", dataset_dir,
                                      "--mode", "global", "--out",
                                      str(tmp_path / "o"), "--seed", "0"])
        assert result.exit_code == 1
        err = json.loads(result.stderr.strip().splitlines()[-1])
        assert err["category"] == "config"


class TestAblateCli:
    def test_five_variant_rows(self, runner, tmp_path, dataset_dir):
        out_dir = tmp_path / "ablate"
        run_ok(runner, ["ablate", "--manifest", dataset_dir, "--out", str(out_dir),
                        "--strategy", "mean_of_prototypes", "--index", "exact",
                        "--seed", "0"])
        lines = (out_dir / "ablate.csv").read_text().strip().splitlines()
        assert len(lines) == 6
        doc = json.loads((out_dir / "ablate.json").read_text())
        assert set(doc) == {"grood", "distance_to_ood_prototype",
                            "gradient_l1_norm", "grads_wrt_class_prototypes",
                            "uniform_noise_prototype"}


class TestSynthBenchCli:
    def test_writes_data_and_reports(self, runner, tmp_path):
        out_dir = tmp_path / "bench"
        out = run_ok(runner, ["synth-bench", "--n-per-class", "100", "--n-ood",
                              "150", "--n-test-per-class", "20", "--out",
                              str(out_dir), "--seed", "5"])
        top = json.loads(out.output.strip().splitlines()[-1])
        assert set(top["per_dataset"]) == {"near", "far"}
        assert (out_dir / "data" / "manifest.json").exists()
        assert (out_dir / "summary.json").exists()
        summary = json.loads((out_dir / "summary.json").read_text())
        assert summary["params"]["seed"] == 5

    def test_seed_env_var_is_default(self, runner, tmp_path):
        out_dir = tmp_path / "bench"
        run_ok(runner, ["synth-bench", "--n-per-class", "50", "--n-ood", "80",
                        "--n-test-per-class", "10", "--out", str(out_dir)],
               env={"GROOD_SEED": "11"})
        summary = json.loads((out_dir / "summary.json").read_text())
        assert summary["params"]["seed"] == 11


class TestDeterminism:
    def test_synth_bench_reruns_byte_identical(self, runner, tmp_path):
        args = ["--n-per-class", "80", "--n-ood", "120", "--n-test-per-class",
                "15", "--seed", "3"]
        a, b = tmp_path / "a", tmp_path / "b"
        run_ok(runner, ["synth-bench", *args, "--out", str(a)])
        run_ok(runner, ["synth-bench", *args, "--out", str(b)])
        ta, tb = read_tree(a), read_tree(b)
        assert ta.keys() == tb.keys()
        for name in ta:
            assert ta[name] == tb[name], f"{name} differs between reruns"

    def test_fit_and_eval_rerun_byte_identical(self, runner, tmp_path, dataset_dir):
        blobs = []
        for tag in ("x", "y"):
            bundle = tmp_path / f"bundle_{tag}"
            eval_dir = tmp_path / f"eval_{tag}"
            run_ok(runner, ["fit", "--manifest", dataset_dir, "--out", str(bundle),
                            "--seed", "4", "--index", "ivf", "--nlist", "8"])
            run_ok(runner, ["eval", "--manifest", dataset_dir, "--bundle",
                            str(bundle), "--out", str(eval_dir)])
            blobs.append((read_tree(bundle), read_tree(eval_dir)))
        assert blobs[0][0].keys() == blobs[1][0].keys()
        for name in blobs[0][0]:
            assert blobs[0][0][name] == blobs[1][0][name], name
        for name in blobs[0][1]:
            assert blobs[0][1][name] == blobs[1][1][name], name
