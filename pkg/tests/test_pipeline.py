"""Pipeline orchestration: fitting under each strategy, bundle persistence,
scoring semantics, oracle experiments, ablations, and the synthetic
benchmark."""

import dataclasses

import numpy as np
import pytest

from grood.errors import ConfigError
from grood.feature_io import FeatureSet
from grood.pipeline import (
    ExperimentData,
    RunConfig,
    ablation_run,
    bench_experiment,
    evaluate_bundle,
    fit_experiment,
    load_bundle,
    load_config,
    load_experiment,
    oracle_run,
    save_bundle,
    score_features,
    synth_bench_run,
    write_experiment,
)
from grood.synth import BenchmarkParams, make_benchmark, simplex_etf

from conftest import small_experiment


class TestFit:
    def test_structural_bundle_contents(self, experiment):
        cfg = RunConfig(strategy="mean_of_prototypes", index_mode="exact", seed=0)
        bundle = fit_experiment(experiment, cfg)
        assert bundle.model.prototypes.shape == (3, 8)
        assert bundle.corpus_size == experiment.id_train.n
        assert bundle.threshold > 0

    def test_aux_validation_prototype_is_plain_mean(self, experiment):
        cfg = RunConfig(strategy="aux_validation", index_mode="exact", seed=0)
        bundle = fit_experiment(experiment, cfg)
        expected = np.mean(np.float64(experiment.ood_aux.features), axis=0)
        np.testing.assert_allclose(bundle.model.ood_prototype, expected, atol=1e-12)

    def test_aux_validation_without_aux_is_actionable(self):
        data = small_experiment(with_aux=False)
        cfg = RunConfig(strategy="aux_validation", seed=0)
        with pytest.raises(ConfigError, match="ood_aux"):
            fit_experiment(data, cfg)

    def test_uniform_energy_uses_aux_logits(self, experiment):
        cfg = RunConfig(strategy="uniform_energy", index_mode="exact",
                        energy_count=20, seed=0)
        bundle = fit_experiment(experiment, cfg)
        assert bundle.info["energy_count"] == 20
        assert np.all(np.isfinite(bundle.model.ood_prototype))

    def test_uniform_energy_without_logits_is_actionable(self):
        data = small_experiment(with_logits=False)
        cfg = RunConfig(strategy="uniform_energy", seed=0)
        with pytest.raises(ConfigError, match="logits"):
            fit_experiment(data, cfg)

    def test_synthetic_records_short_circuit_desk_mixup(self, experiment):
        rng = np.random.default_rng(5)
        pool = rng.normal(scale=0.2, size=(50, 8))
        data = dataclasses.replace(
            experiment,
            synthetic=FeatureSet(layer="penultimate", features=pool,
                                 dataset_id="synth", dtype="f64"))
        cfg = RunConfig(strategy="synthetic_mixup", filter_quantile=None,
                        index_mode="exact", seed=0)
        bundle = fit_experiment(data, cfg)
        assert bundle.info["mid_mode"] == "exporter"
        np.testing.assert_allclose(bundle.model.ood_prototype,
                                   np.mean(np.float64(pool), axis=0), atol=1e-12)

    def test_desk_mixup_tags_identity_mid(self, experiment):
        cfg = RunConfig(strategy="synthetic_mixup", index_mode="exact", seed=0)
        bundle = fit_experiment(experiment, cfg)
        assert bundle.info["mid_mode"] == "identity"
        assert bundle.info["filter_quantile"] == 0.5

    def test_oracle_strategy_rejected_in_fit(self, experiment):
        cfg = RunConfig(strategy="oracle_local", seed=0)
        with pytest.raises(ConfigError, match="oracle"):
            fit_experiment(experiment, cfg)


class TestScoring:
    def test_training_rows_score_zero_without_exclusion(self, experiment):
        cfg = RunConfig(strategy="mean_of_prototypes", index_mode="exact", seed=0)
        bundle = fit_experiment(experiment, cfg)
        report = score_features(bundle, experiment.id_train)
        np.testing.assert_array_equal(report.scores, np.zeros(experiment.id_train.n))
        assert set(report.verdicts) == {"ID"}

    def test_distance_variant_peaks_at_ood_prototype(self, experiment):
        cfg = RunConfig(strategy="mean_of_prototypes", index_mode="exact",
                        variant="distance_to_ood_prototype", seed=0)
        bundle = fit_experiment(experiment, cfg)
        queries = np.vstack([bundle.model.ood_prototype,
                             experiment.id_test.features[:10]])
        scores = score_features(bundle, queries).scores
        assert scores[0] == 0.0
        assert np.all(scores[1:] < 0)
        assert np.argmax(scores) == 0

    def test_verdicts_respect_threshold_boundary(self, experiment):
        cfg = RunConfig(strategy="mean_of_prototypes", index_mode="exact", seed=0)
        bundle = fit_experiment(experiment, cfg)
        report = score_features(bundle, experiment.id_test)
        boundary = report.scores <= bundle.threshold
        np.testing.assert_array_equal(report.verdicts == "ID", boundary)


class TestBundlePersistence:
    @pytest.mark.parametrize("index_mode", ["exact", "ivf"])
    def test_round_trip_preserves_scores(self, tmp_path, experiment, index_mode):
        cfg = RunConfig(strategy="synthetic_mixup", index_mode=index_mode,
                        nlist=8, seed=3)
        bundle = fit_experiment(experiment, cfg)
        queries = experiment.id_test
        before = score_features(bundle, queries).scores

        out = tmp_path / "bundle"
        save_bundle(bundle, str(out))
        loaded = load_bundle(str(out))
        after = score_features(loaded, queries).scores
        np.testing.assert_array_equal(before, after)
        assert loaded.threshold == bundle.threshold
        np.testing.assert_array_equal(loaded.model.prototypes,
                                      bundle.model.prototypes)

    def test_save_is_atomic_swap(self, tmp_path, experiment):
        cfg = RunConfig(strategy="mean_of_prototypes", index_mode="exact", seed=0)
        bundle = fit_experiment(experiment, cfg)
        out = tmp_path / "bundle"
        save_bundle(bundle, str(out))
        save_bundle(bundle, str(out))  # overwrite works
        assert (out / "bundle.json").exists()
        assert not (tmp_path / "bundle.tmp").exists()

    def test_load_missing_bundle(self, tmp_path):
        from grood.errors import NotFittedError

        with pytest.raises(NotFittedError):
            load_bundle(str(tmp_path / "nope"))


class TestEvaluate:
    def test_metrics_and_ncp_accuracy(self, experiment):
        cfg = RunConfig(strategy="mean_of_prototypes", index_mode="exact", seed=0)
        bundle = fit_experiment(experiment, cfg)
        out = evaluate_bundle(bundle, experiment)
        assert out["result"].per_dataset["far"][0] == 1.0
        assert out["ncp_accuracy"] == 1.0

    def test_requires_id_test(self, experiment):
        data = dataclasses.replace(experiment, id_test=None)
        cfg = RunConfig(strategy="mean_of_prototypes", index_mode="exact", seed=0)
        bundle = fit_experiment(data, cfg)
        with pytest.raises(ConfigError, match="id_test"):
            evaluate_bundle(bundle, data)


class TestExperimentIo:
    def test_write_then_load_round_trip(self, tmp_path, experiment):
        manifest_path = write_experiment(experiment, str(tmp_path / "exp"))
        loaded = load_experiment(manifest_path)
        np.testing.assert_array_equal(loaded.id_train.features,
                                      experiment.id_train.features)
        np.testing.assert_array_equal(loaded.id_train.labels,
                                      experiment.id_train.labels)
        np.testing.assert_array_equal(loaded.ood_test["far"].features,
                                      experiment.ood_test["far"].features)
        np.testing.assert_array_equal(loaded.ood_aux.logits,
                                      experiment.ood_aux.logits)
        assert loaded.num_classes == experiment.num_classes


class TestOracle:
    def test_local_records_disjoint_rows(self, experiment):
        cfg = RunConfig(oracle_mode="local", oracle_count=30, index_mode="exact",
                        seed=0)
        results = oracle_run(experiment, cfg)
        entry = results["far"]
        sampled = set(entry["prototype_rows"]["far"])
        held = set(entry["held_out_rows"])
        assert not sampled & held
        assert len(sampled) == 30
        assert len(sampled | held) == experiment.ood_test["far"].n

    def test_local_boundary_single_held_out_row(self, experiment):
        n = experiment.ood_test["far"].n
        cfg = RunConfig(oracle_mode="local", oracle_count=n - 1,
                        index_mode="exact", seed=0)
        results = oracle_run(experiment, cfg)
        assert len(results["far"]["held_out_rows"]) == 1

    def test_local_set_too_small(self, experiment):
        n = experiment.ood_test["far"].n
        cfg = RunConfig(oracle_mode="local", oracle_count=n, index_mode="exact",
                        seed=0)
        with pytest.raises(ConfigError, match="local oracle"):
            oracle_run(experiment, cfg)

    def test_global_needs_two_datasets(self, experiment):
        cfg = RunConfig(oracle_mode="global", index_mode="exact", seed=0)
        with pytest.raises(ConfigError, match="at least 2"):
            oracle_run(experiment, cfg)

    def test_global_holds_out_target_fraction(self):
        data = bench_experiment(BenchmarkParams(n_per_class=60, n_ood=100,
                                                n_test_per_class=20, seed=2))
        cfg = RunConfig(oracle_mode="global", holdout_fraction=0.2,
                        index_mode="exact", seed=2)
        results = oracle_run(data, cfg)
        for name, entry in results.items():
            assert len(entry["held_out_rows"]) == 80
            assert name not in entry["prototype_rows"]
            for other, rows in entry["prototype_rows"].items():
                assert len(rows) == 20

    def test_oracle_reruns_are_identical(self):
        data = bench_experiment(BenchmarkParams(n_per_class=60, n_ood=100,
                                                n_test_per_class=20, seed=3))
        for mode in ("local", "global"):
            cfg = RunConfig(oracle_mode=mode, oracle_count=30,
                            index_mode="exact", seed=3)
            a = oracle_run(data, cfg)
            b = oracle_run(data, cfg)
            for name in a:
                assert a[name]["result"].auroc == b[name]["result"].auroc
                assert a[name]["held_out_rows"] == b[name]["held_out_rows"]
                assert a[name]["prototype_rows"].keys() == \
                    b[name]["prototype_rows"].keys()
                for src in a[name]["prototype_rows"]:
                    assert a[name]["prototype_rows"][src] == \
                        b[name]["prototype_rows"][src]

    def test_local_oracle_strictly_beats_prototype_mean_on_blobs(self):
        # One dispersed OOD blob whose mean is far from the class centroid:
        # a prototype built from privileged samples of that blob must win.
        rng = np.random.default_rng(0)
        scale, num_classes, dim = 2.0, 5, 16
        protos = simplex_etf(num_classes, dim, scale)
        y = np.repeat(np.arange(num_classes), 300)
        X = protos[y] + rng.normal(scale=0.6, size=(y.size, dim))
        yt = np.repeat(np.arange(num_classes), 60)
        Xt = protos[yt] + rng.normal(scale=0.6, size=(yt.size, dim))
        w = np.ones(dim) / np.sqrt(dim)
        blob = scale * w + rng.normal(scale=1.5, size=(400, dim))
        data = ExperimentData(
            id_train=FeatureSet(layer="penultimate", features=X, labels=y,
                                num_classes=num_classes, dtype="f64"),
            id_test=FeatureSet(layer="penultimate", features=Xt, labels=yt,
                               num_classes=num_classes, dtype="f64"),
            ood_test={"blob": FeatureSet(layer="penultimate", features=blob,
                                         dtype="f64", num_classes=num_classes)},
            num_classes=num_classes)

        mop = fit_experiment(
            data, RunConfig(strategy="mean_of_prototypes", index_mode="exact", seed=0))
        mop_auroc = evaluate_bundle(mop, data)["result"].auroc
        local = oracle_run(
            data, RunConfig(oracle_mode="local", index_mode="exact", seed=0))
        local_auroc = local["blob"]["result"].auroc
        assert local_auroc > mop_auroc


class TestAblation:
    def test_all_variants_perfect_on_separable_data(self):
        rng = np.random.default_rng(0)
        protos = simplex_etf(3, 3, scale=4.0)
        y = np.repeat(np.arange(3), 150)
        X = protos[y] + rng.normal(scale=0.02, size=(y.size, 3))
        yt = np.repeat(np.arange(3), 40)
        Xt = protos[yt] + rng.normal(scale=0.02, size=(yt.size, 3))
        ood = rng.normal(scale=0.02, size=(100, 3))  # tight ball at centroid
        data = ExperimentData(
            id_train=FeatureSet(layer="penultimate", features=X, labels=y,
                                num_classes=3, dtype="f64"),
            id_test=FeatureSet(layer="penultimate", features=Xt, labels=yt,
                               num_classes=3, dtype="f64"),
            ood_test={"ball": FeatureSet(layer="penultimate", features=ood,
                                         dtype="f64", num_classes=3)},
            num_classes=3)
        cfg = RunConfig(strategy="mean_of_prototypes", index_mode="exact", seed=0)
        results = ablation_run(data, cfg)
        assert len(results) == 5
        for variant, result in results.items():
            assert result.auroc == 1.0, variant

    def test_csv_shape(self, tmp_path, experiment):
        from grood.pipeline import write_ablation_csv

        cfg = RunConfig(strategy="mean_of_prototypes", index_mode="exact", seed=0)
        results = ablation_run(experiment, cfg)
        path = tmp_path / "ablate.csv"
        write_ablation_csv(results, str(path))
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 6  # header + 5 variants
        assert lines[0].startswith("variant,auroc_far")

    def test_main_score_tops_every_variant_on_benchmark(self):
        data = bench_experiment(BenchmarkParams(seed=0, n_per_class=300,
                                                n_ood=400, n_test_per_class=60))
        results = ablation_run(data, RunConfig(seed=0))
        top = results["grood"].auroc
        for variant, result in results.items():
            assert top >= result.auroc, (variant, result.auroc)


class TestSynthBench:
    def test_collapse_limit_is_near_perfect(self):
        params = BenchmarkParams(sigma=1e-6, n_per_class=200, n_ood=300,
                                 n_test_per_class=40, seed=0)
        out = synth_bench_run(params, RunConfig(seed=0))
        assert out["result"].per_dataset["far"][0] >= 0.999

    def test_ood_identical_to_id_cluster_is_chance(self):
        params = BenchmarkParams(n_per_class=300, n_ood=400,
                                 n_test_per_class=100, seed=1)
        data = bench_experiment(params)
        rng = np.random.default_rng(99)
        clone = data.ood_test["near"]
        protos = simplex_etf(params.num_classes, params.dim, params.proto_scale)
        same_as_class0 = protos[0] + rng.normal(scale=params.sigma, size=(400, params.dim))
        data = dataclasses.replace(
            data,
            ood_test={"clone": dataclasses.replace(clone, features=same_as_class0)})
        bundle = fit_experiment(data, RunConfig(seed=1))
        result = evaluate_bundle(bundle, data)["result"]
        assert result.auroc == pytest.approx(0.5, abs=0.05)

    def test_deterministic_given_seed(self):
        params = BenchmarkParams(n_per_class=100, n_ood=150, n_test_per_class=20,
                                 seed=7)
        a = synth_bench_run(params, RunConfig(seed=7))
        b = synth_bench_run(params, RunConfig(seed=7))
        assert a["result"].auroc == b["result"].auroc
        np.testing.assert_array_equal(a["id_scores"], b["id_scores"])

    def test_make_benchmark_shapes(self):
        params = BenchmarkParams(n_per_class=50, n_ood=70, n_test_per_class=10,
                                 seed=0)
        data = make_benchmark(params)
        assert data.train.features.shape == (500, 64)
        assert data.id_test.features.shape == (100, 64)
        assert data.ood_test["near"].features.shape == (70, 64)
        assert data.ood_test["far"].features.shape == (70, 64)
        assert data.prototypes.shape == (10, 64)


class TestConfig:
    def test_defaults(self):
        cfg = load_config()
        assert cfg.strategy == "synthetic_mixup"
        assert cfg.variant == "grood"
        assert cfg.index_mode == "ivf"
        assert cfg.target_tpr == 0.95

    def test_file_then_flag_precedence(self, tmp_path):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text('{"strategy": "mean_of_prototypes", "k": 3}')
        cfg = load_config(str(cfg_file), {"k": 5})
        assert cfg.strategy == "mean_of_prototypes"  # from file
        assert cfg.k == 5  # flag wins

    def test_unknown_keys_rejected(self, tmp_path):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text('{"strateegy": "x"}')
        with pytest.raises(ConfigError, match="unknown config keys"):
            load_config(str(cfg_file))

    def test_seed_env_default(self, monkeypatch):
        monkeypatch.setenv("GROOD_SEED", "123")
        assert load_config().seed == 123

    def test_invalid_values_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig(target_tpr=0.0).validate()
        with pytest.raises(ConfigError):
            RunConfig(index_mode="fancy").validate()
        with pytest.raises(ConfigError):
            RunConfig(variant="nope").validate()
