"""Command-line interface.

Subcommands mirror the pipeline stages: ``fit`` builds and persists a
bundle, ``score`` applies it to one feature file, ``eval`` computes
detection metrics over a manifest, ``oracle`` runs the privileged
prototype experiments, ``ablate`` compares score variants, and
``synth-bench`` generates and evaluates the synthetic benchmark.

Errors print a one-line JSON object with a machine-readable ``category``
to stderr and exit nonzero. ``GROOD_SEED`` sets the default seed.
"""

from __future__ import annotations

import functools
import json
import os
import sys

import click

from . import pipeline
from .errors import GroodError
from .feature_io import read_feature_set
from .metrics import score_histogram, write_histogram_csv
from .pipeline import BenchmarkParams, RunConfig, load_config


def _fail(exc: Exception) -> None:
    category = getattr(exc, "category", "internal")
    click.echo(json.dumps({"category": category, "message": str(exc)}), err=True)
    sys.exit(1)


def _guarded(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except GroodError as exc:
            _fail(exc)

    return wrapper


def _parse_quantile(raw: str):
    if raw in ("auto", "none"):
        return raw
    try:
        return float(raw)
    except ValueError:
        raise click.BadParameter(f"expected a float, 'auto', or 'none', got {raw!r}")


def config_options(func):
    options = [
        click.option("--config", "config_path", type=click.Path(exists=True),
                     default=None, help="JSON config file; flags override it."),
        click.option("--strategy", type=click.Choice(
            ["synthetic_mixup", "aux_validation", "uniform_energy",
             "mean_of_prototypes"]), default=None),
        click.option("--filter-quantile", "filter_quantile", default=None,
                     help="Proximity filter quantile: float, 'auto', or 'none'."),
        click.option("--mixup-lam", type=float, default=None),
        click.option("--energy-count", type=int, default=None),
        click.option("--energy-order", type=click.Choice(["lowest", "highest"]),
                     default=None),
        click.option("--temperature", type=float, default=None),
        click.option("--index", "index_mode", type=click.Choice(["exact", "ivf"]),
                     default=None),
        click.option("--nlist", type=int, default=None),
        click.option("--nprobe", type=int, default=None),
        click.option("--k", type=int, default=None),
        click.option("--seed", type=int, default=None),
        click.option("--target-tpr", type=float, default=None),
        click.option("--variant", type=click.Choice(
            ["grood", "distance_to_ood_prototype", "gradient_l1_norm",
             "grads_wrt_class_prototypes"]), default=None),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _make_config(config_path, **overrides) -> RunConfig:
    raw = overrides.get("filter_quantile")
    if raw is not None:
        overrides["filter_quantile"] = _parse_quantile(raw)
    return load_config(config_path, overrides)


@click.group()
def main():
    """Out-of-distribution detection in OOD-prototype gradient space."""


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@config_options
@_guarded
def fit(manifest, out_dir, config_path, **overrides):
    """Fit prototypes, the gradient corpus, and the index; persist a bundle."""
    config = _make_config(config_path, manifest=manifest, **overrides)
    data = pipeline.load_experiment(config.manifest)
    bundle = pipeline.fit_experiment(data, config)
    pipeline.save_bundle(bundle, out_dir)
    click.echo(json.dumps({
        "bundle": out_dir,
        "num_classes": bundle.model.num_classes,
        "corpus_size": bundle.corpus_size,
        "threshold": bundle.threshold,
    }, sort_keys=True))


@main.command()
@click.option("--bundle", "bundle_dir", required=True, type=click.Path(exists=True))
@click.option("--features", "features_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_prefix", required=True,
              help="Report prefix; writes <out>.csv and <out>.json.")
@click.option("--nprobe", type=int, default=None)
@click.option("--k", type=int, default=None)
@_guarded
def score(bundle_dir, features_path, out_prefix, nprobe, k):
    """Score one feature file with a fitted bundle."""
    bundle = pipeline.load_bundle(bundle_dir)
    fset = read_feature_set(features_path)
    report = pipeline.score_features(bundle, fset, nprobe=nprobe, k=k)
    pipeline.write_scores_csv(report, out_prefix + ".csv")
    counts = {"ID": int((report.verdicts == "ID").sum()),
              "OOD": int((report.verdicts == "OOD").sum())}
    pipeline.write_json_report({
        "variant": bundle.config.variant,
        "n": int(report.scores.size),
        "tau": report.tau,
        "verdicts": counts,
    }, out_prefix + ".json")
    click.echo(json.dumps(counts, sort_keys=True))


@main.command("eval")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--bundle", "bundle_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--target-tpr", type=float, default=None)
@click.option("--bins", type=int, default=50, show_default=True,
              help="Histogram bins for the score-density export.")
@click.option("--ncp-include-ood", is_flag=True, default=False,
              help="Let the OOD slot compete in nearest-prototype accuracy.")
@_guarded
def eval_cmd(manifest, bundle_dir, out_dir, target_tpr, bins, ncp_include_ood):
    """Evaluate a bundle: AUROC and FPR per OOD dataset plus densities."""
    bundle = pipeline.load_bundle(bundle_dir)
    data = pipeline.load_experiment(manifest)
    out = pipeline.evaluate_bundle(bundle, data, target_tpr,
                                   ncp_include_ood=ncp_include_ood)
    os.makedirs(out_dir, exist_ok=True)
    result = out["result"]
    pipeline.write_eval_csv(result, os.path.join(out_dir, "metrics.csv"))
    write_histogram_csv(score_histogram(out["id_scores"], bins),
                        os.path.join(out_dir, "hist_id.csv"))
    for name in sorted(out["ood_scores"]):
        write_histogram_csv(score_histogram(out["ood_scores"][name], bins),
                            os.path.join(out_dir, f"hist_{name}.csv"))
    summary = {
        "metrics": result.as_dict(),
        "threshold_on_id_test": out["threshold"],
        "bundle_threshold": bundle.threshold,
        "variant": bundle.config.variant,
    }
    if "ncp_accuracy" in out:
        summary["ncp_accuracy"] = out["ncp_accuracy"]
    pipeline.write_json_report(summary, os.path.join(out_dir, "summary.json"))
    click.echo(json.dumps({"auroc": result.auroc, "fpr_at_tpr": result.fpr_at_tpr},
                          sort_keys=True))


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--mode", "oracle_mode", type=click.Choice(["local", "global"]),
              required=True)
@click.option("-m", "--oracle-count", type=int, default=None,
              help="Privileged sample count for the local oracle.")
@click.option("--holdout-fraction", type=float, default=None,
              help="Validation fraction per OOD set for the global oracle.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@config_options
@_guarded
def oracle(manifest, oracle_mode, oracle_count, holdout_fraction, out_dir,
           config_path, **overrides):
    """Evaluate with an OOD prototype built from privileged OOD samples."""
    config = _make_config(config_path, manifest=manifest, oracle_mode=oracle_mode,
                          oracle_count=oracle_count,
                          holdout_fraction=holdout_fraction, **overrides)
    data = pipeline.load_experiment(config.manifest)
    results = pipeline.oracle_run(data, config)
    os.makedirs(out_dir, exist_ok=True)
    doc = {
        name: {
            "metrics": entry["result"].as_dict(),
            "prototype_rows": entry["prototype_rows"],
            "held_out_rows": entry["held_out_rows"],
        }
        for name, entry in results.items()
    }
    pipeline.write_json_report({"mode": oracle_mode, "datasets": doc},
                               os.path.join(out_dir, "oracle.json"))
    with open(os.path.join(out_dir, "oracle.csv"), "w", encoding="utf-8") as fh:
        fh.write("dataset,auroc,fpr_at_tpr\n")
        for name in sorted(results):
            r = results[name]["result"]
            fh.write(f"{name},{r.auroc!r},{r.fpr_at_tpr!r}\n")
    means = {name: results[name]["result"].auroc for name in sorted(results)}
    click.echo(json.dumps(means, sort_keys=True))


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@config_options
@_guarded
def ablate(manifest, out_dir, config_path, **overrides):
    """Compare the main score against every ablation variant on one split."""
    config = _make_config(config_path, manifest=manifest, **overrides)
    data = pipeline.load_experiment(config.manifest)
    results = pipeline.ablation_run(data, config)
    os.makedirs(out_dir, exist_ok=True)
    pipeline.write_ablation_csv(results, os.path.join(out_dir, "ablate.csv"))
    pipeline.write_json_report(
        {variant: result.as_dict() for variant, result in results.items()},
        os.path.join(out_dir, "ablate.json"),
    )
    click.echo(json.dumps({v: r.auroc for v, r in sorted(results.items())},
                          sort_keys=True))


@main.command("synth-bench")
@click.option("--classes", "num_classes", type=int, default=10, show_default=True)
@click.option("--dim", type=int, default=64, show_default=True)
@click.option("--sigma", type=float, default=0.1, show_default=True)
@click.option("--ood-offset", type=float, default=2.5, show_default=True)
@click.option("--n-per-class", type=int, default=1000, show_default=True)
@click.option("--n-test-per-class", type=int, default=100, show_default=True)
@click.option("--n-ood", type=int, default=1000, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--write-data/--no-write-data", default=True, show_default=True,
              help="Also persist the generated feature files and manifest.")
@config_options
@_guarded
def synth_bench(num_classes, dim, sigma, ood_offset, n_per_class, n_test_per_class,
                n_ood, out_dir, write_data, config_path, **overrides):
    """Generate the collapsed-geometry benchmark and run the full pipeline."""
    config = _make_config(config_path, **overrides)
    params = BenchmarkParams(
        num_classes=num_classes, dim=dim, sigma=sigma, ood_offset=ood_offset,
        n_per_class=n_per_class, n_test_per_class=n_test_per_class, n_ood=n_ood,
        seed=config.seed,
    )
    data = pipeline.bench_experiment(params)
    os.makedirs(out_dir, exist_ok=True)
    if write_data:
        pipeline.write_experiment(data, os.path.join(out_dir, "data"))
    bundle = pipeline.fit_experiment(data, config)
    out = pipeline.evaluate_bundle(bundle, data)
    result = out["result"]
    pipeline.write_eval_csv(result, os.path.join(out_dir, "metrics.csv"))
    summary = {
        "params": {
            "num_classes": params.num_classes, "dim": params.dim,
            "sigma": params.sigma, "ood_offset": params.ood_offset,
            "n_per_class": params.n_per_class,
            "n_test_per_class": params.n_test_per_class,
            "n_ood": params.n_ood, "proto_scale": params.proto_scale,
            "seed": params.seed,
        },
        "metrics": result.as_dict(),
        "ncp_accuracy": out.get("ncp_accuracy"),
        "variant": config.variant,
        "strategy": config.strategy,
    }
    pipeline.write_json_report(summary, os.path.join(out_dir, "summary.json"))
    click.echo(json.dumps({"auroc": result.auroc,
                           "per_dataset": {k: v[0] for k, v in
                                           sorted(result.per_dataset.items())}},
                          sort_keys=True))


if __name__ == "__main__":
    main()
