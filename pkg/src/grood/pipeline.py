"""End-to-end orchestration: fitting, scoring, evaluation, oracle runs,
ablations, and the synthetic benchmark.

Commands operate on an :class:`ExperimentData` container that can come
from a manifest on disk or from the synthetic benchmark generator, so the
same code path serves files and in-memory runs. Every command is a pure
function of (data, config); reports are byte-identical across repeated
runs with the same seed.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import shutil
from dataclasses import dataclass, field

import numpy as np

from . import index as gindex
from .detector import SCORE_VARIANTS, variant_query_vectors, variant_scores
from .errors import ConfigError, NotFittedError
from .feature_io import (
    FeatureSet,
    Manifest,
    ManifestRecord,
    file_checksum,
    load_manifest,
    read_feature_set,
    read_record,
    save_manifest,
    validate_manifest,
    write_feature_set,
)
from .metrics import EvalResult, evaluate_scores
from .ncp import NcpModel, ncp_predict
from .prototypes import (
    STRATEGIES,
    build_ood_prototype,
    class_prototypes,
    energy_scores,
    ordered_column_mean,
    resolve_filter_quantile,
)
from .synth import BenchmarkParams, make_benchmark

SEED_ENV_VAR = "GROOD_SEED"
BUNDLE_FILE = "bundle.json"


@dataclass
class RunConfig:
    """All knobs of one run; flags > config file > these defaults."""

    manifest: str | None = None
    strategy: str = "synthetic_mixup"
    filter_quantile: object = "auto"
    mixup_lam: float = 0.5
    energy_count: int = 100
    temperature: float = 1.0
    energy_order: str = "lowest"
    index_mode: str = "ivf"
    nlist: int | None = None
    nprobe: int = 8
    k: int = 1
    seed: int = 0
    target_tpr: float = 0.95
    variant: str = "grood"
    oracle_mode: str = "none"
    oracle_count: int = 100
    holdout_fraction: float = 0.2

    def validate(self) -> "RunConfig":
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.variant not in SCORE_VARIANTS:
            raise ConfigError(f"unknown score variant {self.variant!r}")
        try:
            resolve_filter_quantile(self.strategy, self.filter_quantile)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.index_mode not in ("exact", "ivf"):
            raise ConfigError(f"index must be 'exact' or 'ivf', got {self.index_mode!r}")
        if self.oracle_mode not in ("none", "local", "global"):
            raise ConfigError(f"oracle mode must be local or global, got {self.oracle_mode!r}")
        if not 0.0 < self.target_tpr <= 1.0:
            raise ConfigError(f"target_tpr must be in (0, 1], got {self.target_tpr}")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError(
                f"holdout fraction must be in (0, 1), got {self.holdout_fraction}"
            )
        return self


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from exc


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, an optional JSON config file, and explicit overrides."""
    values: dict = {"seed": default_seed()}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values.update(doc)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return RunConfig(**values).validate()


# ---------------------------------------------------------------------------
# Experiment data


@dataclass
class ExperimentData:
    """The feature sets one run needs, independent of where they came from."""

    id_train: FeatureSet
    id_test: FeatureSet | None = None
    ood_test: dict[str, FeatureSet] = field(default_factory=dict)
    ood_aux: FeatureSet | None = None
    synthetic: FeatureSet | None = None
    id_train_early: FeatureSet | None = None
    num_classes: int = 0


def _concat_records(sets: list[FeatureSet]) -> FeatureSet:
    if len(sets) == 1:
        return sets[0]
    feats = np.concatenate([s.features for s in sets])
    labels = None
    if all(s.labels is not None for s in sets):
        labels = np.concatenate([s.labels for s in sets])
    logits = None
    if all(s.logits is not None for s in sets):
        logits = np.concatenate([s.logits for s in sets])
    return FeatureSet(
        layer=sets[0].layer,
        features=feats,
        labels=labels,
        logits=logits,
        dataset_id=sets[0].dataset_id,
        dtype=sets[0].dtype,
        num_classes=max(s.num_classes for s in sets),
    )


def load_experiment(manifest_path: str) -> ExperimentData:
    """Load and validate a manifest into an :class:`ExperimentData`."""
    manifest = load_manifest(manifest_path)
    base_dir = os.path.dirname(os.path.abspath(manifest_path))
    validate_manifest(manifest, base_dir)

    by_role: dict[str, list[tuple[ManifestRecord, FeatureSet]]] = {}
    for record in manifest.records:
        fset = read_record(manifest, record, base_dir)
        by_role.setdefault(record.role, []).append((record, fset))

    def merged(role: str, layer: str = "penultimate") -> FeatureSet | None:
        sets = [f for _, f in by_role.get(role, []) if f.layer == layer]
        return _concat_records(sets) if sets else None

    id_train = merged("id_train")
    if id_train is None:
        raise ConfigError("manifest has no penultimate id_train record")

    ood_test: dict[str, FeatureSet] = {}
    for record, fset in by_role.get("ood_test", []):
        name = fset.dataset_id or os.path.splitext(os.path.basename(record.path))[0]
        if name in ood_test:
            raise ConfigError(f"duplicate ood_test dataset name {name!r}")
        ood_test[name] = fset

    return ExperimentData(
        id_train=id_train,
        id_test=merged("id_test"),
        ood_test=ood_test,
        ood_aux=merged("ood_aux"),
        synthetic=merged("synthetic_ood"),
        id_train_early=merged("id_train", layer="early"),
        num_classes=manifest.num_classes,
    )


def bench_experiment(params: BenchmarkParams) -> ExperimentData:
    data = make_benchmark(params)
    return ExperimentData(
        id_train=data.train,
        id_test=data.id_test,
        ood_test=dict(data.ood_test),
        num_classes=params.num_classes,
    )


def write_experiment(data: ExperimentData, out_dir: str) -> str:
    """Serialize an experiment to GRFD files plus a manifest; returns the
    manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    records = []

    def emit(fset: FeatureSet, name: str, role: str) -> None:
        path = f"{name}.grfd"
        write_feature_set(fset, os.path.join(out_dir, path))
        records.append(
            ManifestRecord(
                path=path,
                layer=fset.layer,
                role=role,
                count=fset.n,
                checksum=file_checksum(os.path.join(out_dir, path)),
            )
        )

    emit(data.id_train, "id_train", "id_train")
    if data.id_train_early is not None:
        emit(data.id_train_early, "id_train_early", "id_train")
    if data.id_test is not None:
        emit(data.id_test, "id_test", "id_test")
    if data.ood_aux is not None:
        emit(data.ood_aux, "ood_aux", "ood_aux")
    if data.synthetic is not None:
        emit(data.synthetic, "synthetic_ood", "synthetic_ood")
    for name, fset in data.ood_test.items():
        emit(fset, f"ood_test_{name}", "ood_test")

    dims = {"penultimate": data.id_train.dim}
    if data.id_train_early is not None:
        dims["early"] = data.id_train_early.dim
    manifest = Manifest(num_classes=data.num_classes or data.id_train.num_classes,
                        dims=dims, records=records)
    manifest_path = os.path.join(out_dir, "manifest.json")
    save_manifest(manifest, manifest_path)
    return manifest_path


# ---------------------------------------------------------------------------
# Fitting


@dataclass
class FittedBundle:
    """Everything scoring needs: the prototype model, the gradient corpus
    and its index, and the calibrated threshold."""

    model: NcpModel
    config: RunConfig
    threshold: float
    index: gindex.GradientIndex | None = None
    early_prototypes: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def corpus_size(self) -> int:
        return 0 if self.index is None else self.index.n


def _build_prototype(data: ExperimentData, config: RunConfig,
                     protos: np.ndarray) -> tuple[np.ndarray, dict]:
    strategy = config.strategy
    if strategy in ("oracle_local", "oracle_global"):
        raise ConfigError(
            f"strategy {strategy!r} is driven by the oracle command, not fit"
        )
    if strategy == "synthetic_mixup" and data.synthetic is not None:
        # Exporter-produced synthetic features already went through the
        # real mid network; pool them directly.
        quantile = resolve_filter_quantile(strategy, config.filter_quantile)
        pool = data.synthetic
        info = {"strategy": strategy, "mid_mode": "exporter",
                "filter_quantile": quantile, "pool_size": pool.n}
        if quantile is not None and quantile > 0:
            from .prototypes import proximity_filter

            pool = proximity_filter(pool, protos, quantile)
            info["kept_size"] = pool.n
        return ordered_column_mean(pool.features), info

    candidates = None
    candidate_logits = None
    if strategy == "aux_validation":
        if data.ood_aux is None:
            raise ConfigError(
                "strategy aux_validation requires an ood_aux record in the manifest"
            )
        candidates = data.ood_aux
    elif strategy == "uniform_energy":
        source = data.ood_aux if data.ood_aux is not None else data.synthetic
        if source is None or source.logits is None:
            raise ConfigError(
                "strategy uniform_energy requires an ood_aux (or synthetic_ood) "
                "record carrying logits"
            )
        candidates = source
        candidate_logits = source.logits

    return build_ood_prototype(
        strategy,
        protos,
        id_features=data.id_train.features,
        id_logits=data.id_train.logits,
        candidates=candidates,
        candidate_logits=candidate_logits,
        filter_quantile=config.filter_quantile,
        mixup_lam=config.mixup_lam,
        energy_count=config.energy_count,
        temperature=config.temperature,
        energy_order=config.energy_order,
    )


def _build_index(corpus: np.ndarray, config: RunConfig) -> gindex.GradientIndex:
    if config.index_mode == "exact":
        return gindex.build_exact(corpus)
    nlist = config.nlist or gindex.default_nlist(corpus.shape[0])
    nlist = min(nlist, corpus.shape[0])
    return gindex.build_ivf(corpus, nlist, seed=config.seed,
                            nprobe=min(config.nprobe, nlist), k=config.k)


def _fit_model(data: ExperimentData, config: RunConfig, model: NcpModel,
               info: dict, early: np.ndarray | None) -> FittedBundle:
    index = None
    if config.variant in ("grood", "grads_wrt_class_prototypes"):
        corpus = variant_query_vectors(model, data.id_train.features, config.variant)
        index = _build_index(corpus, config)
        if corpus.shape[0] >= 2:
            calib = variant_scores(model, index, data.id_train.features,
                                   config.variant, k=config.k, exclude_self=True)
        else:
            calib = variant_scores(model, index, data.id_train.features,
                                   config.variant, k=config.k)
    else:
        calib = variant_scores(model, None, data.id_train.features, config.variant)
    threshold = gindex.calibrate_threshold(calib, config.target_tpr)
    return FittedBundle(model=model, config=config, threshold=threshold,
                        index=index, early_prototypes=early, info=info)


def fit_experiment(data: ExperimentData, config: RunConfig) -> FittedBundle:
    """Class prototypes -> OOD prototype -> gradient corpus -> index ->
    calibrated threshold, per the configured strategy and variant."""
    config.validate()
    protos = class_prototypes(data.id_train)
    early = None
    if data.id_train_early is not None:
        early = class_prototypes(data.id_train_early)
    ood_proto, info = _build_prototype(data, config, protos)
    counts = np.bincount(data.id_train.labels, minlength=protos.shape[0])
    info["sample_counts"] = counts.tolist()
    model = NcpModel(prototypes=protos, ood_prototype=ood_proto)
    return _fit_model(data, config, model, info, early)


# ---------------------------------------------------------------------------
# Bundle persistence


def save_bundle(bundle: FittedBundle, out_dir: str) -> None:
    """Write the bundle to ``out_dir`` (built in a temp dir, then swapped in)."""
    tmp = out_dir.rstrip("/\\") + ".tmp"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp)

    def dump(name: str, matrix: np.ndarray, labels=None, num_classes: int = 0) -> None:
        fset = FeatureSet(layer="penultimate", features=np.atleast_2d(matrix),
                          labels=labels, dataset_id=name, dtype="f64",
                          num_classes=num_classes)
        write_feature_set(fset, os.path.join(tmp, f"{name}.grfd"))

    dump("class_prototypes_pen", bundle.model.prototypes)
    dump("ood_prototype", bundle.model.ood_prototype[None, :])
    if bundle.early_prototypes is not None:
        early = FeatureSet(layer="early", features=bundle.early_prototypes,
                           dataset_id="class_prototypes_early", dtype="f64")
        write_feature_set(early, os.path.join(tmp, "class_prototypes_early.grfd"))

    index = bundle.index
    if index is not None:
        if index.mode == "ivf":
            dump("gradient_corpus", index.corpus, labels=index.assignments,
                 num_classes=index.nlist)
            dump("centroids", index.centroids)
        else:
            dump("gradient_corpus", index.corpus)

    doc = {
        "format": 1,
        "config": dataclasses.asdict(bundle.config),
        "threshold": bundle.threshold,
        "info": bundle.info,
        "num_classes": bundle.model.num_classes,
        "dim": bundle.model.dim,
        "index": None
        if index is None
        else {
            "mode": index.mode,
            "nlist": index.nlist,
            "nprobe": index.nprobe,
            "k": index.k,
            "seed": index.seed,
        },
        "has_early_prototypes": bundle.early_prototypes is not None,
    }
    _write_json(doc, os.path.join(tmp, BUNDLE_FILE))

    if os.path.exists(out_dir):
        shutil.rmtree(out_dir)
    os.replace(tmp, out_dir)


def load_bundle(bundle_dir: str) -> FittedBundle:
    meta_path = os.path.join(bundle_dir, BUNDLE_FILE)
    if not os.path.exists(meta_path):
        raise NotFittedError(f"{bundle_dir} does not contain a fitted bundle")
    with open(meta_path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)

    def grab(name: str) -> FeatureSet:
        return read_feature_set(os.path.join(bundle_dir, f"{name}.grfd"))

    protos = grab("class_prototypes_pen").features
    ood_proto = grab("ood_prototype").features[0]
    model = NcpModel(prototypes=protos, ood_prototype=ood_proto)

    early = None
    if doc.get("has_early_prototypes"):
        early = grab("class_prototypes_early").features

    index = None
    meta = doc.get("index")
    if meta is not None:
        corpus_set = grab("gradient_corpus")
        if meta["mode"] == "ivf":
            index = gindex.restore_ivf(
                corpus_set.features,
                grab("centroids").features,
                corpus_set.labels,
                nlist=meta["nlist"],
                nprobe=meta["nprobe"],
                k=meta["k"],
                seed=meta["seed"],
            )
        else:
            index = gindex.build_exact(corpus_set.features)

    config = RunConfig(**doc["config"])
    return FittedBundle(model=model, config=config, threshold=doc["threshold"],
                        index=index, early_prototypes=early, info=doc.get("info", {}))


# ---------------------------------------------------------------------------
# Scoring and evaluation


def score_features(bundle: FittedBundle, features, nprobe: int | None = None,
                   k: int | None = None) -> gindex.ScoreReport:
    """Score query features with the bundle's variant; no self exclusion."""
    feats = getattr(features, "features", features)
    scores = variant_scores(bundle.model, bundle.index, feats,
                            bundle.config.variant, nprobe=nprobe, k=k)
    return gindex.ScoreReport.from_scores(scores, tau=bundle.threshold)


def evaluate_bundle(bundle: FittedBundle, data: ExperimentData,
                    target_tpr: float | None = None,
                    ncp_include_ood: bool = False) -> dict:
    """Score id_test and every ood_test set; returns metrics plus scores.

    Nearest-prototype accuracy is measured over the ID classes only by
    default; ``ncp_include_ood`` lets the OOD slot compete.
    """
    if data.id_test is None:
        raise ConfigError("evaluation requires an id_test record")
    if not data.ood_test:
        raise ConfigError("evaluation requires at least one ood_test record")
    target = bundle.config.target_tpr if target_tpr is None else target_tpr

    id_scores = score_features(bundle, data.id_test).scores
    ood_scores = {
        name: score_features(bundle, fset).scores
        for name, fset in data.ood_test.items()
    }
    result = evaluate_scores(id_scores, ood_scores, target)

    out = {
        "result": result,
        "id_scores": id_scores,
        "ood_scores": ood_scores,
        "threshold": gindex.calibrate_threshold(id_scores, target),
    }
    if data.id_test.labels is not None:
        pred = ncp_predict(data.id_test.features, bundle.model,
                           include_ood=ncp_include_ood)
        out["ncp_accuracy"] = float(np.mean(pred == data.id_test.labels))
    return out


# ---------------------------------------------------------------------------
# Oracle experiments


def _seeded_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def oracle_run(data: ExperimentData, config: RunConfig) -> dict:
    """Build the OOD prototype from privileged OOD samples and evaluate on
    held-out rows.

    Local mode samples ``oracle_count`` rows of each target OOD set;
    global mode pools a validation fraction of every *other* OOD set.
    Prototype rows and evaluation rows are recorded and asserted disjoint.
    """
    config.validate()
    if data.id_test is None:
        raise ConfigError("oracle evaluation requires an id_test record")
    if not data.ood_test:
        raise ConfigError("oracle evaluation requires ood_test records")
    mode = config.oracle_mode
    if mode not in ("local", "global"):
        raise ConfigError(f"oracle mode must be 'local' or 'global', got {mode!r}")
    names = sorted(data.ood_test)
    if mode == "global" and len(names) < 2:
        raise ConfigError("global oracle needs at least 2 ood_test datasets")

    protos = class_prototypes(data.id_train)
    results: dict[str, dict] = {}

    val_indices: dict[str, np.ndarray] = {}
    if mode == "global":
        for pos, name in enumerate(names):
            n = data.ood_test[name].n
            take = max(1, math.ceil(config.holdout_fraction * n))
            if take >= n:
                raise ConfigError(f"ood_test set {name!r} too small for a holdout split")
            perm = _seeded_rng(config.seed, 1, pos).permutation(n)
            val_indices[name] = np.sort(perm[:take])

    for pos, name in enumerate(names):
        target = data.ood_test[name]
        if mode == "local":
            m = config.oracle_count
            if target.n < m + 1:
                raise ConfigError(
                    f"ood_test set {name!r} has {target.n} rows; local oracle "
                    f"needs at least {m + 1}"
                )
            perm = _seeded_rng(config.seed, 0, pos).permutation(target.n)
            proto_idx = np.sort(perm[:m])
            eval_idx = np.sort(perm[m:])
            proto_rows = target.features[proto_idx]
            proto_source = {name: proto_idx}
        else:
            eval_mask = np.ones(target.n, dtype=bool)
            eval_mask[val_indices[name]] = False
            eval_idx = np.where(eval_mask)[0]
            proto_rows = np.concatenate(
                [data.ood_test[other].features[val_indices[other]]
                 for other in names if other != name]
            )
            proto_source = {other: val_indices[other] for other in names if other != name}

        for source, rows in proto_source.items():
            if source == name:
                overlap = np.intersect1d(rows, eval_idx)
                assert overlap.size == 0, (
                    f"oracle prototype rows leak into evaluation rows for {name}"
                )

        ood_proto = ordered_column_mean(proto_rows)
        model = NcpModel(prototypes=protos, ood_prototype=ood_proto)
        bundle = _fit_model(data, config, model,
                            {"strategy": f"oracle_{mode}", "target": name}, None)
        id_scores = score_features(bundle, data.id_test).scores
        ood_scores = score_features(bundle, target.features[eval_idx]).scores
        result = evaluate_scores(id_scores, {name: ood_scores}, config.target_tpr)
        results[name] = {
            "result": result,
            "prototype_rows": {k: v.tolist() for k, v in proto_source.items()},
            "held_out_rows": eval_idx.tolist(),
        }
    return results


# ---------------------------------------------------------------------------
# Ablations


ABLATION_VARIANTS = (
    "grood",
    "distance_to_ood_prototype",
    "gradient_l1_norm",
    "grads_wrt_class_prototypes",
    "uniform_noise_prototype",
)


def _uniform_noise_prototype(data: ExperimentData, config: RunConfig,
                             protos: np.ndarray) -> np.ndarray:
    """Desk-scale stand-in for the uniform-noise strategy: sample the
    training-feature bounding box, rank candidates by the energy of their
    prototype logits, and average the selected ones."""
    feats = data.id_train.features
    lo, hi = feats.min(axis=0), feats.max(axis=0)
    rng = _seeded_rng(config.seed, 2)
    count = max(4 * config.energy_count, 400)
    noise = rng.uniform(lo, hi, size=(count, feats.shape[1]))
    diff = noise[:, None, :] - protos[None, :, :]
    logits = -np.sqrt(np.einsum("ncd,ncd->nc", diff, diff))
    energy = energy_scores(logits, config.temperature)
    if config.energy_order == "highest":
        energy = -energy
    chosen = np.sort(np.argsort(energy, kind="stable")[: config.energy_count])
    return ordered_column_mean(noise[chosen])


def ablation_run(data: ExperimentData, config: RunConfig) -> dict[str, EvalResult]:
    """Evaluate the main score plus every ablation variant on one split."""
    config.validate()
    if data.id_test is None or not data.ood_test:
        raise ConfigError("ablation requires id_test and ood_test records")

    results: dict[str, EvalResult] = {}
    protos = class_prototypes(data.id_train)
    ood_proto, _ = _build_prototype(data, config, protos)

    for variant in ABLATION_VARIANTS:
        if variant == "uniform_noise_prototype":
            model = NcpModel(
                prototypes=protos,
                ood_prototype=_uniform_noise_prototype(data, config, protos),
            )
            run_cfg = dataclasses.replace(config, variant="grood")
        else:
            model = NcpModel(prototypes=protos, ood_prototype=ood_proto)
            run_cfg = dataclasses.replace(config, variant=variant)
        bundle = _fit_model(data, run_cfg, model, {"variant": variant}, None)
        results[variant] = evaluate_bundle(bundle, data)["result"]
    return results


# ---------------------------------------------------------------------------
# Synthetic benchmark


def synth_bench_run(params: BenchmarkParams, config: RunConfig) -> dict:
    """Generate the benchmark, run the configured pipeline, evaluate."""
    data = bench_experiment(params)
    bundle = fit_experiment(data, config)
    out = evaluate_bundle(bundle, data)
    out["params"] = params
    return out


# ---------------------------------------------------------------------------
# Deterministic report helpers


def _write_json(obj, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_json_report(obj, path: str) -> None:
    _write_json(obj, path)


def write_scores_csv(report: gindex.ScoreReport, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("row,score,verdict\n")
        for i, s in enumerate(report.scores):
            verdict = "" if report.verdicts is None else str(report.verdicts[i])
            fh.write(f"{i},{s!r},{verdict}\n")


def write_eval_csv(result: EvalResult, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("dataset,auroc,fpr_at_tpr\n")
        for name in sorted(result.per_dataset):
            a, f = result.per_dataset[name]
            fh.write(f"{name},{a!r},{f!r}\n")
        fh.write(f"mean,{result.auroc!r},{result.fpr_at_tpr!r}\n")


def write_ablation_csv(results: dict[str, EvalResult], path: str) -> None:
    datasets = sorted(next(iter(results.values())).per_dataset)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("variant," + ",".join(f"auroc_{d}" for d in datasets) + ",auroc_mean\n")
        for variant in ABLATION_VARIANTS:
            result = results[variant]
            cells = [repr(result.per_dataset[d][0]) for d in datasets]
            fh.write(f"{variant}," + ",".join(cells) + f",{result.auroc!r}\n")
