"""Nearest-neighbor search over the gradient corpus.

Two backends share one distance kernel: an exact full scan, and an
inverted-file (IVF) index whose coarse centroids come from a seeded
k-means (k-means++ init, at most 25 Lloyd iterations, empty clusters
repaired by splitting the largest cluster). Probing all lists makes IVF
reproduce the exact scan bit for bit, because every candidate distance is
computed from its (query, row) pair alone.

Distances are compared as squared Euclidean internally; the square root is
applied only to reported scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import as_matrix
from .errors import ValidationError
from .metrics import EvalResult, nearest_rank_quantile
from .ncp import GradientMap

KMEANS_MAX_ITER = 25
DEFAULT_NPROBE = 8
NLIST_CAP = 4096


def default_nlist(n: int) -> int:
    """round(sqrt(n)) clamped to [1, 4096] and to the corpus size."""
    return max(1, min(int(round(np.sqrt(n))), NLIST_CAP, n))


def _corpus_matrix(corpus) -> np.ndarray:
    if isinstance(corpus, GradientMap):
        return np.asarray(corpus.gradients, dtype=np.float64)
    return as_matrix(corpus, "corpus")


def _pair_sqdist(queries: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Squared distances (m, k) where each entry depends only on its own
    (query, row) pair; reductions never mix pairs, so values are identical
    no matter how the batch is chunked."""
    diff = queries[:, None, :] - rows[None, :, :]
    return np.einsum("mkd,mkd->mk", diff, diff)


def _chunked_pair_sqdist(queries: np.ndarray, rows: np.ndarray,
                         budget: int = 1 << 22) -> np.ndarray:
    m, d = queries.shape
    k = rows.shape[0]
    out = np.empty((m, k), dtype=np.float64)
    q_step = max(1, budget // max(1, k * d))
    for start in range(0, m, q_step):
        stop = min(m, start + q_step)
        out[start:stop] = _pair_sqdist(queries[start:stop], rows)
    return out


def _gemm_sqdist(queries: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Fast squared distances for k-means assignment only; may lose a few
    ulps to cancellation, which nearest-centroid argmin tolerates."""
    q2 = np.einsum("nd,nd->n", queries, queries)
    r2 = np.einsum("kd,kd->k", rows, rows)
    d2 = q2[:, None] - 2.0 * (queries @ rows.T) + r2[None, :]
    return np.maximum(d2, 0.0)


@dataclass
class GradientIndex:
    """Search structure over a gradient corpus.

    Exact mode scans every row. IVF mode partitions rows into ``nlist``
    inverted lists keyed by coarse centroids and scans only the ``nprobe``
    closest lists per query. Immutable once built; concurrent queries are
    safe.
    """

    mode: str
    corpus: np.ndarray
    nlist: int = 1
    nprobe: int = DEFAULT_NPROBE
    k: int = 1
    seed: int = 0
    centroids: np.ndarray | None = None
    assignments: np.ndarray | None = None
    # CSR view of the partition: row ids sorted by list, plus offsets.
    _sorted_rows: np.ndarray | None = field(default=None, repr=False)
    _offsets: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.corpus.shape[0]

    @property
    def dim(self) -> int:
        return self.corpus.shape[1]

    def list_members(self, list_id: int) -> np.ndarray:
        start, stop = self._offsets[list_id], self._offsets[list_id + 1]
        return self._sorted_rows[start:stop]


def _build_csr(index: GradientIndex) -> None:
    order = np.argsort(index.assignments, kind="stable")
    counts = np.bincount(index.assignments, minlength=index.nlist)
    offsets = np.zeros(index.nlist + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    index._sorted_rows = order.astype(np.int64)
    index._offsets = offsets


def build_exact(corpus) -> GradientIndex:
    """Exact index: every query is answered by a full corpus scan."""
    matrix = _corpus_matrix(corpus)
    if matrix.shape[0] < 1:
        raise ValidationError("corpus must be non-empty")
    return GradientIndex(mode="exact", corpus=matrix)


def build_ivf(corpus, nlist: int, seed: int = 0, nprobe: int = DEFAULT_NPROBE,
              k: int = 1) -> GradientIndex:
    """IVF index over ``corpus`` with ``nlist`` seeded k-means cells.

    Deterministic given (corpus, nlist, seed): same centroids, same lists,
    same scores on every run.
    """
    matrix = _corpus_matrix(corpus)
    n = matrix.shape[0]
    if n < 1:
        raise ValidationError("corpus must be non-empty")
    if not 1 <= nlist <= n:
        raise ValidationError(f"nlist must be in [1, {n}], got {nlist}")
    centroids = _kmeans(matrix, nlist, seed)
    # Final list membership uses the pair kernel, so the partition depends
    # only on the converged centroids.
    assignments = _nearest_centroid(matrix, centroids, exact=True)
    index = GradientIndex(
        mode="ivf",
        corpus=matrix,
        nlist=nlist,
        nprobe=min(nprobe, nlist),
        k=k,
        seed=seed,
        centroids=centroids,
        assignments=assignments,
    )
    _build_csr(index)
    return index


def restore_ivf(corpus, centroids, assignments, nlist: int, nprobe: int, k: int,
                seed: int) -> GradientIndex:
    """Rebuild an IVF index from persisted centroids and assignments."""
    matrix = _corpus_matrix(corpus)
    assignments = np.asarray(assignments, dtype=np.int64)
    if assignments.shape != (matrix.shape[0],):
        raise ValidationError("assignments must have one entry per corpus row")
    index = GradientIndex(
        mode="ivf",
        corpus=matrix,
        nlist=nlist,
        nprobe=min(nprobe, nlist),
        k=k,
        seed=seed,
        centroids=np.asarray(centroids, dtype=np.float64),
        assignments=assignments,
    )
    _build_csr(index)
    return index


def _nearest_centroid(matrix: np.ndarray, centroids: np.ndarray, exact: bool) -> np.ndarray:
    if exact:
        d2 = _chunked_pair_sqdist(matrix, centroids)
    else:
        d2 = _gemm_sqdist(matrix, centroids)
    return np.argmin(d2, axis=1).astype(np.int64)


def _kmeans(matrix: np.ndarray, nlist: int, seed: int) -> np.ndarray:
    n = matrix.shape[0]
    rng = np.random.Generator(np.random.PCG64(seed))

    # k-means++ seeding.
    centroids = np.empty((nlist, matrix.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = matrix[first]
    d2 = _pair_sqdist_to_one(matrix, centroids[0])
    for i in range(1, nlist):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centroids[i] = matrix[idx]
        d2 = np.minimum(d2, _pair_sqdist_to_one(matrix, centroids[i]))

    assign = np.full(n, -1, dtype=np.int64)
    for _ in range(KMEANS_MAX_ITER):
        new_assign = _nearest_centroid(matrix, centroids, exact=False)
        new_assign = _repair_empty(matrix, centroids, new_assign, nlist)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, matrix)
        counts = np.bincount(assign, minlength=nlist)
        centroids = sums / counts[:, None]
    return centroids


def _pair_sqdist_to_one(matrix: np.ndarray, point: np.ndarray) -> np.ndarray:
    diff = matrix - point[None, :]
    return np.einsum("nd,nd->n", diff, diff)


def _repair_empty(matrix: np.ndarray, centroids: np.ndarray, assign: np.ndarray,
                  nlist: int) -> np.ndarray:
    counts = np.bincount(assign, minlength=nlist)
    for empty in np.where(counts == 0)[0]:
        big = int(np.argmax(counts))
        members = np.where(assign == big)[0]
        dist = _pair_sqdist_to_one(matrix[members], centroids[big])
        moved = members[int(np.argmax(dist))]
        assign[moved] = empty
        counts[big] -= 1
        counts[empty] += 1
    return assign


def _kth_smallest(values: np.ndarray, k: int) -> float:
    if k == 1:
        return float(values.min())
    return float(np.partition(values, k - 1)[k - 1])


def _kth_smallest_rows(matrix: np.ndarray, k: int) -> np.ndarray:
    if k == 1:
        return matrix.min(axis=1)
    return np.partition(matrix, k - 1, axis=1)[:, k - 1]


def score_batch(index: GradientIndex, grads, nprobe: int | None = None,
                k: int | None = None, exclude_ids: np.ndarray | None = None) -> np.ndarray:
    """k-th nearest-neighbor distance from each query row to the corpus.

    Exact mode scans everything; IVF mode scans the union of the ``nprobe``
    closest inverted lists and widens the probe set whenever the candidates
    cannot supply ``k`` neighbors. ``exclude_ids`` masks one corpus row per
    query (self-match exclusion for corpus diagnostics).
    """
    queries = as_matrix(grads, "queries")
    if queries.shape[1] != index.dim:
        raise ValidationError(
            f"queries have dimension {queries.shape[1]}, corpus has {index.dim}"
        )
    k = index.k if k is None else k
    headroom = 1 if exclude_ids is not None else 0
    if not 1 <= k <= index.n - headroom:
        raise ValidationError(f"k must be in [1, {index.n - headroom}], got {k}")

    if index.mode == "exact":
        return _score_exact(index, queries, k, exclude_ids)
    return _score_ivf(index, queries, k, nprobe, exclude_ids)


def score(index: GradientIndex, grad, nprobe: int | None = None,
          k: int | None = None) -> float:
    """Single-query convenience wrapper around :func:`score_batch`."""
    arr = np.asarray(grad, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError(f"query must be a vector, got shape {arr.shape}")
    return float(score_batch(index, arr[None, :], nprobe=nprobe, k=k)[0])


def _score_exact(index: GradientIndex, queries: np.ndarray, k: int,
                 exclude_ids: np.ndarray | None) -> np.ndarray:
    n, d = index.n, index.dim
    m = queries.shape[0]
    out = np.empty(m, dtype=np.float64)
    q_step = max(1, (1 << 22) // max(1, n * d))
    for start in range(0, m, q_step):
        stop = min(m, start + q_step)
        d2 = _chunked_pair_sqdist(queries[start:stop], index.corpus)
        if exclude_ids is not None:
            d2[np.arange(stop - start), exclude_ids[start:stop]] = np.inf
        out[start:stop] = _kth_smallest_rows(d2, k)
    return np.sqrt(out)


def _score_ivf(index: GradientIndex, queries: np.ndarray, k: int,
               nprobe: int | None, exclude_ids: np.ndarray | None) -> np.ndarray:
    nprobe = index.nprobe if nprobe is None else nprobe
    if not 1 <= nprobe <= index.nlist:
        raise ValidationError(f"nprobe must be in [1, {index.nlist}], got {nprobe}")

    centroid_d2 = _chunked_pair_sqdist(queries, index.centroids)
    probe_order = np.argsort(centroid_d2, axis=1, kind="stable")

    offsets = index._offsets
    list_sizes = offsets[1:] - offsets[:-1]
    probe_sets = probe_order[:, :nprobe]
    usable = list_sizes[probe_sets].sum(axis=1)
    if exclude_ids is not None:
        excluded_list = index.assignments[exclude_ids]
        usable = usable - (probe_sets == excluded_list[:, None]).any(axis=1)

    m = queries.shape[0]
    out = np.empty(m, dtype=np.float64)
    main = np.where(usable >= k)[0]
    if k == 1:
        out[main] = _scan_lists_min(index, queries, probe_sets, main, exclude_ids)
    else:
        for i in main:
            out[i] = _scan_one_query(index, queries[i], probe_sets[i], k,
                                     None if exclude_ids is None else exclude_ids[i])

    # Documented fallback: when the probed lists cannot supply k neighbors,
    # widen the probe set in centroid order instead of failing.
    for i in np.where(usable < k)[0]:
        for probes in range(nprobe + 1, index.nlist + 1):
            candidates = list_sizes[probe_order[i, :probes]].sum()
            if exclude_ids is not None:
                candidates -= (probe_order[i, :probes] == excluded_list[i]).any()
            if candidates >= k or probes == index.nlist:
                break
        out[i] = _scan_one_query(index, queries[i], probe_order[i, :probes], k,
                                 None if exclude_ids is None else exclude_ids[i])
    return np.sqrt(out)


def _scan_lists_min(index: GradientIndex, queries: np.ndarray,
                    probe_sets: np.ndarray, active: np.ndarray,
                    exclude_ids: np.ndarray | None) -> np.ndarray:
    """Minimum squared distance per active query over its probed lists,
    processed list-by-list so each inverted list is gathered once."""
    nprobe = probe_sets.shape[1]
    flat_q = np.repeat(active, nprobe)
    flat_l = probe_sets[active].ravel()
    order = np.argsort(flat_l, kind="stable")
    flat_q, flat_l = flat_q[order], flat_l[order]
    bounds = np.searchsorted(flat_l, np.arange(index.nlist + 1))

    best = np.full(queries.shape[0], np.inf)
    for j in range(index.nlist):
        lo, hi = bounds[j], bounds[j + 1]
        if lo == hi:
            continue
        rows = index.list_members(j)
        if rows.size == 0:
            continue
        qids = flat_q[lo:hi]
        d2 = _chunked_pair_sqdist(queries[qids], index.corpus[rows])
        if exclude_ids is not None:
            d2[rows[None, :] == exclude_ids[qids][:, None]] = np.inf
        np.minimum.at(best, qids, d2.min(axis=1))
    return best[active]


def _scan_one_query(index: GradientIndex, query: np.ndarray, lists: np.ndarray,
                    k: int, exclude_id: int | None) -> float:
    ids = np.concatenate([index.list_members(j) for j in lists])
    diff = index.corpus[ids] - query
    d2 = np.einsum("nd,nd->n", diff, diff)
    if exclude_id is not None:
        d2[ids == exclude_id] = np.inf
    return _kth_smallest(d2, min(k, d2.size))


def score_corpus_self_excluded(index: GradientIndex, k: int | None = None,
                               nprobe: int | None = None) -> np.ndarray:
    """Score every corpus row against the corpus with itself masked out.

    Diagnostic mode used for threshold calibration on training data; plain
    queries never exclude anything.
    """
    if index.n < 2:
        raise ValidationError("self-excluded scoring needs at least 2 corpus rows")
    exclude = np.arange(index.n, dtype=np.int64)
    return score_batch(index, index.corpus, nprobe=nprobe, k=k, exclude_ids=exclude)


def calibrate_threshold(id_scores, target_tpr: float = 0.95) -> float:
    """Smallest observed ID score accepting at least ``target_tpr`` of the
    ID data (nearest-rank quantile)."""
    if not 0.0 < target_tpr <= 1.0:
        raise ValidationError(f"target_tpr must be in (0, 1], got {target_tpr}")
    return nearest_rank_quantile(id_scores, target_tpr)


def classify(scores, tau: float) -> np.ndarray:
    """Level-set verdicts: "ID" where score <= tau (boundary inclusive),
    "OOD" above."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.where(scores <= tau, "ID", "OOD")


@dataclass
class ScoreReport:
    """Per-sample scores with the calibrated threshold and verdicts.

    Scores are oriented so that higher means more OOD; index-backed scores
    are nonnegative distances.
    """

    scores: np.ndarray
    tau: float | None = None
    verdicts: np.ndarray | None = None
    metrics: EvalResult | None = None

    @classmethod
    def from_scores(cls, scores, tau: float | None = None,
                    metrics: EvalResult | None = None) -> "ScoreReport":
        scores = np.asarray(scores, dtype=np.float64)
        verdicts = classify(scores, tau) if tau is not None else None
        return cls(scores=scores, tau=tau, verdicts=verdicts, metrics=metrics)


def measure_recall(index: GradientIndex, queries, k: int | None = None,
                   nprobe: int | None = None) -> float:
    """Fraction of queries whose IVF score equals the exact score."""
    queries = as_matrix(queries, "queries")
    approx = score_batch(index, queries, nprobe=nprobe, k=k)
    exact = _score_exact(index, queries, index.k if k is None else k, None)
    return float(np.mean(approx == exact))
