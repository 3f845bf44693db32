"""Temporal-aware parallel clustering for calibration-set selection.

Each of ``m`` parallel branches draws ``n`` landmark samples, builds a
rectangular ``N x n`` affinity that mixes cosine similarity of the features
with an exponential kernel on timestep gaps, normalizes it by row and column
degrees, and embeds every sample with the top ``k`` left singular vectors.
The branch embeddings are concatenated and clustered once with k-means; the
calibration set is then drawn evenly across the resulting clusters.
"""
from __future__ import annotations

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .diffusion import SampleSet
from .numerics import cosine_similarity, kmeans, make_rng, top_k_singular_vectors

__all__ = [
    "SampleSet", "TapConfig", "SimilarityMatrix", "subsample", "spatial_similarity",
    "temporal_similarity", "fuse", "normalized_laplacian", "cluster_one_subsample",
    "aggregate", "tap_cluster", "select_calibration", "dense_spectral_clustering",
    "complexity_benchmark",
]


@dataclass
class TapConfig:
    m: int = 3
    n: int | None = None
    fraction: float = 1 / 20
    alpha: float = 0.5
    k: int = 100
    per_cluster_min: int = 3
    per_cluster_max: int = 10
    target: int = 800
    seed: int = 0
    temporal_scale: str = "normalized"
    laplacian_exponent: float = -0.5
    kmeans_iter: int = 300
    svd_tol: float = 1e-8
    svd_max_iter: int = 2000

    def landmarks(self, N: int) -> int:
        n = self.n if self.n is not None else max(1, int(round(self.fraction * N)))
        return min(n, N)

    def check(self, N: int | None = None) -> list[str]:
        """Human-readable invariant violations (empty when valid)."""
        problems = []
        if self.m < 1:
            problems.append("tap.m must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            problems.append("tap.alpha must lie in [0, 1]")
        if self.k < 1:
            problems.append("tap.k must be >= 1")
        if self.per_cluster_min < 0 or self.per_cluster_min > self.per_cluster_max:
            problems.append("tap.per_cluster_min must be in [0, per_cluster_max]")
        if self.temporal_scale not in ("normalized", "raw"):
            problems.append("tap.temporal_scale must be 'normalized' or 'raw'")
        if self.n is not None and self.n < 1:
            problems.append("tap.n must be >= 1")
        if self.n is None and not 0.0 < self.fraction <= 1.0:
            problems.append("tap.fraction must lie in (0, 1]")
        if N is not None:
            n = self.landmarks(N)
            if self.n is not None and self.n > N:
                problems.append(f"tap.n={self.n} exceeds dataset size N={N}")
            if self.k > n:
                problems.append(f"tap.k={self.k} exceeds landmark count n={n}")
        elif self.n is not None and self.k > self.n:
            problems.append(f"tap.k={self.k} exceeds landmark count n={self.n}")
        if self.k * self.per_cluster_max < self.target:
            problems.append(f"tap.target={self.target} unreachable with k={self.k} "
                            f"and per_cluster_max={self.per_cluster_max}")
        return problems

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SimilarityMatrix:
    values: np.ndarray
    kind: str


def subsample(N: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` distinct indices drawn uniformly without replacement, sorted."""
    if not 1 <= n <= N:
        raise ValueError(f"cannot draw n={n} landmarks from N={N} samples")
    return np.sort(rng.choice(N, size=n, replace=False))


def spatial_similarity(dataset: SampleSet, landmarks) -> SimilarityMatrix:
    return SimilarityMatrix(cosine_similarity(dataset.features, dataset.features[landmarks]),
                            "spatial")


def temporal_similarity(dataset: SampleSet, landmarks, T: int | None = None,
                        scale: str = "normalized") -> SimilarityMatrix:
    """``exp(-tau |t_k - t_h|)`` with ``tau = 1/(T-1)`` (normalized) or 1 (raw)."""
    t = dataset.timesteps.astype(np.float64)
    if scale == "normalized":
        if T is None:
            T = int(dataset.timesteps.max()) + 1
        tau = 1.0 / max(T - 1, 1)
    elif scale == "raw":
        tau = 1.0
    else:
        raise ValueError(f"unknown temporal scale {scale!r}")
    gap = np.abs(t[:, None] - t[None, landmarks])
    return SimilarityMatrix(np.exp(-tau * gap), "temporal")


def fuse(spatial: SimilarityMatrix, temporal: SimilarityMatrix, alpha: float) -> SimilarityMatrix:
    """Elementwise ``alpha * spatial + (1 - alpha) * temporal``."""
    if spatial.values.shape != temporal.values.shape:
        raise ValueError(f"shape mismatch {spatial.values.shape} vs {temporal.values.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha == 1.0:
        return SimilarityMatrix(spatial.values.copy(), "fused")
    if alpha == 0.0:
        return SimilarityMatrix(temporal.values.copy(), "fused")
    return SimilarityMatrix(alpha * spatial.values + (1.0 - alpha) * temporal.values, "fused")


def normalized_laplacian(A, exponent: float = -0.5) -> np.ndarray:
    """``D_r^e A D_c^e`` with row degrees ``sum_h A_kh`` and column degrees ``sum_k A_kh``.

    Rows or columns with zero degree are zeroed (with a warning) instead of
    being divided by zero.
    """
    A = np.asarray(getattr(A, "values", A), dtype=np.float64)
    if np.any(A < 0):
        raise ValueError("affinity must be nonnegative")
    dr = A.sum(axis=1)
    dc = A.sum(axis=0)
    zr, zc = dr <= 0, dc <= 0
    if zr.any() or zc.any():
        warnings.warn(f"{int(zr.sum())} zero-degree row(s) and {int(zc.sum())} zero-degree "
                      "column(s) in affinity; zeroed in the Laplacian", RuntimeWarning, stacklevel=2)
    fr = np.where(zr, 0.0, np.power(np.where(zr, 1.0, dr), exponent))
    fc = np.where(zc, 0.0, np.power(np.where(zc, 1.0, dc), exponent))
    return fr[:, None] * A * fc[None, :]


def _affinity(dataset: SampleSet, landmarks, config: TapConfig, T: int | None) -> np.ndarray:
    spatial = spatial_similarity(dataset, landmarks)
    # cosine can be negative; shift the spatial part into [0, 1] before degrees
    spatial.values = 0.5 * (spatial.values + 1.0)
    temporal = temporal_similarity(dataset, landmarks, T, config.temporal_scale)
    return fuse(spatial, temporal, config.alpha).values


def _row_normalize(E: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(E, axis=1, keepdims=True)
    return E / np.where(norms == 0, 1.0, norms)


def cluster_one_subsample(dataset: SampleSet, landmarks, config: TapConfig,
                          T: int | None = None) -> np.ndarray:
    """Row-normalized top-``k`` left singular vectors of one branch's Laplacian (``N x k``)."""
    if config.k > len(landmarks):
        raise ValueError(f"k={config.k} exceeds landmark count {len(landmarks)}")
    L = normalized_laplacian(_affinity(dataset, landmarks, config, T), config.laplacian_exponent)
    U = top_k_singular_vectors(L, config.k, tol=config.svd_tol, max_iter=config.svd_max_iter)
    return _row_normalize(U)


def aggregate(embeddings, config: TapConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """One k-means over the column-concatenated branch embeddings."""
    if not embeddings:
        raise ValueError("need at least one embedding")
    shapes = {e.shape for e in embeddings}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent embedding shapes {shapes}")
    if rng is None:
        rng = make_rng(config.seed)
    X = np.hstack(embeddings) if len(embeddings) > 1 else embeddings[0]
    return kmeans(X, config.k, rng, max_iter=config.kmeans_iter)


def tap_cluster(dataset: SampleSet, config: TapConfig, T: int | None = None,
                workers: int = 1) -> np.ndarray:
    """Cluster labels in ``[0, k)`` for every sample of ``dataset``.

    Branch ``i`` draws its landmarks from ``make_rng(seed + i)``; branches are
    independent and run on ``workers`` threads. The final k-means uses
    ``make_rng(seed + m)``.
    """
    N = len(dataset)
    n = config.landmarks(N)

    def branch(i):
        lm = subsample(N, n, make_rng(config.seed + i))
        return cluster_one_subsample(dataset, lm, config, T)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            embeddings = list(pool.map(branch, range(config.m)))
    else:
        embeddings = [branch(i) for i in range(config.m)]
    return aggregate(embeddings, config, make_rng(config.seed + config.m))


def _quotas(sizes: np.ndarray, target: int, lo: int, hi: int) -> tuple[np.ndarray, list[str]]:
    k = sizes.size
    notes = []
    nonempty = sizes > 0
    if hi * nonempty.sum() < target:
        raise ValueError(f"target {target} infeasible: {int(nonempty.sum())} non-empty clusters "
                         f"x at most {hi} samples each")
    caps = np.minimum(sizes, hi)
    if caps.sum() < target:
        raise ValueError(f"target {target} infeasible: clusters hold only {int(caps.sum())} "
                         f"selectable samples under the per-cluster maximum {hi}")
    quota = np.minimum(sizes, max(lo, 0))
    if quota.sum() > target:
        raise ValueError(f"target {target} infeasible: per_cluster_min={lo} already forces "
                         f"{int(quota.sum())} samples")
    small = np.flatnonzero(nonempty & (sizes < lo))
    if small.size:
        notes.append(f"{small.size} cluster(s) smaller than per_cluster_min={lo}; "
                     "all their members taken")
    # spread the remainder evenly, round-robin from the smallest cluster index
    base = target // max(int(nonempty.sum()), 1)
    quota = np.maximum(quota, np.minimum(caps, base))
    while quota.sum() < target:
        room = np.flatnonzero(quota < caps)
        need = target - int(quota.sum())
        quota[room[:need]] += 1
    while quota.sum() > target:
        over = np.flatnonzero(quota > np.minimum(sizes, lo))
        excess = int(quota.sum()) - target
        quota[over[::-1][:excess]] -= 1
    return quota, notes


def select_calibration(dataset: SampleSet, labels, config: TapConfig,
                       rng: np.random.Generator | None = None, k: int | None = None):
    """Draw an even number of samples from every cluster.

    Each non-empty cluster contributes between ``per_cluster_min`` and
    ``per_cluster_max`` samples (fewer only when it has fewer members); the
    shortfall of small clusters is handed out round-robin to the others so
    the total hits ``config.target``.

    Returns ``(indices, report)`` where ``report`` has the cluster sizes, the
    per-cluster counts and any warnings raised.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (len(dataset),):
        raise ValueError("one label per sample required")
    if rng is None:
        rng = make_rng(config.seed)
    k = int(labels.max()) + 1 if k is None else k
    sizes = np.bincount(labels, minlength=k)
    quota, notes = _quotas(sizes, config.target, config.per_cluster_min, config.per_cluster_max)
    for note in notes:
        warnings.warn(note, RuntimeWarning, stacklevel=2)
    chosen = []
    for c in range(k):
        if quota[c] == 0:
            continue
        members = np.flatnonzero(labels == c)
        chosen.append(np.sort(rng.choice(members, size=int(quota[c]), replace=False)))
    idx = np.sort(np.concatenate(chosen)) if chosen else np.empty(0, dtype=np.int64)
    report = {"cluster_sizes": sizes.tolist(), "per_cluster": quota.tolist(), "warnings": notes}
    return idx, report


def dense_spectral_clustering(dataset: SampleSet, config: TapConfig, T: int | None = None,
                              rng: np.random.Generator | None = None) -> np.ndarray:
    """Reference O(N^3) spectral clustering on the full square affinity.

    Same fused, shifted affinity and normalization as TAP but with every
    sample as a landmark and a dense symmetric eigensolver.
    """
    N = len(dataset)
    A = _affinity(dataset, np.arange(N), config, T)
    L = normalized_laplacian(A, config.laplacian_exponent)
    L = 0.5 * (L + L.T)
    w, V = np.linalg.eigh(L)
    E = _row_normalize(V[:, np.argsort(w)[::-1][:config.k]])
    if rng is None:
        rng = make_rng(config.seed)
    return kmeans(E, config.k, rng, max_iter=config.kmeans_iter)


def complexity_benchmark(make_dataset, sizes, landmarks: int, config: TapConfig,
                         repeats: int = 5, dense: bool = True, T: int | None = None) -> list[dict]:
    """Median wall-times of TAP (fixed landmark count) and the dense oracle.

    ``make_dataset(N)`` must return a :class:`SampleSet` of size ``N``.
    """
    rows = []
    for N in sizes:
        ds = make_dataset(N)
        cfg = TapConfig(**{**config.to_dict(), "n": min(landmarks, N)})
        tap_times, dense_times = [], []
        for _ in range(repeats):
            t0 = time.perf_counter()
            tap_cluster(ds, cfg, T)
            tap_times.append(time.perf_counter() - t0)
            if dense:
                t0 = time.perf_counter()
                dense_spectral_clustering(ds, cfg, T)
                dense_times.append(time.perf_counter() - t0)
        rows.append({"N": int(N), "landmarks": int(cfg.n),
                     "tap_seconds": float(np.median(tap_times)),
                     "dense_seconds": float(np.median(dense_times)) if dense else None})
    return rows
