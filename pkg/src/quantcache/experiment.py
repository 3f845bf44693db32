"""Building blocks shared by the metrics, the CLI presets and the acceptance suite.

A :class:`Lab` bundles the toy data distribution, the noise schedule and the
ground-truth pipeline. Calibration pools are collected from the analytic
denoiser running under the deployment cache interval, so that the pool looks
like what a cached model actually sees.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import (AnalyticDenoiser, DiffusionSchedule, LinearSurrogate, MixtureModel,
                        PipelineConfig, QuantizedSurrogate, SampleSet, fit_surrogate,
                        quantize_surrogate, sample)
from .numerics import kmeans, make_rng
from .tap import TapConfig, _affinity, select_calibration, tap_cluster

SELECTORS = ("tap", "random", "kmeans", "dbscan", "agglomerative")


@dataclass(frozen=True)
class Lab:
    mixture: MixtureModel
    schedule: DiffusionSchedule

    @classmethod
    def build(cls, T: int = 50, sampler: str = "ddpm", dim: int = 16, components: int = 8,
              scale: float = 0.15, variance: float = 0.05) -> "Lab":
        return cls(MixtureModel.hypercube(dim, components, scale, variance),
                   DiffusionSchedule.linear(T, sampler))

    @property
    def T(self) -> int:
        return self.schedule.T

    @property
    def dim(self) -> int:
        return self.mixture.dim

    @property
    def analytic(self) -> AnalyticDenoiser:
        return AnalyticDenoiser(self.mixture, self.schedule)

    def with_sampler(self, sampler: str) -> "Lab":
        return Lab(self.mixture, DiffusionSchedule(self.schedule.betas, sampler))

    def truth(self) -> PipelineConfig:
        """Analytic denoiser, no cache, no correction."""
        return PipelineConfig(self.schedule, self.analytic, 1, None, "ground-truth")

    def cache_only(self, interval: int) -> PipelineConfig:
        return PipelineConfig(self.schedule, self.analytic, interval, None, "cache-only")

    def run(self, config: PipelineConfig, seeds):
        return sample(config, seeds, dim=self.dim)


def calibration_pool(lab: Lab, seeds, cache_interval: int = 1) -> SampleSet:
    """Denoiser inputs of analytic trajectories run under ``cache_interval``."""
    return lab.run(lab.cache_only(cache_interval), seeds).model_inputs()


def fit_quantized(lab: Lab, calibration: SampleSet, bits_weights: int, bits_activations: int,
                  min_samples: int | None = None) -> tuple[LinearSurrogate, QuantizedSurrogate]:
    sur = fit_surrogate(calibration, lab.mixture, lab.schedule, min_samples=min_samples)
    return sur, quantize_surrogate(sur, calibration, bits_weights, bits_activations)


def quantized_pipeline(lab: Lab, denoiser, cache_interval: int, label: str) -> PipelineConfig:
    return PipelineConfig(lab.schedule, denoiser, cache_interval, None, label)


def _dbscan_labels(A: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    from sklearn.cluster import DBSCAN
    D = np.clip(1.0 - A, 0.0, None)
    np.fill_diagonal(D, 0.0)
    raw = DBSCAN(eps=eps, min_samples=min_pts, metric="precomputed").fit_predict(D)
    # noise points share one extra category
    return np.where(raw < 0, raw.max() + 1, raw)


def _agglomerative_labels(A: np.ndarray, k: int) -> np.ndarray:
    from sklearn.cluster import AgglomerativeClustering
    D = np.clip(1.0 - A, 0.0, None)
    np.fill_diagonal(D, 0.0)
    model = AgglomerativeClustering(n_clusters=k, metric="precomputed", linkage="average")
    return model.fit_predict(D)


def cluster_labels(pool: SampleSet, method: str, config: TapConfig, T: int,
                   dbscan_eps: float = 0.08, dbscan_min_pts: int = 5) -> np.ndarray:
    """Category labels for ``pool`` under one of the clustering methods.

    ``tap`` is the landmark method; ``kmeans`` clusters raw features; ``dbscan``
    and ``agglomerative`` (average linkage) work on ``1 - A`` for the full
    square fused affinity ``A``.
    """
    if method == "tap":
        return tap_cluster(pool, config, T)
    if method == "kmeans":
        return kmeans(pool.features, config.k, make_rng(config.seed), max_iter=config.kmeans_iter)
    if method in ("dbscan", "agglomerative"):
        A = _affinity(pool, np.arange(len(pool)), config, T)
        A = 0.5 * (A + A.T)
        if method == "dbscan":
            return _dbscan_labels(A, dbscan_eps, dbscan_min_pts)
        return _agglomerative_labels(A, config.k)
    raise ValueError(f"unknown clustering method {method!r}")


def select(pool: SampleSet, method: str, config: TapConfig, T: int, **kwargs):
    """Indices of ``config.target`` calibration samples and a selection report.

    ``random`` draws uniformly without replacement; every other method draws
    evenly across its clusters.
    """
    if method not in SELECTORS:
        raise ValueError(f"unknown selection method {method!r}")
    if config.target > len(pool):
        raise ValueError(f"target {config.target} exceeds pool size {len(pool)}")
    if method == "random":
        rng = make_rng(config.seed)
        idx = np.sort(rng.choice(len(pool), size=config.target, replace=False))
        return idx, {"method": "random", "warnings": []}
    labels = cluster_labels(pool, method, config, T, **kwargs)
    idx, report = select_calibration(pool, labels, config, make_rng(config.seed))
    report["method"] = method
    report["clusters"] = int(np.unique(labels).size)
    return idx, report

