"""Diagnostics: step-to-step redundancy, per-step drift, variance spread and
quantization quality, plus CSV/JSON writers."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import mannwhitneyu

from .diffusion import PipelineConfig, SampleSet, Trajectory, TrajectoryBatch, sample
from .experiment import Lab, fit_quantized
from .numerics import pairwise_cosine
from .quantizer import clip_rate


@dataclass
class StepSeries:
    """One value per timestep, timesteps in descending order."""

    timesteps: np.ndarray
    values: np.ndarray
    label: str = "run"

    def __post_init__(self):
        self.timesteps = np.asarray(self.timesteps, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.timesteps.shape != self.values.shape or self.timesteps.ndim != 1:
            raise ValueError("timesteps and values must be 1-d and of equal length")
        if np.any(np.diff(self.timesteps) >= 0):
            raise ValueError("timesteps must be strictly descending")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite values in series")

    def __len__(self) -> int:
        return self.values.size

    def at(self, t: int) -> float:
        hit = np.flatnonzero(self.timesteps == t)
        if hit.size == 0:
            raise KeyError(t)
        return float(self.values[hit[0]])

    @property
    def final(self) -> float:
        return float(self.values[-1])

    def rows(self):
        for t, v in zip(self.timesteps, self.values):
            yield self.label, int(t), float(v)


def similarity_heatmap(samples, timesteps=None) -> np.ndarray:
    """Pairwise cosine similarity, ordered from the noisiest step to the cleanest.

    ``samples`` is an ``(n, d)`` array (already in sampling order) or a
    :class:`SampleSet`, whose rows are sorted by descending timestep. Passing
    ``timesteps`` sorts an array the same way; ties keep their input order.
    """
    if isinstance(samples, SampleSet):
        timesteps = samples.timesteps
        samples = samples.features
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need at least two samples")
    if timesteps is not None:
        order = np.argsort(-np.asarray(timesteps), kind="stable")
        X = X[order]
    return pairwise_cosine(X)


def mean_off_diagonal(M) -> float:
    M = np.asarray(M, dtype=np.float64)
    n = M.shape[0]
    if n < 2:
        raise ValueError("need at least a 2x2 matrix")
    return float((M.sum() - np.trace(M)) / (n * (n - 1)))


def _stack(trajs):
    if isinstance(trajs, TrajectoryBatch):
        return trajs.ts, trajs.xs, np.asarray(trajs.seeds)
    trajs = list(trajs)
    if not trajs:
        raise ValueError("empty trajectory set")
    if not all(isinstance(tr, Trajectory) for tr in trajs):
        raise TypeError("expected a TrajectoryBatch or a sequence of Trajectory")
    ts = trajs[0].ts
    if any(not np.array_equal(tr.ts, ts) for tr in trajs):
        raise ValueError("trajectories visit different timesteps")
    return ts, np.stack([tr.xs for tr in trajs]), np.array([tr.traj_id for tr in trajs])


def exposure_bias_curve(pred, truth, label: str = "run") -> StepSeries:
    """Per-step mean squared deviation of ``pred`` from seed-paired ``truth``.

    Covers ``t = T-1 .. 0``; the shared starting point ``x_T`` is left out.
    """
    ts_p, xs_p, ids_p = _stack(pred)
    ts_t, xs_t, ids_t = _stack(truth)
    if xs_p.shape != xs_t.shape or not np.array_equal(ts_p, ts_t):
        raise ValueError(f"unpaired trajectory sets: shapes {xs_p.shape} vs {xs_t.shape}")
    if not np.array_equal(ids_p, ids_t):
        raise ValueError("unpaired trajectory sets: seeds differ")
    mse = ((xs_p - xs_t) ** 2).mean(axis=(0, 2))
    return StepSeries(ts_p[1:], mse[1:], label)


def variance_density(trajs, ts) -> dict:
    """For each ``t`` in ``ts``, the coordinate variance of every trajectory's ``x_t``.

    ``trajs`` may also be a plain ``(n, d)`` array, treated as samples at a
    single step (``ts`` is then ignored and the result keyed by ``None``).
    """
    if isinstance(trajs, np.ndarray):
        X = np.atleast_2d(trajs)
        if X.shape[1] < 2:
            raise ValueError("need at least two coordinates per sample")
        return {None: X.var(axis=1, ddof=1)}
    steps, xs, _ = _stack(trajs)
    if xs.shape[2] < 2:
        raise ValueError("need at least two coordinates per sample")
    out = {}
    for t in ts:
        hit = np.flatnonzero(steps == t)
        if hit.size == 0:
            raise KeyError(f"timestep {t} not in trajectories")
        out[int(t)] = xs[:, hit[0]].var(axis=1, ddof=1)
    return out


def stochastically_larger(a, b) -> float:
    """One-sided Mann-Whitney p-value for ``a`` tending to exceed ``b``."""
    return float(mannwhitneyu(np.asarray(a), np.asarray(b), alternative="greater").pvalue)


def quantization_quality(calibration: SampleSet, evaluation: TrajectoryBatch, lab: Lab,
                         bits_weights: int, bits_activations: int, cache_interval: int = 1,
                         min_samples: int | None = None, correction=None) -> dict:
    """Fit and quantize the surrogate on ``calibration``; score it on ``evaluation``.

    ``evaluation`` is a ground-truth batch (analytic, uncached). Its denoiser
    inputs are used for the clip rate and the output RMS, and its seeds are
    rerun through the quantized pipeline for the final-sample MSE.

    Returns a dict with ``clip_rate`` (fraction of input and output activations
    outside their calibrated range), ``clip_rate_by_step`` (0-based step index
    order), ``rms`` (quantized surrogate vs analytic denoiser),
    ``surrogate_rms`` (float surrogate vs analytic) and ``final_mse``.
    """
    if len(calibration) == 0:
        raise ValueError("empty calibration set")
    if np.intersect1d(np.unique(calibration.traj_ids), evaluation.seeds).size:
        raise ValueError("calibration and evaluation trajectories overlap")
    sur, qs = fit_quantized(lab, calibration, bits_weights, bits_activations, min_samples)
    inputs = evaluation.model_inputs()
    T = lab.T
    clipped = np.zeros(T)
    total = np.zeros(T)
    sq_q = sq_f = 0.0
    for step in range(T):
        m = inputs.timesteps == step
        if not m.any():
            continue
        x = inputs.features[m]
        t = step + 1
        ref = lab.analytic(x, t)
        out_f = sur(x, t)
        out_q = qs(x, t)
        n_in = clip_rate(x, qs._act(qs.act_in, t)) * x.size
        n_out = clip_rate(out_f, qs._act(qs.act_out, t)) * out_f.size
        clipped[step] = n_in + n_out
        total[step] = x.size + out_f.size
        sq_q += float(((out_q - ref) ** 2).sum())
        sq_f += float(((out_f - ref) ** 2).sum())
    n = inputs.features.size
    config = PipelineConfig(lab.schedule, qs, cache_interval, correction, "quantized")
    run = sample(config, evaluation.seeds, dim=lab.dim)
    final = float(((run.xs[:, -1] - evaluation.xs[:, -1]) ** 2).mean())
    by_step = np.divide(clipped, total, out=np.zeros(T), where=total > 0)
    return {
        "clip_rate": float(clipped.sum() / total.sum()),
        "clip_rate_by_step": by_step.tolist(),
        "rms": float(np.sqrt(sq_q / n)),
        "surrogate_rms": float(np.sqrt(sq_f / n)),
        "final_mse": final,
        "calibration_size": len(calibration),
    }


def write_series_csv(path, series) -> None:
    """Long format ``run_label, t, value``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_label", "t", "value"])
        for s in series:
            for label, t, v in s.rows():
                w.writerow([label, t, repr(v)])


def write_density_csv(path, densities: dict) -> None:
    """``densities`` maps run label to :func:`variance_density` output."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_label", "t", "value"])
        for label, per_t in densities.items():
            for t, vals in per_t.items():
                for v in vals:
                    w.writerow([label, t, repr(float(v))])


def write_matrix_csv(path, M) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.asarray(M):
            w.writerow([repr(float(v)) for v in row])


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_plain(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")
