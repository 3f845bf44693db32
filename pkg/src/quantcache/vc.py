"""Variance compensation: per-step, per-channel rescaling of intermediate samples.

A corrupted sample is pulled toward (or pushed away from) a reference mean,
``x_corr = mu + K * (x_hat - mu)``, with ``K`` chosen per channel to minimise a
relative error plus the squared error against paired reference samples.

Two relative-error forms are available:

``elementwise``
    ``sum_n ((x~ - x') / x')^2``, each residual relative to its own reference.
``channel``
    ``sum_n (x~ - x')^2 / sum_n x'^2``, the residual energy relative to the
    reference energy of the channel. The objective is then a scaled squared
    error, so its minimiser is the least-squares slope and cannot be dominated
    by a few references close to zero.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .diffusion import PipelineConfig, TrajectoryBatch, initial_noise, sample

GUARD_EPS = 1e-3
GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass
class PairedBatch:
    """Corrupted estimates and references at one step, each ``(N_batch, C)``."""

    x_hat: np.ndarray
    x_ref: np.ndarray

    def __post_init__(self):
        self.x_hat = np.atleast_2d(np.asarray(self.x_hat, dtype=np.float64))
        self.x_ref = np.atleast_2d(np.asarray(self.x_ref, dtype=np.float64))
        if self.x_hat.shape != self.x_ref.shape:
            raise ValueError("paired batch shapes differ")
        if self.x_hat.shape[0] < 1:
            raise ValueError("empty batch")
        if not (np.all(np.isfinite(self.x_hat)) and np.all(np.isfinite(self.x_ref))):
            raise ValueError("non-finite samples in paired batch")

    def reference_mean(self) -> np.ndarray:
        return self.x_ref.mean(axis=0)


def _weights(x_ref: np.ndarray, guard_eps: float):
    # relative-error weight 1/x'^2, dropped where |x'| is below the guard
    keep = np.abs(x_ref) >= guard_eps
    inv = np.where(keep, 1.0 / np.where(keep, x_ref, 1.0), 0.0)
    return keep, inv


FORMS = ("elementwise", "channel")


def _channel_inv_energy(x_ref: np.ndarray, guard_eps: float) -> np.ndarray:
    # 1 / sum x'^2 per channel; dropped when the channel's RMS is below the guard
    energy = (x_ref ** 2).sum(axis=0)
    keep = energy >= x_ref.shape[0] * guard_eps ** 2
    return np.where(keep, 1.0 / np.where(keep, energy, 1.0), 0.0)


def objective(K, batch: PairedBatch, mu, guard_eps: float = GUARD_EPS,
              form: str = "elementwise") -> np.ndarray:
    """Per-channel relative error plus ``sum_n (x~ - x')^2``, with ``x~ = mu + K (x^ - mu)``.

    ``form="elementwise"`` adds ``sum_n ((x~ - x') / x')^2`` (references with
    ``|x'| < guard_eps`` skip that term); ``form="channel"`` adds
    ``sum_n (x~ - x')^2 / sum_n x'^2`` (skipped when the channel RMS is below
    ``guard_eps``).

    ``K`` may carry extra leading axes (e.g. a grid of candidates, shape
    ``(G, C)``); the result then has the same leading shape.
    """
    if form not in FORMS:
        raise ValueError(f"unknown objective form {form!r}")
    K = np.asarray(K, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    a = batch.x_hat - mu
    resid = mu + K[..., None, :] * a - batch.x_ref
    sq = (resid ** 2).sum(axis=-2)
    if form == "channel":
        return sq * (1.0 + _channel_inv_energy(batch.x_ref, guard_eps))
    _, inv = _weights(batch.x_ref, guard_eps)
    return ((resid * inv) ** 2).sum(axis=-2) + sq


def solve_analytic(batch: PairedBatch, mu, guard_eps: float = GUARD_EPS) -> np.ndarray:
    """Closed form as printed: ``(sum b a + sum a/x') / (sum a^2 + sum a^2/x'^2)``.

    ``a = x^ - mu`` and ``b = x' - mu``; guarded references drop out of the
    ``1/x'`` terms. Channels with a zero denominator get ``K = 1``.
    """
    mu = np.asarray(mu, dtype=np.float64)
    _, inv = _weights(batch.x_ref, guard_eps)
    a = batch.x_hat - mu
    b = batch.x_ref - mu
    num = (b * a).sum(0) + (a * inv).sum(0)
    den = (a * a).sum(0) + (a * a * inv * inv).sum(0)
    return _safe_ratio(num, den)


def solve_stationary(batch: PairedBatch, mu, guard_eps: float = GUARD_EPS) -> np.ndarray:
    """Exact minimiser of :func:`objective`: ``sum w a b / sum w a^2`` with ``w = 1 + 1/x'^2``."""
    mu = np.asarray(mu, dtype=np.float64)
    _, inv = _weights(batch.x_ref, guard_eps)
    w = 1.0 + inv * inv
    a = batch.x_hat - mu
    b = batch.x_ref - mu
    return _safe_ratio((w * a * b).sum(0), (w * a * a).sum(0))


def solve_channel(batch: PairedBatch, mu, guard_eps: float = GUARD_EPS) -> np.ndarray:
    """Exact minimiser of the ``channel`` form: the least-squares slope ``sum a b / sum a^2``.

    The relative term only rescales the squared error, so ``guard_eps`` does
    not change the result; it is accepted for a uniform solver signature.
    """
    mu = np.asarray(mu, dtype=np.float64)
    a = batch.x_hat - mu
    b = batch.x_ref - mu
    return _safe_ratio((a * b).sum(0), (a * a).sum(0))


def _safe_ratio(num, den) -> np.ndarray:
    zero = den == 0
    if zero.any():
        warnings.warn(f"zero denominator in {int(zero.sum())} channel(s); K set to 1",
                      RuntimeWarning, stacklevel=3)
    return np.where(zero, 1.0, num / np.where(zero, 1.0, den))


def solve_bruteforce(batch: PairedBatch, mu, grid: int = 801, lo: float = -4.0, hi: float = 4.0,
                     xtol: float = 1e-10, guard_eps: float = GUARD_EPS,
                     form: str = "elementwise") -> np.ndarray:
    """Derivative-free per-channel minimiser of :func:`objective`.

    A coarse grid over ``[lo, hi]`` brackets the minimum (the interval doubles
    while the best grid point sits on an edge), then golden-section search
    narrows each channel's bracket to ``xtol``.
    """
    mu = np.asarray(mu, dtype=np.float64)
    C = batch.x_hat.shape[1]
    lo_c = np.full(C, float(lo))
    hi_c = np.full(C, float(hi))
    for _ in range(60):
        pts = np.linspace(lo_c, hi_c, grid)  # (grid, C)
        vals = objective(pts, batch, mu, guard_eps, form)
        best = np.argmin(vals, axis=0)
        at_lo, at_hi = best == 0, best == grid - 1
        if not (at_lo.any() or at_hi.any()):
            break
        width = hi_c - lo_c
        lo_c = np.where(at_lo, lo_c - width, lo_c)
        hi_c = np.where(at_hi, hi_c + width, hi_c)
    step = (hi_c - lo_c) / (grid - 1)
    centre = pts[best, np.arange(C)]
    a = centre - step
    b = centre + step

    def f(k):
        return objective(k, batch, mu, guard_eps, form)

    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while np.max(b - a) > xtol:
        left = fc < fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = np.where(left, b - GOLDEN * (b - a), d)
        new_d = np.where(left, c, a + GOLDEN * (b - a))
        c, d = new_c, new_d
        fc = f(c)
        fd = f(d)
    return 0.5 * (a + b)


SOLVERS = {
    "stationary": solve_stationary,
    "channel": solve_channel,
    "analytic": solve_analytic,
    "bruteforce": solve_bruteforce,
}


@dataclass
class CorrectionFactors:
    """``K`` and reference means ``mu``, both ``(St, C)``; row ``t`` corrects ``x_t``."""

    K: np.ndarray
    mu: np.ndarray
    guard_eps: float = GUARD_EPS
    batch_size: int = 0
    seeds: tuple = ()
    solver: str = ""

    @property
    def St(self) -> int:
        return int(self.K.shape[0])

    @property
    def C(self) -> int:
        return int(self.K.shape[1])

    @classmethod
    def identity(cls, St: int, C: int) -> "CorrectionFactors":
        return cls(np.ones((St, C)), np.zeros((St, C)))

    def __call__(self, t: int, x) -> np.ndarray:
        return apply(x, self, t)

    def to_dict(self) -> dict:
        return {"St": self.St, "C": self.C, "mu": self.mu.tolist(), "K": self.K.tolist(),
                "guard_eps": self.guard_eps, "batch_size": self.batch_size,
                "seeds": [int(s) for s in self.seeds], "solver": self.solver}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "CorrectionFactors":
        K = np.array(d["K"], dtype=np.float64).reshape(d["St"], d["C"])
        mu = np.array(d["mu"], dtype=np.float64).reshape(d["St"], d["C"])
        return cls(K, mu, float(d.get("guard_eps", GUARD_EPS)), int(d.get("batch_size", 0)),
                   tuple(d.get("seeds", ())), str(d.get("solver", "")))

    @classmethod
    def from_json(cls, text: str) -> "CorrectionFactors":
        return cls.from_dict(json.loads(text))


def apply(x_hat, factors: CorrectionFactors, t: int | None = None) -> np.ndarray:
    """Channel-wise ``mu_t + K_t * (x_hat - mu_t)``.

    With ``t`` given, ``x_hat`` is ``(..., C)`` and row ``t`` is used; without it
    ``x_hat`` must be ``(..., St, C)`` and every step is corrected at once.
    """
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if t is None:
        K, mu = factors.K, factors.mu
        if x_hat.shape[-2:] != K.shape:
            raise ValueError(f"expected trailing shape {K.shape}, got {x_hat.shape}")
    else:
        K, mu = factors.K[t], factors.mu[t]
        if x_hat.shape[-1] != K.shape[0]:
            raise ValueError(f"expected {K.shape[0]} channels, got {x_hat.shape[-1]}")
    return mu + K * (x_hat - mu)


def estimate_factors(corrupted: PipelineConfig, reference: PipelineConfig, seeds, dim: int,
                     solver: str = "stationary", guard_eps: float = GUARD_EPS) -> CorrectionFactors:
    """Fit ``K_t`` step by step on paired corrupted/reference trajectories.

    Both pipelines run from the same per-seed noise. The reference batch is
    generated first; the corrupted batch is then stepped with a hook that, at
    each step ``t``, solves for ``K_t`` against the references at ``t`` and applies
    it before the next step, so later factors see already-corrected inputs.
    Any correction already attached to ``corrupted`` runs before the hook.

    ``solver`` names an entry of :data:`SOLVERS`: ``stationary`` and
    ``bruteforce`` minimise the elementwise objective, ``channel`` the
    channel-energy one, and ``analytic`` evaluates the closed form as printed
    (it does not return ``K = 1`` for an uncorrupted pipeline).
    """
    if solver not in SOLVERS:
        raise ValueError(f"unknown solver {solver!r}")
    solve = SOLVERS[solver]
    seeds = [int(s) for s in seeds]
    T = reference.schedule.T
    noise = initial_noise(seeds, T, dim)
    ref = sample(reference, seeds, noise=noise)
    K = np.ones((T, dim))
    mu = np.zeros((T, dim))
    inner = corrupted.correction

    def hook(t, x):
        if inner is not None:
            x = inner(t, x)
        batch = PairedBatch(x, ref.at(t))
        mu[t] = batch.reference_mean()
        K[t] = solve(batch, mu[t], guard_eps=guard_eps)
        return mu[t] + K[t] * (x - mu[t])

    cfg = PipelineConfig(corrupted.schedule, corrupted.denoiser, corrupted.cache_interval,
                         hook, corrupted.label)
    sample(cfg, seeds, noise=noise)
    return CorrectionFactors(K, mu, guard_eps, len(seeds), tuple(seeds), solver)


def with_correction(config: PipelineConfig, factors: CorrectionFactors | None,
                    label: str | None = None) -> PipelineConfig:
    return PipelineConfig(config.schedule, config.denoiser, config.cache_interval,
                          factors, label or config.label)


def corrected_batch(batch: TrajectoryBatch, factors: CorrectionFactors) -> np.ndarray:
    """Offline correction of stored samples ``x_t`` (t = T-1..0); no feedback into later steps."""
    xs = batch.xs.copy()
    for i, t in enumerate(batch.ts):
        if t < factors.St:
            xs[:, i] = apply(xs[:, i], factors, int(t))
    return xs
