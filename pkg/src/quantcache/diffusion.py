"""Toy diffusion process with an exact denoiser.

Data come from an isotropic Gaussian mixture, so the Bayes-optimal noise
prediction at every step is closed-form. A per-step affine surrogate fitted on
calibration samples plays the role of the network whose weights and
activations get quantized.

Timestep convention: ``alpha_bar[0] == 1`` is clean data and the sampler calls
the denoiser at ``t = T, T-1, ..., 1``. Calibration samples carry the 0-based
step index ``t - 1`` so that their timesteps lie in ``[0, T)``.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import hadamard
from scipy.special import logsumexp

from .cache import CacheState, serve
from .numerics import make_rng
from .quantizer import QuantizerParams, calibrate, fake_quant

SAMPLERS = ("ddpm", "ddim")


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray
    sampler: str = "ddpm"

    def __post_init__(self):
        if self.sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler!r}")
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1 or np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must be a non-empty vector in (0, 1)")

    @classmethod
    def linear(cls, T: int, sampler: str = "ddpm", beta_start: float = 1e-4,
               beta_end: float = 2e-2) -> "DiffusionSchedule":
        """Linear betas, with endpoints rescaled by ``1000 / T`` for short schedules."""
        if T < 1:
            raise ValueError("T must be >= 1")
        scale = 1000.0 / T
        betas = np.linspace(beta_start * scale, beta_end * scale, T)
        return cls(np.clip(betas, 1e-8, 0.999), sampler)

    @property
    def T(self) -> int:
        return int(len(self.betas))

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.concatenate([[1.0], np.cumprod(1.0 - np.asarray(self.betas))])


@dataclass(frozen=True)
class MixtureModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(np.asarray(self.variances) <= 0):
            raise ValueError("component variances must be positive")
        if np.asarray(self.means).shape[0] != w.size:
            raise ValueError("one mean per component required")

    @property
    def dim(self) -> int:
        return int(np.asarray(self.means).shape[1])

    @classmethod
    def hypercube(cls, dim: int = 16, components: int = 8, scale: float = 0.15,
                  variance: float = 0.05) -> "MixtureModel":
        """Equal-weight components centred on mutually orthogonal hypercube vertices."""
        size = 1 << max(0, (dim - 1).bit_length())
        if components >= size:
            raise ValueError("too many components for this dimension")
        H = hadamard(size).astype(np.float64)[1:components + 1, :dim]
        return cls(np.full(components, 1.0 / components), scale * H,
                   np.full(components, variance))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp])[:, None] * noise

    def total_variance(self) -> float:
        """Average per-coordinate variance of the data distribution."""
        m = (self.weights[:, None] * self.means).sum(0)
        second = (self.weights[:, None] * (self.means ** 2 + self.variances[:, None])).sum(0)
        return float(np.mean(second - m ** 2))


def forward_noise(x0, t: int, sched: DiffusionSchedule, rng: np.random.Generator) -> np.ndarray:
    """Draw ``x_t ~ N(sqrt(abar_t) x0, (1 - abar_t) I)``."""
    if not 0 <= t <= sched.T:
        raise ValueError(f"t={t} outside [0, {sched.T}]")
    x0 = np.asarray(x0, dtype=np.float64)
    ab = sched.alpha_bar[t]
    eps = rng.standard_normal(x0.shape)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def responsibilities(x_t, t: int, mix: MixtureModel, sched: DiffusionSchedule) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    ab = sched.alpha_bar[t]
    v = ab * mix.variances + (1.0 - ab)
    centres = np.sqrt(ab) * mix.means
    sq = ((x[:, None, :] - centres[None]) ** 2).sum(-1)
    logp = np.log(mix.weights) - 0.5 * mix.dim * np.log(v) - 0.5 * sq / v
    return np.exp(logp - logsumexp(logp, axis=1, keepdims=True))


def analytic_denoiser(x_t, t: int, mix: MixtureModel, sched: DiffusionSchedule) -> np.ndarray:
    """Posterior mean of the injected noise given ``x_t``.

    Per component, ``E[eps | x_t, k] = sqrt(1-abar) (x_t - sqrt(abar) mu_k) / (abar s_k^2 + 1 - abar)``;
    the result mixes these with the component responsibilities.
    """
    if t < 1:
        raise ValueError("denoiser defined for t >= 1")
    x = np.asarray(x_t, dtype=np.float64)
    flat = np.atleast_2d(x)
    ab = sched.alpha_bar[t]
    v = ab * mix.variances + (1.0 - ab)
    r = responsibilities(flat, t, mix, sched)
    # sum_k r_k (x - c_k)/v_k = x * sum_k r_k/v_k - sum_k r_k c_k/v_k
    gain = (r / v).sum(1, keepdims=True)
    offset = (r / v) @ (np.sqrt(ab) * mix.means)
    eps = np.sqrt(1.0 - ab) * (flat * gain - offset)
    return eps.reshape(x.shape)


@dataclass(frozen=True)
class AnalyticDenoiser:
    mixture: MixtureModel
    schedule: DiffusionSchedule

    def __call__(self, x, t: int) -> np.ndarray:
        return analytic_denoiser(x, t, self.mixture, self.schedule)


@dataclass
class SampleSet:
    """Calibration samples: features, 0-based step index and source trajectory."""

    features: np.ndarray
    timesteps: np.ndarray
    traj_ids: np.ndarray

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.timesteps = np.asarray(self.timesteps, dtype=np.int64)
        self.traj_ids = np.asarray(self.traj_ids, dtype=np.int64)
        n = self.features.shape[0]
        if self.timesteps.shape != (n,) or self.traj_ids.shape != (n,):
            raise ValueError("features, timesteps and traj_ids must agree in length")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite sample features")

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx, dtype=np.int64)
        return SampleSet(self.features[idx], self.timesteps[idx], self.traj_ids[idx])


@dataclass
class LinearSurrogate:
    """``eps_hat = W[t-1] @ x + b[t-1]`` for every step ``t`` in ``1..T``."""

    W: np.ndarray
    b: np.ndarray
    borrowed: np.ndarray = None
    ridge: np.ndarray = None

    def __call__(self, x, t: int) -> np.ndarray:
        return np.asarray(x) @ self.W[t - 1].T + self.b[t - 1]


def fit_surrogate(samples: SampleSet, mix: MixtureModel, sched: DiffusionSchedule,
                  min_samples: int | None = None, ridge: float = 1e-6) -> LinearSurrogate:
    """Least-squares affine fit of the analytic denoiser, one map per step.

    A step with fewer than ``min_samples`` (default ``d + 1``) calibration samples
    widens its window to the nearest timesteps until it has enough; those steps
    are flagged in ``borrowed``. Targets are always the analytic noise prediction
    at the step being fitted.
    """
    if len(samples) == 0:
        raise ValueError("no calibration samples")
    d = mix.dim
    T = sched.T
    need = d + 1 if min_samples is None else int(min_samples)
    need = min(need, len(samples))
    W = np.zeros((T, d, d))
    b = np.zeros((T, d))
    borrowed = np.zeros(T, dtype=bool)
    ridged = np.zeros(T, dtype=bool)
    gaps = np.abs(samples.timesteps[None, :] - np.arange(T)[:, None])
    for step in range(T):
        width = 0
        mask = gaps[step] <= width
        while mask.sum() < need:
            width += 1
            mask = gaps[step] <= width
        borrowed[step] = width > 0
        X = samples.features[mask]
        Y = analytic_denoiser(X, step + 1, mix, sched)
        A = np.hstack([X, np.ones((X.shape[0], 1))])
        G = A.T @ A
        if np.linalg.matrix_rank(A) < d + 1:
            G = G + ridge * np.eye(d + 1)
            ridged[step] = True
        coef = np.linalg.solve(G, A.T @ Y)
        W[step] = coef[:d].T
        b[step] = coef[d]
    if ridged.any():
        warnings.warn(f"rank-deficient surrogate fit at {int(ridged.sum())} step(s); "
                      f"ridge {ridge:g} added", RuntimeWarning, stacklevel=2)
    return LinearSurrogate(W, b, borrowed, ridged)


@dataclass
class QuantizedSurrogate:
    """Surrogate with fake-quantized weights (per output channel) and activations (per tensor).

    ``act_in``/``act_out`` hold either one shared parameter set or one per step.
    """

    surrogate: LinearSurrogate
    weight_params: list
    act_in: QuantizerParams | list
    act_out: QuantizerParams | list
    Wq: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.Wq = np.stack([fake_quant(W, p) for W, p in zip(self.surrogate.W, self.weight_params)])

    def _act(self, params, t):
        return params[t - 1] if isinstance(params, list) else params

    def __call__(self, x, t: int) -> np.ndarray:
        xq = fake_quant(x, self._act(self.act_in, t))
        out = xq @ self.Wq[t - 1].T + self.surrogate.b[t - 1]
        return fake_quant(out, self._act(self.act_out, t))


def quantize_surrogate(surrogate: LinearSurrogate, samples: SampleSet, bits_weights: int,
                       bits_activations: int, per_timestep: bool = False) -> QuantizedSurrogate:
    """Calibrate weight and activation quantizers from ``samples``.

    Weights use per-channel ranges of each step's ``W`` (one channel per output
    row). Activations (the surrogate input and output) use per-tensor min/max
    over the calibration samples, shared across steps unless ``per_timestep``.
    """
    if len(samples) == 0:
        raise ValueError("no calibration samples")
    wparams = [calibrate(W, bits_weights, axis=0) for W in surrogate.W]
    T = surrogate.W.shape[0]
    outs = np.empty_like(samples.features)
    for step in np.unique(samples.timesteps):
        m = samples.timesteps == step
        outs[m] = surrogate(samples.features[m], int(step) + 1)
    if not per_timestep:
        return QuantizedSurrogate(surrogate, wparams,
                                  calibrate(samples.features, bits_activations),
                                  calibrate(outs, bits_activations))
    act_in, act_out = [], []
    shared_in = calibrate(samples.features, bits_activations)
    shared_out = calibrate(outs, bits_activations)
    for step in range(T):
        m = samples.timesteps == step
        act_in.append(calibrate(samples.features[m], bits_activations) if m.any() else shared_in)
        act_out.append(calibrate(outs[m], bits_activations) if m.any() else shared_out)
    return QuantizedSurrogate(surrogate, wparams, act_in, act_out)


def reverse_step(x_t, eps_hat, t: int, sched: DiffusionSchedule,
                 rng: np.random.Generator | None = None, noise=None) -> np.ndarray:
    """One DDPM (ancestral) or DDIM (eta = 0) update from step ``t`` to ``t - 1``.

    DDPM needs fresh Gaussian noise for ``t > 1``, taken from ``noise`` when
    given, otherwise drawn from ``rng``. The ``t = 1`` update returns the clean
    estimate without noise.
    """
    if t < 1:
        raise ValueError("reverse_step needs t >= 1")
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    ab = sched.alpha_bar
    ab_t, ab_prev = ab[t], ab[t - 1]
    if sched.sampler == "ddim":
        x0_pred = (x_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
        return np.sqrt(ab_prev) * x0_pred + np.sqrt(1.0 - ab_prev) * eps_hat
    beta = sched.betas[t - 1]
    mean = (x_t - beta / np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(1.0 - beta)
    if t == 1:
        return mean
    if noise is None:
        if rng is None:
            raise ValueError("DDPM step needs rng or noise")
        noise = rng.standard_normal(x_t.shape)
    var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
    return mean + np.sqrt(var) * noise


@dataclass
class PipelineConfig:
    """One sampling pipeline.

    ``denoiser`` maps ``(x_batch, t) -> eps_hat``; ``correction`` (optional)
    maps ``(t, x_batch) -> x_batch`` and is applied to every new intermediate
    sample ``x_t``, ``t = T-1 .. 0``.
    """

    schedule: DiffusionSchedule
    denoiser: Callable
    cache_interval: int = 1
    correction: Callable | None = None
    label: str = "run"


@dataclass
class TrajectoryBatch:
    """Lock-stepped trajectories. ``xs[:, i]`` is the sample at ``ts[i]``.

    ``eps[:, i]`` is the noise prediction used at ``ts[i]``; the last column
    (t = 0) has no prediction and is NaN.
    """

    ts: np.ndarray
    xs: np.ndarray
    eps: np.ndarray
    seeds: np.ndarray
    cache: dict = field(default_factory=dict)
    label: str = "run"

    def __len__(self) -> int:
        return self.xs.shape[0]

    def at(self, t: int) -> np.ndarray:
        """All trajectories' samples at timestep ``t``."""
        return self.xs[:, self.ts.size - 1 - t]

    def trajectory(self, i: int) -> "Trajectory":
        return Trajectory(self.ts.copy(), self.xs[i].copy(), self.eps[i].copy(), int(self.seeds[i]))

    def model_inputs(self) -> SampleSet:
        """Denoiser inputs ``x_t`` (t = T..1) as calibration samples."""
        B, L, d = self.xs.shape
        feats = self.xs[:, :-1].reshape(-1, d)
        steps = np.tile(self.ts[:-1] - 1, B)
        ids = np.repeat(self.seeds, L - 1)
        return SampleSet(feats, steps, ids)


@dataclass
class Trajectory:
    ts: np.ndarray
    xs: np.ndarray
    eps: np.ndarray
    traj_id: int = 0


def initial_noise(seeds: Sequence[int], T: int, d: int) -> np.ndarray:
    """Per-trajectory noise, shape ``(B, T + 1, d)``: row 0 is ``x_T``, row ``i`` feeds step ``T - i + 1``."""
    return np.stack([make_rng(s).standard_normal((T + 1, d)) for s in seeds])


def sample(config: PipelineConfig, seeds: Sequence[int], dim: int | None = None,
           noise: np.ndarray | None = None) -> TrajectoryBatch:
    """Run ``len(seeds)`` reverse-diffusion trajectories in lock step.

    Every trajectory draws its initial sample and its per-step DDPM noise from
    its own seed, so a trajectory does not depend on the rest of the batch and
    runs sharing a seed are paired. The cache holds the whole batch's feature,
    which is equivalent to one cache per trajectory because all trajectories
    visit the same steps.
    """
    sched = config.schedule
    T = sched.T
    seeds = np.asarray(list(seeds), dtype=np.int64)
    if noise is None:
        if dim is None:
            raise ValueError("pass dim or precomputed noise")
        noise = initial_noise(seeds, T, dim)
    B, _, d = noise.shape
    xs = np.empty((B, T + 1, d))
    eps = np.full((B, T + 1, d), np.nan)
    state = CacheState(config.cache_interval)
    x = noise[:, 0, :].copy()
    xs[:, 0] = x
    for i, t in enumerate(range(T, 0, -1)):
        e = serve(t, lambda: config.denoiser(x, t), state)
        eps[:, i] = e
        x = reverse_step(x, e, t, sched, noise=noise[:, i + 1, :])
        if config.correction is not None:
            x = config.correction(t - 1, x)
        xs[:, i + 1] = x
    return TrajectoryBatch(np.arange(T, -1, -1), xs, eps, seeds, state.to_dict(), config.label)


def write_trajectories_csv(path, batch: TrajectoryBatch) -> None:
    """Long-format dump: ``traj_id, t, coord_index, x, eps_hat`` (eps_hat blank at t = 0)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["traj_id", "t", "coord_index", "x", "eps_hat"])
        for b, seed in enumerate(batch.seeds):
            for i, t in enumerate(batch.ts):
                for c in range(batch.xs.shape[2]):
                    e = batch.eps[b, i, c]
                    w.writerow([int(seed), int(t), c, repr(float(batch.xs[b, i, c])),
                                "" if np.isnan(e) else repr(float(e))])
