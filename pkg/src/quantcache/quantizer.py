"""Uniform affine (asymmetric) quantization with min/max calibration."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

DEGENERATE_EPS = 1e-8


def round_half_away(x):
    """Round to nearest integer, halves away from zero (platform stable)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantizerParams:
    """Scale, zero-point and range of a ``bits``-bit uniform quantizer.

    For per-tensor granularity ``axis`` is ``None`` and ``scale``/``zero_point``/
    ``lower``/``upper`` are 0-d arrays. For per-channel granularity they hold one
    entry per channel along ``axis``.
    """

    bits: int
    scale: np.ndarray
    zero_point: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    axis: int | None = None

    @property
    def qmax(self) -> int:
        return 2 ** self.bits - 1

    @classmethod
    def from_range(cls, lower, upper, bits: int, axis: int | None = None) -> "QuantizerParams":
        if bits < 2:
            raise ValueError(f"bit-width must be >= 2, got {bits}")
        lower = np.array(lower, dtype=np.float64)
        upper = np.array(upper, dtype=np.float64)
        if np.any(lower > upper):
            raise ValueError("lower bound exceeds upper bound")
        same = lower == upper
        if np.any(same):
            warnings.warn(f"degenerate calibration range (l == u) widened by +-{DEGENERATE_EPS}",
                          RuntimeWarning, stacklevel=3)
            lower = np.where(same, lower - DEGENERATE_EPS, lower)
            upper = np.where(same, upper + DEGENERATE_EPS, upper)
        qmax = 2 ** bits - 1
        scale = (upper - lower) / qmax
        zero_point = np.clip(round_half_away(-lower / scale), 0, qmax).astype(np.int64)
        return cls(bits, scale, zero_point, lower, upper, axis)

    def _bcast(self, arr: np.ndarray, ndim: int) -> np.ndarray:
        if self.axis is None:
            return arr
        shape = [1] * ndim
        shape[self.axis] = -1
        return arr.reshape(shape)

    def to_dict(self) -> dict:
        return {
            "b": self.bits,
            "s": self.scale.tolist(),
            "z": self.zero_point.tolist(),
            "l": self.lower.tolist(),
            "u": self.upper.tolist(),
            "granularity": "per-tensor" if self.axis is None else {"per-channel": self.axis},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "QuantizerParams":
        gran = d["granularity"]
        axis = None if gran == "per-tensor" else int(gran["per-channel"])
        return cls(int(d["b"]), np.array(d["s"], dtype=np.float64),
                   np.array(d["z"], dtype=np.int64), np.array(d["l"], dtype=np.float64),
                   np.array(d["u"], dtype=np.float64), axis)

    @classmethod
    def from_json(cls, text: str) -> "QuantizerParams":
        return cls.from_dict(json.loads(text))


@dataclass
class CalibrationStats:
    """Running min/max keyed by ``(tensor_id, channel, timestep_bucket)``.

    ``channel`` is ``None`` for per-tensor statistics and ``timestep_bucket`` is
    ``None`` when one parameter set is shared across all timesteps.
    """

    mins: dict = field(default_factory=dict)
    maxs: dict = field(default_factory=dict)

    def observe(self, tensor_id: str, values, axis: int | None = None, bucket=None) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.size == 0:
            return
        if axis is None:
            self._update((tensor_id, None, bucket), values.min(), values.max())
            return
        moved = np.moveaxis(values, axis, 0).reshape(values.shape[axis], -1)
        for c, (lo, hi) in enumerate(zip(moved.min(axis=1), moved.max(axis=1))):
            self._update((tensor_id, c, bucket), lo, hi)

    def _update(self, key, lo, hi) -> None:
        lo, hi = float(lo), float(hi)
        self.mins[key] = min(self.mins.get(key, lo), lo)
        self.maxs[key] = max(self.maxs.get(key, hi), hi)

    def merge(self, other: "CalibrationStats") -> "CalibrationStats":
        out = CalibrationStats(dict(self.mins), dict(self.maxs))
        for key in other.mins:
            out._update(key, other.mins[key], other.maxs[key])
        return out

    def params(self, tensor_id: str, bits: int, bucket=None) -> QuantizerParams:
        keys = sorted((k for k in self.mins if k[0] == tensor_id and k[2] == bucket),
                      key=lambda k: -1 if k[1] is None else k[1])
        if not keys:
            raise KeyError(f"no calibration statistics for {tensor_id!r} (bucket {bucket!r})")
        if keys[0][1] is None:
            return QuantizerParams.from_range(self.mins[keys[0]], self.maxs[keys[0]], bits)
        lo = [self.mins[k] for k in keys]
        hi = [self.maxs[k] for k in keys]
        return QuantizerParams.from_range(lo, hi, bits, axis=0)


def calibrate(samples, bits: int, axis: int | None = None) -> QuantizerParams:
    """Min/max calibration over a sequence of tensors.

    ``axis=None`` gives one per-tensor parameter set; an integer ``axis`` gives
    per-channel parameters along that axis (all samples must agree on its size).
    """
    if isinstance(samples, np.ndarray):
        samples = [samples]
    samples = [np.asarray(s, dtype=np.float64) for s in samples]
    if not samples or all(s.size == 0 for s in samples):
        raise ValueError("cannot calibrate on an empty sample set")
    if axis is None:
        lo = min(float(s.min()) for s in samples if s.size)
        hi = max(float(s.max()) for s in samples if s.size)
        return QuantizerParams.from_range(lo, hi, bits)
    los, his = [], []
    for s in samples:
        moved = np.moveaxis(s, axis, 0).reshape(s.shape[axis], -1)
        los.append(moved.min(axis=1))
        his.append(moved.max(axis=1))
    return QuantizerParams.from_range(np.min(los, axis=0), np.max(his, axis=0), bits, axis=axis)


def quantize(X, p: QuantizerParams) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    s = p._bcast(p.scale, X.ndim)
    z = p._bcast(p.zero_point, X.ndim)
    return np.clip(round_half_away(X / s) + z, 0, p.qmax).astype(np.int64)


def dequantize(q, p: QuantizerParams) -> np.ndarray:
    q = np.asarray(q)
    s = p._bcast(p.scale, q.ndim)
    z = p._bcast(p.zero_point, q.ndim)
    return (q - z) * s


def fake_quant(X, p: QuantizerParams) -> np.ndarray:
    """Quantize then dequantize: the real-valued effect of ``p`` on ``X``."""
    return dequantize(quantize(X, p), p)


def clip_rate(X, p: QuantizerParams) -> float:
    """Fraction of entries of ``X`` outside the calibrated ``[l, u]``."""
    X = np.asarray(X, dtype=np.float64)
    lo = p._bcast(p.lower, X.ndim)
    hi = p._bcast(p.upper, X.ndim)
    if X.size == 0:
        return 0.0
    return float(np.mean((X < lo) | (X > hi)))
