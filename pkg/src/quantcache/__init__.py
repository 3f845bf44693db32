"""Quantization plus feature caching for a toy diffusion sampler, with
calibration-set clustering and per-step variance compensation."""

__version__ = "0.1.0"
