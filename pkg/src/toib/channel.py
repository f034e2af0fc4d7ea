"""Broadcast downlink: power allocation, superposition, AWGN / Rayleigh channels."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

RAYLEIGH_SCALE = 1.0 / math.sqrt(2.0)  # gives E[h^2] = 1


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class PowerAllocation:
    powers: tuple[float, ...]
    p_max: float = 1.0

    def __post_init__(self):
        if any(p < 0 for p in self.powers):
            raise ValueError("powers must be non-negative")
        if abs(sum(self.powers) - self.p_max) > 1e-12:
            raise ValueError(f"powers sum to {sum(self.powers)}, expected p_max={self.p_max}")

    @classmethod
    def equal(cls, n_users: int, p_max: float = 1.0) -> "PowerAllocation":
        return cls(tuple([p_max / n_users] * n_users), p_max)

    def __len__(self) -> int:
        return len(self.powers)


@dataclass(frozen=True)
class SnrSpec:
    db: float

    @property
    def linear(self) -> float:
        return 10.0 ** (self.db / 10.0)


@dataclass
class ChannelRealization:
    """Fading gains (one per row of the batch) and per-dimension noise variance."""

    kind: str
    gain: np.ndarray
    sigma2: float
    equalize: bool = True

    def __post_init__(self):
        if self.kind not in ("awgn", "rayleigh"):
            raise ValueError(f"unknown channel kind {self.kind!r}")
        if self.sigma2 < 0:
            raise ValueError("noise variance must be non-negative")


def power_normalize(z: Tensor) -> Tensor:
    """Scale the batch so the mean squared row norm is exactly one."""
    if z.data.ndim != 2 or z.shape[0] == 0:
        raise ShapeError(f"power_normalize expects a non-empty [V x d] batch, got {z.shape}")
    if not np.any(z.data):
        raise DegenerateInputError("cannot normalise an all-zero batch")
    msq = ad.mean(ad.sum(ad.mul(z, z), axis=1))
    gain = ad.exp(ad.scale(ad.log(msq), -0.5))
    return ad.mul(z, gain)


def superpose(latents: list[Tensor], alloc: PowerAllocation) -> Tensor:
    if len(latents) != len(alloc) or not latents:
        raise ShapeError(f"{len(latents)} latents for {len(alloc)} power levels")
    shape = latents[0].shape
    if any(z.shape != shape for z in latents):
        raise ShapeError("all latents must share one shape")
    s = ad.scale(latents[0], math.sqrt(alloc.powers[0]))
    for z, p in zip(latents[1:], alloc.powers[1:]):
        s = ad.add(s, ad.scale(z, math.sqrt(p)))
    return s


def calibrate_noise(s_batch, snr: SnrSpec) -> float:
    """Per-dimension noise variance giving the target SNR for this batch."""
    s = s_batch.data if isinstance(s_batch, Tensor) else np.asarray(s_batch)
    if s.ndim != 2 or s.shape[0] == 0:
        raise ShapeError(f"calibrate_noise expects a non-empty [V x d] batch, got {s.shape}")
    power = float(np.mean(np.sum(s * s, axis=1))) / s.shape[1]
    if power <= 0:
        raise DegenerateInputError("zero-power batch")
    if math.isinf(snr.db) and snr.db > 0:
        return 0.0
    return power / snr.linear


def draw_realization(kind: str, sigma2: float, n_rows: int, rng: np.random.Generator,
                     equalize: bool = True) -> ChannelRealization:
    if kind == "rayleigh":
        gain = rng.rayleigh(RAYLEIGH_SCALE, size=n_rows)
    else:
        gain = np.ones(n_rows)
    return ChannelRealization(kind, gain, sigma2, equalize)


def transmit(s: Tensor, real: ChannelRealization, rng: np.random.Generator) -> Tensor:
    """y = h*s + n, divided by h when equalising. Noise is drawn from ``rng``.

    A fresh noise array is drawn even when sigma2 is zero so the RNG stream
    advances identically across SNR settings.
    """
    noise = rng.standard_normal(s.shape) * math.sqrt(real.sigma2)
    h = real.gain[:, None]
    if real.kind == "awgn" or real.equalize:
        return ad.add(s, noise / h)
    return ad.add(ad.mul(s, np.broadcast_to(h, s.shape).copy()), noise)
