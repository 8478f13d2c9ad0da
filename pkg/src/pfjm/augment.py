"""Perturbation kernel geometry in the (N + D)-dimensional augmented space.

Every random quantity used to corrupt a training example lives here: the
noise level ``sigma``, its augmented radius ``r = sigma * sqrt(D)``, the
radial magnitude ``R`` of the data-space perturbation and its direction ``v``.

The radius law has density proportional to ``R**(N-1) / (R**2 + r**2)**((N+D)/2)``.
Substituting ``B = R**2 / (R**2 + r**2)`` turns it into ``Beta(N/2, D/2)``,
which is sampled as ``G1 / (G1 + G2)`` from two independent draws
``G1 ~ Gamma(N/2)``, ``G2 ~ Gamma(D/2)`` of numpy's ``standard_gamma``
(Marsaglia-Tsang squeeze method). Reproduction in another runtime is
therefore exact in distribution, not bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "AugmentationParams",
    "NoiseDraw",
    "sigma_to_r",
    "sample_sigma",
    "sample_radius",
    "sample_unit_direction",
    "sample_noise",
    "perturb",
]

BETA_EPS = 1e-12


@dataclass(frozen=True)
class AugmentationParams:
    N: int
    D: int
    sigma_data: float = 0.5
    p_mean: float = -1.2
    p_std: float = 1.2

    def __post_init__(self):
        if int(self.N) < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")
        if int(self.D) < 1:
            raise ValueError(f"D must be >= 1, got {self.D}")
        if not self.sigma_data > 0:
            raise ValueError(f"sigma_data must be > 0, got {self.sigma_data}")
        if not self.p_std > 0:
            raise ValueError(f"p_std must be > 0, got {self.p_std}")


@dataclass(frozen=True)
class NoiseDraw:
    """One perturbation event. ``v`` is flat with length N."""

    sigma: float
    r: float
    R: float
    v: np.ndarray


def sigma_to_r(sigma: float, D: int) -> float:
    return sigma * math.sqrt(D)


def sample_sigma(rng: np.random.Generator, params: AugmentationParams, size=None):
    """Log-normal noise level: ``ln sigma ~ Normal(p_mean, p_std**2)``."""
    return np.exp(params.p_mean + params.p_std * rng.standard_normal(size))


def _radius_from_beta(b, r):
    b = np.clip(b, BETA_EPS, 1.0 - BETA_EPS)
    return r * np.sqrt(b / (1.0 - b))


def sample_radius(rng: np.random.Generator, r, N: int, D: int, size=None):
    r = np.asarray(r, dtype=np.float64)
    if np.any(r <= 0):
        raise ValueError("sample_radius requires r > 0")
    g1 = rng.standard_gamma(N / 2.0, size=size)
    g2 = rng.standard_gamma(D / 2.0, size=size)
    R = _radius_from_beta(g1 / (g1 + g2), r)
    return float(R) if np.ndim(R) == 0 else R


def sample_unit_direction(rng: np.random.Generator, N: int, size: int | None = None):
    """Uniform direction on the unit sphere in R^N, via a normalized Gaussian.

    With ``size`` given, returns an array of shape ``(size, N)``.
    """
    shape = (N,) if size is None else (size, N)
    while True:
        u = rng.standard_normal(shape)
        norm = np.linalg.norm(u, axis=-1, keepdims=True)
        if np.all(norm > 0):
            return u / norm


def sample_noise(rng: np.random.Generator, params: AugmentationParams, sigma=None) -> NoiseDraw:
    """Draw a complete perturbation event; ``sigma`` may be fixed by the caller."""
    if sigma is None:
        sigma = float(sample_sigma(rng, params))
    r = sigma_to_r(sigma, params.D)
    R = sample_radius(rng, r, params.N, params.D) if r > 0 else 0.0
    v = sample_unit_direction(rng, params.N)
    return NoiseDraw(sigma=float(sigma), r=float(r), R=float(R), v=v)


def perturb(y, R, v):
    """Return ``y + R * v`` with ``v`` reshaped to ``y``.

    Batched use: ``y`` of shape ``(B, *shape)``, ``R`` of shape ``(B,)`` and
    ``v`` of shape ``(B, N)``.
    """
    y = np.asarray(y)
    v = np.asarray(v)
    R = np.asarray(R, dtype=np.float64)
    if R.ndim == 0:
        if v.size != y.size:
            raise ValueError(f"direction has length {v.size}, volume has {y.size} entries")
        return y + (R * v).reshape(y.shape).astype(y.dtype, copy=False)
    B = R.shape[0]
    if y.shape[0] != B or v.shape != (B, y[0].size):
        raise ValueError(f"batched perturb shape mismatch: y {y.shape}, R {R.shape}, v {v.shape}")
    return y + (R[:, None] * v).reshape(y.shape).astype(y.dtype, copy=False)
