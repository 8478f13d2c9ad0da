"""Exact augmented Poisson field of a finite charge set.

The field is evaluated by direct summation over charges. The ``1/S_{N+D-1}(1)``
prefactor is dropped since only the ratio of the data-space and radial
components enters the field-line ODE ``dx/dr = E_x / E_r``.

The summation kernel comes in two flavours with an identical contract: a
compiled Cython extension (``pfjm._field_kernel``) and a numpy fallback
(``pfjm._field_py``). The compiled one is used when importable, unless the
environment variable ``PFJM_PURE_PYTHON`` is set.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from . import _field_py

log = logging.getLogger(__name__)

if os.environ.get("PFJM_PURE_PYTHON"):
    _kernel = _field_py.field_batch
    KERNEL = "python"
else:
    try:
        from ._field_kernel import field_batch as _kernel

        KERNEL = "cython"
    except ImportError:  # extension not built
        _kernel = _field_py.field_batch
        KERNEL = "python"

R_MIN = 1e-3

__all__ = [
    "ChargeSet",
    "FieldValue",
    "OracleError",
    "field",
    "field_batch",
    "ode_rhs",
    "integrate_field_line",
    "trace_field_lines",
    "sample_prior",
    "KERNEL",
]


class OracleError(RuntimeError):
    pass


@dataclass(frozen=True)
class ChargeSet:
    charges: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        charges = np.atleast_2d(np.asarray(self.charges, dtype=np.float64))
        if charges.shape[0] < 1 or charges.size == 0:
            raise ValueError("charge set is empty")
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if weights.shape[0] != charges.shape[0]:
            raise ValueError(f"{charges.shape[0]} charges but {weights.shape[0]} weights")
        if np.any(weights < 0):
            raise ValueError("charge weights must be nonnegative")
        if abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"charge weights sum to {weights.sum()!r}, expected 1")
        object.__setattr__(self, "charges", np.ascontiguousarray(charges))
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, charges) -> "ChargeSet":
        charges = np.atleast_2d(np.asarray(charges, dtype=np.float64))
        m = charges.shape[0]
        return cls(charges, np.full(m, 1.0 / m))

    @property
    def N(self) -> int:
        return self.charges.shape[1]

    @property
    def log_weights(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.weights)


@dataclass(frozen=True)
class FieldValue:
    """Field components up to the positive factor ``exp(log_scale)``.

    ``e_x`` and ``e_r`` are stored rescaled because for image-sized ``N + D``
    the raw magnitudes leave floating-point range.
    """

    e_x: np.ndarray
    e_r: float
    log_scale: float = 0.0

    def unscaled(self) -> tuple[np.ndarray, float]:
        k = math.exp(self.log_scale)
        return self.e_x * k, self.e_r * k


def field_batch(charges: ChargeSet, X, r, D: int):
    """Vectorized field at many points. ``X`` is (P, N), ``r`` scalar or (P,)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    r = np.broadcast_to(np.asarray(r, dtype=np.float64), (X.shape[0],))
    if np.any(r <= 0):
        raise ValueError("field requires r > 0")
    if X.shape[1] != charges.N:
        raise ValueError(f"points have dimension {X.shape[1]}, charges {charges.N}")
    return _kernel(
        np.ascontiguousarray(X),
        np.ascontiguousarray(r),
        charges.charges,
        np.ascontiguousarray(charges.log_weights),
        int(D),
    )


def field(charges: ChargeSet, x, r: float, D: int) -> FieldValue:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    ex, er, scale = field_batch(charges, x, r, D)
    return FieldValue(e_x=ex[0], e_r=float(er[0]), log_scale=float(scale[0]))


def ode_rhs(charges: ChargeSet, x, r, D: int):
    """``dx/dr`` along the field line; ``x`` may be a single point or a (P, N) batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    ex, er, _ = field_batch(charges, x.reshape(-1, charges.N) if single else x, r, D)
    out = ex / er[:, None]
    return out[0] if single else out


def _radius_grid(r_start: float, r_end: float, steps: int) -> np.ndarray:
    return np.geomspace(r_start, max(r_end, R_MIN), steps + 1)


def trace_field_lines(charges: ChargeSet, x0, r_start: float, r_end: float, steps: int,
                      D: int, record: bool = False):
    """RK4 integration of many field lines at once, uniform in ``ln r``.

    Integrating in ``s = ln r`` gives ``dx/ds = r * E_x / E_r``. ``r_end`` below
    ``R_MIN`` is clamped to ``R_MIN``. With ``record=True`` returns the radius
    grid and the full (steps + 1, P, N) trajectory as well.
    """
    if not r_start > r_end >= 0:
        raise ValueError(f"need r_start > r_end >= 0, got {r_start}, {r_end}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    X = np.array(np.atleast_2d(x0), dtype=np.float64)
    radii = _radius_grid(r_start, r_end, steps)
    s = np.log(radii)
    traj = [X.copy()] if record else None

    def g(x, si):
        return math.exp(si) * ode_rhs(charges, x, math.exp(si), D)

    for n in range(steps):
        h = s[n + 1] - s[n]
        k1 = g(X, s[n])
        k2 = g(X + 0.5 * h * k1, s[n] + 0.5 * h)
        k3 = g(X + 0.5 * h * k2, s[n] + 0.5 * h)
        k4 = g(X + h * k3, s[n + 1])
        X = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(X)):
            raise OracleError(f"non-finite state at integration step {n} (r={radii[n + 1]:.3e})")
        if record:
            traj.append(X.copy())
    if record:
        return radii, np.stack(traj)
    return X


def integrate_field_line(charges: ChargeSet, x0, r_start: float, r_end: float, steps: int,
                         D: int):
    """Follow one field line from ``(x0, r_start)`` down to ``r_end``; returns ``x(r_end)``."""
    x0 = np.asarray(x0, dtype=np.float64)
    return trace_field_lines(charges, x0.reshape(1, -1), r_start, r_end, steps, D)[0]


def sample_prior(rng: np.random.Generator, r_max: float, N: int, D: int, size: int | None = None):
    """Gaussian far-field starting points on the ``r = r_max`` hyper-cylinder."""
    shape = (N,) if size is None else (size, N)
    return (r_max / math.sqrt(D)) * rng.standard_normal(shape)
