"""Condition-initialized Heun sampling with per-step refinement toward the condition.

Starting from the low-dose joint condition ``c``, each step first blends the
state toward the condition, ``x <- (1 - w) x + w c``, then takes an Euler
step along ``d = (x - f(x, t, c)) / t`` and, unless the next level is zero,
corrects it with the trapezoidal (Heun) average of the two slopes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .augment import sample_radius, sample_unit_direction

__all__ = [
    "SamplerError",
    "SamplerSchedule",
    "build_schedule",
    "refine_with_condition",
    "sample",
    "sample_pfgmpp",
    "heun_order_probe",
    "ProbeResult",
    "W_SWEEP",
]

INIT_MODES = ("condition", "condition_plus_noise")
W_SWEEP = (0.0, 0.05, 0.1, 0.2, 0.5)


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerSchedule:
    t: np.ndarray
    w: float = 0.1
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    init_mode: str = "condition"

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("schedule needs at least two levels")
        if t[-1] != 0.0 or np.any(np.diff(t) >= 0):
            raise ValueError("schedule must be strictly decreasing and end at 0")
        if not 0.0 <= self.w <= 1.0:
            raise ValueError(f"refinement weight must be in [0, 1], got {self.w}")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        object.__setattr__(self, "t", t)

    @property
    def T(self) -> int:
        return self.t.size - 1

    def with_w(self, w: float) -> "SamplerSchedule":
        return SamplerSchedule(self.t, w, self.sigma_min, self.sigma_max, self.rho, self.init_mode)


def build_schedule(T: int, sigma_min: float = 0.002, sigma_max: float = 80.0, rho: float = 7.0,
                   w: float = 0.1, init_mode: str = "condition") -> SamplerSchedule:
    """``T`` levels interpolated linearly in ``sigma**(1/rho)`` from ``sigma_max`` to
    ``sigma_min``, followed by a final 0."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < sigma_min < sigma_max:
        raise ValueError(f"need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
    if rho < 1:
        raise ValueError("rho must be >= 1")
    if T == 1:
        levels = np.array([sigma_max])
    else:
        n = np.arange(T)
        a, b = sigma_max ** (1 / rho), sigma_min ** (1 / rho)
        levels = (a + n / (T - 1) * (b - a)) ** rho
        levels[0], levels[-1] = sigma_max, sigma_min
    return SamplerSchedule(np.append(levels, 0.0), w, sigma_min, sigma_max, rho, init_mode)


def refine_with_condition(x, c, w: float):
    if x.shape != c.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(c.shape)}")
    return (1.0 - w) * x + w * c


def _as_denoiser(model):
    """Normalize a model or callable to ``f(x, sigma: float, c) -> tensor`` plus its dtype."""
    if isinstance(model, torch.nn.Module):
        dtype = next(model.parameters()).dtype

        def f(x, t, c):
            with torch.no_grad():
                return model(x, torch.full((x.shape[0],), t, dtype=x.dtype), c)

        return f, dtype
    return model, torch.float64


def _integrate(f, x, c, ts, w: float, corrector: bool = True):
    for n in range(len(ts) - 1):
        t_cur, t_next = float(ts[n]), float(ts[n + 1])
        x = refine_with_condition(x, c, w)
        d = (x - f(x, t_cur, c)) / t_cur
        x_next = x + (t_next - t_cur) * d
        if corrector and t_next > 0:
            d_prime = (x_next - f(x_next, t_next, c)) / t_next
            x_next = x + (t_next - t_cur) * (0.5 * d + 0.5 * d_prime)
        if not bool(torch.isfinite(x_next).all()):
            raise SamplerError(f"non-finite state after step {n} (t={t_cur:.4g} -> {t_next:.4g})")
        x = x_next
    return x


def _initial_state(c, schedule: SamplerSchedule, rng, D):
    if schedule.init_mode == "condition":
        return c.clone()
    if rng is None:
        raise ValueError("condition_plus_noise initialization needs an rng")
    B = c.shape[0]
    N = int(np.prod(c.shape[1:]))
    t0 = float(schedule.t[0])
    if D is None:
        noise = t0 * rng.standard_normal((B, N))
    else:
        R = sample_radius(rng, np.full(B, t0 * math.sqrt(D)), N, D, size=B)
        noise = R[:, None] * sample_unit_direction(rng, N, B)
    return c + torch.from_numpy(noise.reshape(c.shape)).to(c.dtype)


def sample(model, c, schedule: SamplerSchedule, rng=None, D: int | None = None):
    """Reconstruct a batch of joint volumes from their conditions.

    ``c`` has a leading batch axis. ``model`` is a :class:`~pfjm.model.Denoiser`
    or any callable ``f(x, t, c)`` on float64 tensors. ``rng`` and ``D`` only
    matter for ``init_mode="condition_plus_noise"``, which perturbs the start
    with the augmented kernel at level ``t[0]`` (Gaussian if ``D`` is None).
    Returns a numpy array shaped like ``c``.
    """
    f, dtype = _as_denoiser(model)
    ct = torch.as_tensor(np.asarray(c), dtype=dtype)
    if not bool(torch.isfinite(ct).all()):
        raise SamplerError("condition has non-finite entries")
    x = _initial_state(ct, schedule, rng, D)
    x = _integrate(f, x, ct, schedule.t, schedule.w)
    return x.cpu().numpy()


def sample_pfgmpp(model, c, schedule: SamplerSchedule):
    """Heun sampler with the condition used only as network input and starting point."""
    f, dtype = _as_denoiser(model)
    ct = torch.as_tensor(np.asarray(c), dtype=dtype)
    x = ct.clone()
    t = schedule.t
    for n in range(len(t) - 1):
        d = (x - f(x, float(t[n]), ct)) / float(t[n])
        x_next = x + float(t[n + 1] - t[n]) * d
        if t[n + 1] > 0:
            d2 = (x_next - f(x_next, float(t[n + 1]), ct)) / float(t[n + 1])
            x_next = x + float(t[n + 1] - t[n]) * (0.5 * d + 0.5 * d2)
        x = x_next
    return x.cpu().numpy()


@dataclass(frozen=True)
class ProbeResult:
    order: float
    error_coarse: float
    error_fine: float


def heun_order_probe(a: float, T: int = 32, sigma_min: float = 0.002, sigma_max: float = 80.0,
                     rho: float = 7.0, corrector: bool = True, x0: float = 1.0) -> ProbeResult:
    """Empirical convergence order of the sampler's integrator on a solvable ODE.

    The linear denoiser ``f(x, t) = a x`` gives ``dx/dt = (1 - a) x / t`` with
    solution ``x(t) = x0 (t / sigma_max)**(1 - a)``. The positive part of the
    schedule (ending at ``sigma_min``) is integrated with ``T`` and ``2T``
    levels; the order is ``log2(error_T / error_2T)``.
    """

    def f(x, t, c):
        return a * x

    exact = x0 * (sigma_min / sigma_max) ** (1.0 - a)
    errs = []
    for levels in (T, 2 * T):
        ts = build_schedule(levels, sigma_min, sigma_max, rho).t[:-1]
        x = torch.full((1, 1), x0, dtype=torch.float64)
        out = _integrate(f, x, torch.zeros_like(x), ts, 0.0, corrector)
        errs.append(abs(float(out[0, 0]) - exact))
    with np.errstate(divide="ignore", invalid="ignore"):
        order = float(np.log2(errs[0] / errs[1])) if errs[1] > 0 else float("inf")
    return ProbeResult(order, errs[0], errs[1])
