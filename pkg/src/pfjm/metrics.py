"""Image-quality metrics: MAE, SSIM, PSNR and the Frechet distance.

Volumes are compared per phase. SSIM defaults to the single-window form
(one mean/variance/covariance per image); a Gaussian-windowed variant is
available through ``ssim(..., window=sigma)``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.stats import wasserstein_distance

from .data import HU_SCALE, PHASES

log = logging.getLogger(__name__)

# normalized intensities span [-1, 1]
DEFAULT_MAX = 2.0


class IdenticalInputsError(ValueError):
    """PSNR is infinite when the inputs coincide."""


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mae(reference, reconstruction) -> float:
    a, b = _pair(reference, reconstruction)
    return float(np.mean(np.abs(a - b)))


def ssim(reference, reconstruction, C1=None, C2=None, max_value: float = DEFAULT_MAX,
         window: float | None = None) -> float:
    """Structural similarity.

    ``C1``/``C2`` default to ``(0.01 * max_value)**2`` and ``(0.03 * max_value)**2``.
    With ``window`` set, local statistics use a Gaussian window of that standard
    deviation (in pixels) over the last two axes and the SSIM map is averaged.
    """
    a, b = _pair(reference, reconstruction)
    C1 = (0.01 * max_value) ** 2 if C1 is None else C1
    C2 = (0.03 * max_value) ** 2 if C2 is None else C2
    if window is None:
        mu_a, mu_b = a.mean(), b.mean()
        var_a, var_b = a.var(), b.var()
        cov = np.mean((a - mu_a) * (b - mu_b))
    else:
        filt = lambda x: gaussian_filter(x, sigma=window, mode="reflect")
        mu_a, mu_b = filt(a), filt(b)
        var_a = filt(a * a) - mu_a**2
        var_b = filt(b * b) - mu_b**2
        cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a**2 + mu_b**2 + C1) * (var_a + var_b + C2)
    return float(np.mean(num / den))


def psnr(reference, reconstruction, max_value: float = DEFAULT_MAX) -> float:
    if not max_value > 0:
        raise ValueError("max_value must be positive")
    a, b = _pair(reference, reconstruction)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        raise IdenticalInputsError("identical inputs: PSNR is infinite")
    return 10.0 * math.log10(max_value**2 / mse)


def _sqrtm_psd(m):
    w, V = np.linalg.eigh(m)
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def frechet_distance(features_a, features_b) -> float:
    """Frechet distance between Gaussian fits of two feature sets (rows are samples).

    The cross term uses ``Tr((S_a S_b)^(1/2)) = Tr((S_a^(1/2) S_b S_a^(1/2))^(1/2))``
    so only symmetric eigendecompositions are needed.
    """
    fa = np.asarray(features_a, dtype=np.float64)
    fb = np.asarray(features_b, dtype=np.float64)
    if fa.ndim == 1:
        fa = fa[:, None]
    if fb.ndim == 1:
        fb = fb[:, None]
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise ValueError(f"feature sets must be (n, k) with equal k, got {fa.shape} and {fb.shape}")
    k = fa.shape[1]
    if k > 256:
        raise ValueError(f"feature dimension {k} exceeds 256")
    if fa.shape[0] <= k or fb.shape[0] <= k:
        raise ValueError(f"need more than k={k} samples per set, got {fa.shape[0]} and {fb.shape[0]}")

    mu_a, mu_b = fa.mean(0), fb.mean(0)
    S_a = np.atleast_2d(np.cov(fa, rowvar=False))
    S_b = np.atleast_2d(np.cov(fb, rowvar=False))
    root_a = _sqrtm_psd(S_a)
    inner = root_a @ S_b @ root_a
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    if w.min() < -1e-6:
        warnings.warn(f"clamping negative eigenvalue {w.min():.3e} in Frechet cross term")
    tr_cross = np.sum(np.sqrt(np.clip(w, 0.0, None)))
    diff = mu_a - mu_b
    d = float(diff @ diff + np.trace(S_a) + np.trace(S_b) - 2.0 * tr_cross)
    return max(d, 0.0)


def pooled_features(volumes, grid: int = 8):
    """Default feature extractor: average-pool each 3-phase volume to ``grid x grid``.

    The three phases stay together as channels, giving ``k = 3 * grid**2``.
    """
    v = np.asarray(volumes, dtype=np.float64)
    if v.ndim == 3:
        v = v[None]
    n, L, W, C = v.shape
    if L % grid or W % grid:
        raise ValueError(f"{L}x{W} volumes do not pool evenly to {grid}x{grid}")
    pooled = v.reshape(n, grid, L // grid, grid, W // grid, C).mean(axis=(2, 4))
    return pooled.reshape(n, -1)


def sliced_wasserstein(a, b, n_projections: int = 64, rng=None) -> float:
    """Mean 1-Wasserstein distance over 1-D projections.

    In 2-D the projections are evenly spaced angles; otherwise random unit
    directions from ``rng`` (seeded 0 by default).
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] == 2:
        ang = np.pi * np.arange(n_projections) / n_projections
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    else:
        rng = np.random.default_rng(0) if rng is None else rng
        dirs = rng.standard_normal((n_projections, a.shape[1]))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return float(np.mean([wasserstein_distance(a @ d, b @ d) for d in dirs]))


@dataclass
class EvalReport:
    """Per-volume, per-phase metrics plus the cross-set Frechet distance."""

    rows: list[dict] = field(default_factory=list)
    frechet: float | None = None
    fid_grid: int | None = None
    fingerprint: str = ""

    @property
    def n_volumes(self) -> int:
        return len({r["volume"] for r in self.rows})

    def phase_means(self) -> dict:
        out = {}
        for ph in PHASES:
            rs = [r for r in self.rows if r["phase"] == ph]
            out[ph] = {m: float(np.mean([r[m] for r in rs])) for m in ("mae_hu", "mae", "ssim_pct", "psnr_db")}
        return out

    def mean_mae_hu(self) -> float:
        return float(np.mean([r["mae_hu"] for r in self.rows]))

    def summary(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "n_volumes": self.n_volumes,
            "phases": self.phase_means(),
            "mean_mae_hu": self.mean_mae_hu(),
            "frechet": self.frechet,
            "fid_grid": self.fid_grid,
        }

    def write_csv(self, path) -> None:
        cols = ["volume", "phase", "mae_hu", "mae", "ssim_pct", "psnr_db"]
        with open(path, "w") as fh:
            fh.write(",".join(cols + ["fingerprint"]) + "\n")
            for r in self.rows:
                fh.write(",".join([_fmt(r[c]) for c in cols] + [self.fingerprint]) + "\n")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def evaluate(reference, reconstruction, fid_grid: int = 8, ssim_window: float | None = None,
             max_value: float = DEFAULT_MAX, fingerprint: str = "") -> EvalReport:
    """Score a batch of reconstructions ``(n, L, W, 3)`` against references.

    The Frechet feature grid shrinks (halving) until the feature dimension is
    below the number of volumes; with too few volumes it is left undefined.
    """
    ref = np.asarray(reference, dtype=np.float64)
    rec = np.asarray(reconstruction, dtype=np.float64)
    if ref.shape != rec.shape or ref.ndim != 4 or ref.shape[-1] != 3:
        raise ValueError(f"expected matching (n, L, W, 3) stacks, got {ref.shape} and {rec.shape}")
    report = EvalReport(fingerprint=fingerprint)
    for i in range(ref.shape[0]):
        for k, ph in enumerate(PHASES):
            a, b = ref[i, ..., k], rec[i, ..., k]
            try:
                p = psnr(a, b, max_value)
            except IdenticalInputsError:
                p = float("inf")
            report.rows.append({
                "volume": i,
                "phase": ph,
                "mae_hu": mae(a, b) * HU_SCALE,
                "mae": mae(a, b),
                "ssim_pct": 100.0 * ssim(a, b, max_value=max_value, window=ssim_window),
                "psnr_db": p,
            })

    n, L, W, _ = ref.shape
    grid = fid_grid
    while grid >= 1 and (3 * grid * grid >= n or L % grid or W % grid):
        grid //= 2
    if grid >= 1:
        report.frechet = frechet_distance(pooled_features(ref, grid), pooled_features(rec, grid))
        report.fid_grid = grid
        if grid != fid_grid:
            log.info("Frechet features reduced to %dx%d grid for %d volumes", grid, grid, n)
    else:
        log.warning("too few volumes (%d) for a Frechet distance", n)
    return report
