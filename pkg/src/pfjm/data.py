"""Synthetic multiphase phantoms, low-dose degradation and the tensor archive.

A joint volume is a float32 array of shape ``(L, W, 3)``; channel ``k`` holds
phase ``k + 1`` (non-contrast, arterial, venous). Intensities live in
``[-1, 1]``, an affine image of the pseudo-HU window ``[-1024, 1024]``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

__all__ = [
    "HU_SCALE",
    "PHASES",
    "PhantomSpec",
    "generate_phantom",
    "make_dataset",
    "simulate_low_dose",
    "build_joint_condition",
    "split_phases",
    "to_hu",
    "from_hu",
    "ArchiveError",
    "BadMagicError",
    "TruncatedArchiveError",
    "LengthMismatchError",
    "write_archive",
    "read_archive",
]

HU_SCALE = 1024.0
PHASES = ("I", "II", "III")

MAGIC = b"PFJMTNSR"
ARCHIVE_VERSION = 1


def to_hu(x):
    return np.asarray(x, dtype=np.float64) * HU_SCALE


def from_hu(hu):
    return np.asarray(hu, dtype=np.float64) / HU_SCALE


@dataclass
class PhantomSpec:
    L: int = 64
    W: int = 64
    ellipses: tuple[int, int] = (3, 6)
    vessels: tuple[int, int] = (2, 5)
    # contrast enhancement added to vessel pixels per phase, normalized units
    amplitudes: tuple[float, float, float] = (0.0, 300 / HU_SCALE, 150 / HU_SCALE)
    tissue_noise: float = 10 / HU_SCALE
    seed: int = 0

    def __post_init__(self):
        if self.L < 8 or self.W < 8:
            raise ValueError(f"phantom must be at least 8x8, got {self.L}x{self.W}")
        for name in ("ellipses", "vessels"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} range must satisfy 0 <= lo <= hi, got {(lo, hi)}")
        if len(self.amplitudes) != 3:
            raise ValueError("need one contrast amplitude per phase")
        if self.tissue_noise < 0:
            raise ValueError("tissue_noise must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


def _ellipse_mask(yy, xx, cy, cx, ay, ax, theta):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def generate_phantom(spec: PhantomSpec, return_vessel_mask: bool = False):
    """Routine-dose joint volume with shared anatomy across the three phases.

    Only the vessel pixels differ between phases, by ``spec.amplitudes``.
    """
    rng = np.random.default_rng(spec.seed)
    L, W = spec.L, spec.W
    yy, xx = np.mgrid[0:L, 0:W].astype(np.float64)
    cy, cx = (L - 1) / 2.0, (W - 1) / 2.0

    base = np.full((L, W), -1000.0 / HU_SCALE)
    body = _ellipse_mask(yy, xx, cy, cx,
                         0.42 * L * rng.uniform(0.9, 1.05), 0.46 * W * rng.uniform(0.9, 1.05),
                         rng.uniform(-0.2, 0.2))
    base[body] = 40.0 / HU_SCALE

    for _ in range(rng.integers(spec.ellipses[0], spec.ellipses[1] + 1)):
        ay = rng.uniform(0.06, 0.18) * L
        ax = rng.uniform(0.06, 0.18) * W
        ey = cy + rng.uniform(-0.22, 0.22) * L
        ex = cx + rng.uniform(-0.25, 0.25) * W
        organ = _ellipse_mask(yy, xx, ey, ex, ay, ax, rng.uniform(0, np.pi)) & body
        base[organ] = rng.uniform(-120.0, 90.0) / HU_SCALE

    if spec.tissue_noise > 0:
        texture = gaussian_filter(rng.standard_normal((L, W)), sigma=1.5)
        texture *= spec.tissue_noise / max(texture.std(), 1e-12)
        base = base + np.where(body, texture, 0.0)

    vessel = np.zeros((L, W), dtype=bool)
    for _ in range(rng.integers(spec.vessels[0], spec.vessels[1] + 1)):
        ay = rng.uniform(0.015, 0.05) * L + 0.5
        ax = rng.uniform(0.015, 0.05) * W + 0.5
        vy = cy + rng.uniform(-0.3, 0.3) * L
        vx = cx + rng.uniform(-0.33, 0.33) * W
        vessel |= _ellipse_mask(yy, xx, vy, vx, ay, ax, rng.uniform(0, np.pi)) & body

    vol = np.repeat(base[:, :, None], 3, axis=2)
    for k, amp in enumerate(spec.amplitudes):
        vol[:, :, k] += np.where(vessel, amp, 0.0)
    vol = np.clip(vol, -1.0, 1.0).astype(np.float32)
    if return_vessel_mask:
        return vol, vessel
    return vol


def simulate_low_dose(y, dose_fraction: float, base_sigma: float, rng: np.random.Generator):
    """Additive Gaussian noise whose standard deviation scales as ``1/sqrt(dose)``."""
    if not 0 < dose_fraction <= 1:
        raise ValueError(f"dose_fraction must be in (0, 1], got {dose_fraction}")
    if not base_sigma > 0:
        raise ValueError(f"base_sigma must be > 0, got {base_sigma}")
    y = np.asarray(y)
    std = base_sigma / np.sqrt(dose_fraction)
    noisy = y.astype(np.float64) + std * rng.standard_normal(y.shape)
    return noisy.astype(y.dtype if y.dtype.kind == "f" else np.float32)


def build_joint_condition(c1, c2, c3):
    c1, c2, c3 = (np.asarray(c) for c in (c1, c2, c3))
    if not c1.shape == c2.shape == c3.shape:
        raise ValueError(f"phase shapes differ: {c1.shape}, {c2.shape}, {c3.shape}")
    return np.stack([c1, c2, c3], axis=-1)


def split_phases(volume):
    volume = np.asarray(volume)
    if volume.shape[-1] != 3:
        raise ValueError(f"expected 3 phases in the last axis, got shape {volume.shape}")
    return volume[..., 0], volume[..., 1], volume[..., 2]


def make_dataset(spec: PhantomSpec, n: int, dose_fraction: float, base_sigma: float, seed: int):
    """``n`` paired (routine, lowdose) volumes, each of shape ``(L, W, 3)``.

    Phantom ``i`` uses an independent child seed of ``seed``; ``spec.seed`` is ignored.
    """
    if n < 1:
        raise ValueError("dataset must contain at least one volume")
    ss = np.random.SeedSequence(seed)
    anat_seeds, noise_seed = ss.spawn(2)
    rng = np.random.default_rng(noise_seed)
    phantom_seeds = anat_seeds.generate_state(n, dtype=np.uint64)
    routine = np.empty((n, spec.L, spec.W, 3), dtype=np.float32)
    for i in range(n):
        routine[i] = generate_phantom(PhantomSpec(**{**spec.to_dict(), "seed": int(phantom_seeds[i])}))
    lowdose = simulate_low_dose(routine, dose_fraction, base_sigma, rng)
    return routine, lowdose


# ---------------------------------------------------------------------------
# tensor archive


class ArchiveError(ValueError):
    pass


class BadMagicError(ArchiveError):
    pass


class TruncatedArchiveError(ArchiveError):
    pass


class LengthMismatchError(ArchiveError):
    pass


def write_archive(path, tensors: dict, metadata: dict | None = None) -> None:
    """Write named float32 tensors.

    Layout: 8-byte magic ``PFJMTNSR``, little-endian u32 header length, UTF-8
    JSON header ``{version, entries: [{name, dtype, shape}], metadata}``, then
    each tensor's little-endian f32 payload in row-major order, in entry order.
    """
    entries = []
    payloads = []
    for name, value in tensors.items():
        arr = np.asarray(value)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name!r} has non-finite entries")
        arr = np.asarray(arr, dtype="<f4", order="C")
        entries.append({"name": str(name), "dtype": "f32", "shape": list(arr.shape)})
        payloads.append(arr.tobytes(order="C"))
    header = json.dumps(
        {"version": ARCHIVE_VERSION, "entries": entries, "metadata": metadata or {}},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    tmp = f"{os.fspath(path)}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for p in payloads:
            fh.write(p)
    os.replace(tmp, path)


def read_archive(path):
    """Return ``(tensors, metadata)``; tensors keep their written order."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: bad magic, not a PFJM tensor archive")
    pos = len(MAGIC)
    if len(blob) < pos + 4:
        raise TruncatedArchiveError(f"{path}: truncated before header length")
    (hlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if len(blob) < pos + hlen:
        raise TruncatedArchiveError(f"{path}: header claims {hlen} bytes, only {len(blob) - pos} present")
    try:
        header = json.loads(blob[pos : pos + hlen].decode("utf-8"))
        entries = header["entries"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ArchiveError(f"{path}: malformed header ({exc})") from None
    pos += hlen

    expected = 0
    for e in entries:
        if e.get("dtype") != "f32":
            raise ArchiveError(f"{path}: unsupported dtype {e.get('dtype')!r} for {e.get('name')!r}")
        expected += 4 * int(np.prod(e["shape"], dtype=np.int64))
    available = len(blob) - pos
    if available < expected:
        raise TruncatedArchiveError(f"{path}: truncated payload, header needs {expected} bytes, found {available}")
    if available > expected:
        raise LengthMismatchError(
            f"{path}: header/payload length disagreement, header needs {expected} bytes, found {available}"
        )

    tensors = {}
    for e in entries:
        shape = tuple(int(s) for s in e["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape)
        tensors[e["name"]] = arr.astype(np.float32)
        pos += nbytes
    return tensors, header.get("metadata", {})
