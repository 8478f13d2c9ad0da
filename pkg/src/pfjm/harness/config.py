"""Experiment configuration: one TOML file, strict keys, ``--set`` overrides."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import re
import sys
from dataclasses import dataclass, field

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..augment import AugmentationParams
from ..data import HU_SCALE, PhantomSpec
from ..model import TrainConfig
from ..sampler import W_SWEEP, build_schedule

# augmented dimensions covered by the default D sweep
DEFAULT_D_VALUES = (2, 8, 32, 64, 128, 256, 512, 2048)


class ConfigError(ValueError):
    """Malformed config: unknown key, wrong type or invalid value."""


@dataclass
class DataSection:
    L: int = 64
    W: int = 64
    n_train: int = 64
    n_test: int = 16
    dose_fraction: float = 0.1
    base_sigma: float = 10 / HU_SCALE
    ellipses: list = field(default_factory=lambda: [3, 6])
    vessels: list = field(default_factory=lambda: [2, 5])
    amplitudes: list = field(default_factory=lambda: [0.0, 300 / HU_SCALE, 150 / HU_SCALE])
    tissue_noise: float = 10 / HU_SCALE


@dataclass
class ModelSection:
    kind: str = "conv"
    widths: list = field(default_factory=lambda: [16, 32, 64])
    conditional: bool = True
    noise_features: int = 8
    emb_dim: int = 64
    D: int = 128
    sigma_data: float = 0.5
    p_mean: float = -1.2
    p_std: float = 1.2


@dataclass
class TrainingSection:
    batch_size: int = 16
    iterations: int = 2000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 0


@dataclass
class SamplerSection:
    T: int = 10
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    w: float = 0.1
    init_mode: str = "condition"
    w_values: list = field(default_factory=lambda: list(W_SWEEP))


@dataclass
class EvalSection:
    fid_grid: int = 8
    # 0 selects the single-window (global) SSIM
    ssim_window: float = 0.0
    max_value: float = 2.0
    png: bool = True


@dataclass
class SweepSection:
    d_values: list = field(default_factory=lambda: list(DEFAULT_D_VALUES))


@dataclass
class OracleSection:
    n_charges: int = 200
    n_traj: int = 4
    steps: int = 100
    D: int = 128
    # 0 selects sigma_max * sqrt(D)
    r_max: float = 0.0
    separation: float = 1.0
    spread: float = 0.25
    # trajectories written as CSV (all are used for the Wasserstein check)
    dump: int = 16


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    oracle: OracleSection = field(default_factory=OracleSection)

    # -- derived objects -------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def data_fingerprint(self) -> str:
        blob = json.dumps({"seed": self.seed, "data": dataclasses.asdict(self.data)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def seeds(self) -> dict:
        data_seed, train_seed, sample_seed = (
            int(s) for s in np.random.SeedSequence(self.seed).generate_state(3, dtype="uint32")
        )
        return {"data": data_seed, "train": train_seed, "sample": sample_seed}

    def phantom_spec(self) -> PhantomSpec:
        d = self.data
        return PhantomSpec(L=d.L, W=d.W, ellipses=tuple(d.ellipses), vessels=tuple(d.vessels),
                           amplitudes=tuple(d.amplitudes), tissue_noise=d.tissue_noise)

    def arch(self) -> dict:
        m = self.model
        shape = [self.data.L, self.data.W, 3] if m.kind == "conv" else [self.data.L * self.data.W * 3]
        return {"kind": m.kind, "data_shape": shape, "conditional": m.conditional, "widths": list(m.widths),
                "noise_features": m.noise_features, "emb_dim": m.emb_dim}

    def aug_params(self) -> AugmentationParams:
        m = self.model
        return AugmentationParams(N=self.data.L * self.data.W * 3, D=m.D, sigma_data=m.sigma_data,
                                  p_mean=m.p_mean, p_std=m.p_std)

    def train_config(self) -> TrainConfig:
        t = self.training
        return TrainConfig(batch_size=t.batch_size, iterations=t.iterations, lr=t.lr, beta1=t.beta1,
                           beta2=t.beta2, eps=t.eps, seed=self.seeds()["train"],
                           checkpoint_every=t.checkpoint_every, aug=self.aug_params())

    def schedule(self, w: float | None = None):
        s = self.sampler
        return build_schedule(s.T, s.sigma_min, s.sigma_max, s.rho, s.w if w is None else w, s.init_mode)

    def validate(self) -> "ExperimentConfig":
        try:
            self.phantom_spec()
            self.aug_params()
            self.train_config()
            self.schedule()
            for w in self.sampler.w_values:
                self.schedule(w)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.model.kind not in ("conv", "mlp"):
            raise ConfigError(f"model.kind must be 'conv' or 'mlp', got {self.model.kind!r}")
        if not 0 < self.data.dose_fraction <= 1:
            raise ConfigError("data.dose_fraction must be in (0, 1]")
        if self.data.n_train < 1 or self.data.n_test < 1:
            raise ConfigError("data.n_train and data.n_test must be >= 1")
        if any(int(d) < 1 for d in self.sweep.d_values):
            raise ConfigError("sweep.d_values must be positive integers")
        return self


_SECTIONS = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _key_line(text: str | None, key: str) -> str:
    if not text:
        return ""
    leaf = key.split(".")[-1]
    pat = re.compile(rf"^\s*\[?\s*{re.escape(leaf)}\s*[=\]]")
    for i, line in enumerate(text.splitlines(), 1):
        if pat.match(line):
            return f" (line {i})"
    return ""


def _coerce(value, default, key: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)
    return value


def from_dict(tree: dict, text: str | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for key, value in tree.items():
        if key == "seed":
            cfg.seed = _coerce(value, 0, "seed")
            if cfg.seed < 0:
                raise ConfigError("seed must be nonnegative")
            continue
        if key not in _SECTIONS:
            raise ConfigError(f"unknown key '{key}'{_key_line(text, key)}")
        if not isinstance(value, dict):
            raise ConfigError(f"'{key}' must be a table")
        section = getattr(cfg, key)
        defaults = {f.name: getattr(section, f.name) for f in dataclasses.fields(section)}
        for sub, v in value.items():
            path = f"{key}.{sub}"
            if sub not in defaults:
                raise ConfigError(f"unknown key '{path}'{_key_line(text, path)}")
            setattr(section, sub, _coerce(v, defaults[sub], path))
    return cfg.validate()


def _parse_value(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_overrides(tree: dict, overrides) -> dict:
    tree = copy.deepcopy(tree)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = tree
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-table")
        node[parts[-1]] = _parse_value(raw.strip())
    return tree


def load_config(path=None, overrides=(), seed: int | None = None) -> ExperimentConfig:
    text = None
    tree: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        text = raw.decode("utf-8", errors="replace")
        try:
            tree = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    tree = apply_overrides(tree, overrides)
    if seed is not None:
        tree["seed"] = int(seed)
    return from_dict(tree, text)
