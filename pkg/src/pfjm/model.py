"""Conditional denoiser, its training objective and the training loop.

The denoiser predicts the clean joint volume from a perturbed one::

    f(x, sigma, c) = c_skip(sigma) x + c_out(sigma) F(c_in(sigma) x (+) c, c_noise(sigma))

where ``(+)`` concatenates the joint condition along the channel axis and
``F`` is either an MLP (vector data) or a small convolutional
encoder-decoder with skip connections (image data). Parameters are updated
by :func:`adam_step`, a plain bias-corrected Adam.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .augment import (
    AugmentationParams,
    NoiseDraw,
    perturb,
    sample_radius,
    sample_sigma,
    sample_unit_direction,
)
from .data import read_archive, write_archive

log = logging.getLogger(__name__)

__all__ = [
    "TrainingError",
    "c_skip",
    "c_out",
    "c_in",
    "c_noise",
    "loss_weight",
    "MLPNet",
    "ConvNet",
    "Denoiser",
    "build_model",
    "batch_losses",
    "joint_loss",
    "field_matching_loss",
    "AdamState",
    "adam_step",
    "TrainConfig",
    "Checkpoint",
    "train",
]


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# preconditioning


def c_skip(sigma, sigma_data):
    return sigma_data**2 / (sigma**2 + sigma_data**2)


def c_out(sigma, sigma_data):
    return sigma * sigma_data / (sigma**2 + sigma_data**2) ** 0.5


def c_in(sigma, sigma_data):
    return 1.0 / (sigma**2 + sigma_data**2) ** 0.5


def c_noise(sigma):
    return 0.25 * (torch.log(sigma) if torch.is_tensor(sigma) else np.log(sigma))


def loss_weight(sigma, sigma_data):
    """lambda(sigma) = (sigma^2 + sigma_d^2) / (sigma sigma_d)^2."""
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


# ---------------------------------------------------------------------------
# networks


class NoiseEmbedding(nn.Module):
    """Raw ``c_noise`` plus fixed sinusoidal features of it."""

    def __init__(self, n_features: int = 8):
        super().__init__()
        self.n_features = n_features
        half = n_features // 2
        self.register_buffer("freqs", 2.0 ** torch.arange(half, dtype=torch.float32), persistent=False)

    @property
    def dim(self) -> int:
        return 1 + 2 * (self.n_features // 2)

    def forward(self, cn):
        cn = cn[:, None]
        if self.n_features < 2:
            return cn
        ang = cn * self.freqs.to(cn.dtype)
        return torch.cat([cn, torch.sin(ang), torch.cos(ang)], dim=1)


class MLPNet(nn.Module):
    def __init__(self, data_dim: int, cond_dim: int = 0, widths=(64, 64), noise_features: int = 8):
        super().__init__()
        self.data_dim = data_dim
        self.cond_dim = cond_dim
        self.embed = NoiseEmbedding(noise_features)
        layers = []
        prev = data_dim + cond_dim + self.embed.dim
        for w in widths:
            layers += [nn.Linear(prev, w), nn.SiLU()]
            prev = w
        layers.append(nn.Linear(prev, data_dim))
        self.net = nn.Sequential(*layers)

    def forward(self, x, cond, cn):
        parts = [x]
        if self.cond_dim:
            parts.append(cond)
        parts.append(self.embed(cn))
        return self.net(torch.cat(parts, dim=1))


class _ResBlock(nn.Module):
    def __init__(self, ch_in, ch_out, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, ch_in), ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, ch_out)
        self.norm2 = nn.GroupNorm(min(8, ch_out), ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, h, emb):
        out = self.conv1(self.act(self.norm1(h)))
        out = out + self.emb(emb)[:, :, None, None]
        out = self.conv2(self.act(self.norm2(out)))
        return self.skip(h) + out


class ConvNet(nn.Module):
    """Encoder-decoder with one residual block per level and skip connections.

    Operates on channels-last volumes ``(B, L, W, C)``; ``L`` and ``W`` must be
    divisible by ``2 ** (len(widths) - 1)``.
    """

    def __init__(self, channels: int = 3, cond_channels: int = 3, widths=(32, 64), emb_dim: int = 64,
                 noise_features: int = 8):
        super().__init__()
        self.channels = channels
        self.cond_channels = cond_channels
        self.embed = NoiseEmbedding(noise_features)
        self.emb_mlp = nn.Sequential(nn.Linear(self.embed.dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.conv_in = nn.Conv2d(channels + cond_channels, widths[0], 3, padding=1)
        self.down = nn.ModuleList()
        prev = widths[0]
        for w in widths:
            self.down.append(_ResBlock(prev, w, emb_dim))
            prev = w
        self.mid = _ResBlock(prev, prev, emb_dim)
        self.up = nn.ModuleList()
        for w in reversed(widths):
            self.up.append(_ResBlock(prev + w, w, emb_dim))
            prev = w
        self.norm_out = nn.GroupNorm(min(8, prev), prev)
        self.conv_out = nn.Conv2d(prev, channels, 3, padding=1)
        self.pool = nn.AvgPool2d(2)

    def forward(self, x, cond, cn):
        h = x.permute(0, 3, 1, 2)
        if self.cond_channels:
            h = torch.cat([h, cond.permute(0, 3, 1, 2)], dim=1)
        emb = self.emb_mlp(self.embed(cn))
        h = self.conv_in(h)
        skips = []
        for i, block in enumerate(self.down):
            if i > 0:
                h = self.pool(h)
            h = block(h, emb)
            skips.append(h)
        h = self.mid(h, emb)
        for i, block in enumerate(self.up):
            s = skips.pop()
            if h.shape[-2:] != s.shape[-2:]:
                h = nn.functional.interpolate(h, size=s.shape[-2:], mode="nearest")
            h = block(torch.cat([h, s], dim=1), emb)
        out = self.conv_out(nn.functional.silu(self.norm_out(h)))
        return out.permute(0, 2, 3, 1)


class Denoiser(nn.Module):
    """Preconditioned wrapper: maps ``(x_hat, sigma, c)`` to a clean estimate."""

    def __init__(self, net: nn.Module, sigma_data: float, arch: dict):
        super().__init__()
        self.net = net
        self.sigma_data = float(sigma_data)
        self.arch = dict(arch)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    @property
    def data_shape(self) -> tuple:
        return tuple(self.arch["data_shape"])

    def forward(self, x_hat, sigma, c=None):
        if c is not None and c.shape != x_hat.shape:
            raise ValueError(f"condition shape {tuple(c.shape)} != input shape {tuple(x_hat.shape)}")
        if tuple(x_hat.shape[1:]) != self.data_shape:
            raise ValueError(f"input shape {tuple(x_hat.shape)} does not match model data shape {self.data_shape}")
        for name, p in self.net.named_parameters():
            if not bool(torch.isfinite(p).all()):
                raise ValueError(f"parameter {name} has non-finite entries")
        B = x_hat.shape[0]
        sigma = torch.as_tensor(sigma, dtype=x_hat.dtype).reshape(-1).expand(B)
        bshape = (B,) + (1,) * (x_hat.ndim - 1)
        sd = self.sigma_data
        s = sigma.reshape(bshape)
        F = self.net(c_in(s, sd) * x_hat, c, c_noise(sigma))
        return c_skip(s, sd) * x_hat + c_out(s, sd) * F


def build_model(arch: dict, sigma_data: float = 0.5, seed: int = 0, dtype=torch.float32) -> Denoiser:
    """Instantiate a denoiser from an architecture descriptor.

    ``{"kind": "mlp", "data_shape": [N], "conditional": bool, "widths": [...]}`` or
    ``{"kind": "conv", "data_shape": [L, W, 3], "conditional": bool, "widths": [...]}``.
    """
    arch = dict(arch)
    kind = arch.get("kind")
    shape = tuple(arch["data_shape"])
    cond = bool(arch.get("conditional", True))
    nf = int(arch.get("noise_features", 8))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if kind == "mlp":
            if len(shape) != 1:
                raise ValueError("mlp expects a flat data_shape [N]")
            net = MLPNet(shape[0], shape[0] if cond else 0, tuple(arch.get("widths", (64, 64))), nf)
        elif kind == "conv":
            if len(shape) != 3:
                raise ValueError("conv expects data_shape [L, W, C]")
            widths = tuple(arch.get("widths", (32, 64)))
            div = 2 ** (len(widths) - 1)
            if shape[0] % div or shape[1] % div:
                raise ValueError(f"{shape[0]}x{shape[1]} not divisible by {div}")
            net = ConvNet(shape[2], shape[2] if cond else 0, widths, int(arch.get("emb_dim", 64)), nf)
        else:
            raise ValueError(f"unknown architecture kind {kind!r}")
    return Denoiser(net, sigma_data, arch).to(dtype)


# ---------------------------------------------------------------------------
# objectives


def batch_losses(model: Denoiser, y, x_hat, sigma, c=None):
    """Per-example ``lambda(sigma) * ||f(x_hat, sigma, c) - y||^2``."""
    pred = model(x_hat, sigma, c)
    sq = ((pred - y) ** 2).reshape(y.shape[0], -1).sum(dim=1)
    return loss_weight(sigma, model.sigma_data) * sq


def joint_loss(model: Denoiser, y, noise: NoiseDraw, c=None):
    """Weighted denoising loss of a single joint volume under one perturbation."""
    dtype = model.dtype
    y_np = np.asarray(y, dtype=np.float64)
    x_hat = perturb(y_np, noise.R, noise.v)
    yt = torch.as_tensor(y_np, dtype=dtype)[None]
    xt = torch.as_tensor(x_hat, dtype=dtype)[None]
    ct = None if c is None else torch.as_tensor(np.asarray(c), dtype=dtype)[None]
    sigma = torch.tensor([noise.sigma], dtype=dtype)
    return batch_losses(model, yt, xt, sigma, ct)[0]


def field_matching_loss(model_raw_output, x, y, r: float, D: int) -> float:
    """Squared error against the perturbation direction target ``(x - y) / (r / sqrt(D))``."""
    if not r > 0:
        raise ValueError("r must be positive")
    target = (np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)) / (r / math.sqrt(D))
    resid = np.asarray(model_raw_output, dtype=np.float64) - target
    return float(np.sum(resid**2))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    t: int
    m: list
    v: list

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(0, [torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


def adam_step(state: AdamState, params, grads, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """One bias-corrected Adam update. Returns ``(new_state, new_params)``; inputs are not modified."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("params, grads and moments must have equal length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"parameter {i}: shape {tuple(p.shape)} but gradient {tuple(g.shape)}")
        if not bool(torch.isfinite(g).all()):
            raise TrainingError(f"non-finite gradient in parameter {i} at Adam step {state.t + 1}")
    t = state.t + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        step = (m / bc1) / (torch.sqrt(v / bc2) + eps)
        new_m.append(m)
        new_v.append(v)
        new_p.append(p - lr * step)
    return AdamState(t, new_m, new_v), new_p


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    batch_size: int = 32
    iterations: int = 500
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    aug: AugmentationParams = field(default_factory=lambda: AugmentationParams(N=1, D=128))

    def __post_init__(self):
        if isinstance(self.aug, dict):
            self.aug = AugmentationParams(**self.aug)
        for name in ("batch_size", "iterations", "lr", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def fingerprint(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    model: Denoiser
    adam: AdamState
    iteration: int
    fingerprint: str
    loss_history: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def save(self, path, extra_metadata: dict | None = None) -> None:
        tensors = {}
        for name, p in self.model.state_dict().items():
            tensors[f"param/{name}"] = p.detach().cpu().numpy()
        for i, (m, v) in enumerate(zip(self.adam.m, self.adam.v)):
            tensors[f"adam_m/{i}"] = m.detach().cpu().numpy()
            tensors[f"adam_v/{i}"] = v.detach().cpu().numpy()
        meta = {
            "kind": "checkpoint",
            "arch": self.model.arch,
            "sigma_data": self.model.sigma_data,
            "iteration": self.iteration,
            "adam_t": self.adam.t,
            "fingerprint": self.fingerprint,
            "loss_history": [float(x) for x in self.loss_history],
            "config": self.config,
        }
        meta.update(extra_metadata or {})
        write_archive(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        tensors, meta = read_archive(path)
        if meta.get("kind") != "checkpoint":
            raise ValueError(f"{path} is not a checkpoint archive")
        model = build_model(meta["arch"], meta["sigma_data"])
        state = {k[len("param/"):]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith("param/")}
        model.load_state_dict(state)
        n = len(list(model.parameters()))
        m = [torch.from_numpy(tensors[f"adam_m/{i}"].copy()) for i in range(n) if f"adam_m/{i}" in tensors]
        v = [torch.from_numpy(tensors[f"adam_v/{i}"].copy()) for i in range(n) if f"adam_v/{i}" in tensors]
        return cls(model, AdamState(int(meta["adam_t"]), m, v), int(meta["iteration"]), meta["fingerprint"],
                   list(meta.get("loss_history", [])), dict(meta.get("config", {})))


def train(routine, lowdose, config: TrainConfig, arch: dict, model: Denoiser | None = None,
          checkpoint_path=None, progress=None) -> Checkpoint:
    """Fit the denoiser to paired (routine, lowdose) volumes.

    Each iteration samples a batch of pairs and, per example, a noise level,
    augmented radius, radial magnitude and direction; the low-dose volume is
    the joint condition. ``lowdose=None`` trains an unconditional model.
    With ``checkpoint_every > 0`` and a ``checkpoint_path`` pattern containing
    ``{iteration}``, intermediate checkpoints are written.
    """
    routine = np.asarray(routine, dtype=np.float32)
    if routine.ndim < 2 or routine.shape[0] == 0:
        raise ValueError("training set is empty")
    if lowdose is not None:
        lowdose = np.asarray(lowdose, dtype=np.float32)
        if lowdose.shape != routine.shape:
            raise ValueError(f"routine {routine.shape} and low-dose {lowdose.shape} sets are not aligned")
    n = routine.shape[0]
    data_shape = routine.shape[1:]
    N = int(np.prod(data_shape))
    aug = config.aug
    if aug.N != N:
        raise ValueError(f"augmentation N={aug.N} but volumes have {N} entries")
    if model is None:
        model = build_model(arch, aug.sigma_data, seed=config.seed)
    dtype = model.dtype
    fp = fingerprint(config.to_dict(), model.arch)

    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    params = [p.detach().clone() for p in model.parameters()]
    state = AdamState.zeros_like(params)
    history = []
    B = config.batch_size
    for it in range(1, config.iterations + 1):
        idx = rng.integers(0, n, size=B)
        y = routine[idx]
        sigma = sample_sigma(rng, aug, B)
        r = sigma * math.sqrt(aug.D)
        R = sample_radius(rng, r, N, aug.D, size=B)
        v = sample_unit_direction(rng, N, B)
        x_hat = perturb(y.astype(np.float64), R, v)
        yt = torch.from_numpy(y).to(dtype)
        xt = torch.from_numpy(x_hat).to(dtype)
        st = torch.from_numpy(sigma).to(dtype)
        ct = None if lowdose is None else torch.from_numpy(lowdose[idx]).to(dtype)

        with torch.no_grad():
            for p, q in zip(model.parameters(), params):
                p.copy_(q)
        model.zero_grad(set_to_none=True)
        loss = batch_losses(model, yt, xt, st, ct).mean()
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at iteration {it}")
        loss.backward()
        grads = [p.grad.detach() if p.grad is not None else torch.zeros_like(p) for p in model.parameters()]
        state, params = adam_step(state, params, grads, config.lr, config.beta1, config.beta2, config.eps)
        history.append(value)
        if progress is not None:
            progress(it, value)

        if config.checkpoint_every and checkpoint_path and it % config.checkpoint_every == 0 and it < config.iterations:
            _sync(model, params)
            Checkpoint(model, state, it, fp, list(history), config.to_dict()).save(
                str(checkpoint_path).format(iteration=it))

    _sync(model, params)
    return Checkpoint(model, state, config.iterations, fp, history, config.to_dict())


def _sync(model, params):
    with torch.no_grad():
        for p, q in zip(model.parameters(), params):
            p.copy_(q)
