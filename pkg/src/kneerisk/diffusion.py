"""Conditional latent diffusion with v-prediction, EMA weights and a DDIM sampler.

The noise schedule is the variance-preserving cosine family
``alpha_t = cos(pi/2 * t/T)``, ``sigma_t = sin(pi/2 * t/T)`` on ``t = 1..T``.
The network sees the noised future latent concatenated with the current
latent and predicts the velocity ``v = alpha_t * eps - sigma_t * z12``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from kneerisk.config import DiffusionConfig
from kneerisk.training import TrainingDivergedError, cosine_optimizer, seed_everything

SPATIAL = "spatial_self"
CHANNEL = "channel"


# ------------------------------------------------------------- schedule


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alphas: np.ndarray  # alphas[t - 1] for t = 1..T
    sigmas: np.ndarray

    def alpha(self, t):
        return self.alphas[np.asarray(t) - 1]

    def sigma(self, t):
        return self.sigmas[np.asarray(t) - 1]


def make_schedule(T: int) -> NoiseSchedule:
    if int(T) != T or T < 2:
        raise ValueError(f"schedule needs T >= 2 steps, got {T}")
    t = np.arange(1, T + 1, dtype=np.float64)
    return NoiseSchedule(int(T), np.cos(0.5 * np.pi * t / T), np.sin(0.5 * np.pi * t / T))


def _check_t(schedule: NoiseSchedule, t) -> None:
    ta = np.asarray(t.cpu() if torch.is_tensor(t) else t)
    if ta.size and (ta.min() < 1 or ta.max() > schedule.T):
        raise ValueError(f"timestep outside 1..{schedule.T}")


def _coef(values: np.ndarray, t, ref):
    """Gather per-sample schedule values and broadcast against ``ref``."""
    t_np = np.asarray(t.cpu() if torch.is_tensor(t) else t)
    c = values[t_np - 1]
    if torch.is_tensor(ref):
        c = torch.as_tensor(c, dtype=ref.dtype, device=ref.device)
        return c.reshape(-1, *([1] * (ref.dim() - 1))) if c.dim() == 1 else c
    c = np.asarray(c, dtype=np.result_type(ref, np.float64))
    return c.reshape(-1, *([1] * (np.ndim(ref) - 1))) if c.ndim == 1 else c


def _same_shape(a, b, what: str) -> None:
    if tuple(np.shape(a)) != tuple(np.shape(b)):
        raise ValueError(f"{what}: shape mismatch {tuple(np.shape(a))} vs {tuple(np.shape(b))}")


def add_noise(z12, eps, t, schedule: NoiseSchedule):
    """``z_t = alpha_t * z12 + sigma_t * eps``; ``t`` is an int or a per-sample array."""
    _same_shape(z12, eps, "add_noise")
    _check_t(schedule, t)
    return _coef(schedule.alphas, t, z12) * z12 + _coef(schedule.sigmas, t, z12) * eps


def v_target(z12, eps, t, schedule: NoiseSchedule):
    _same_shape(z12, eps, "v_target")
    _check_t(schedule, t)
    return _coef(schedule.alphas, t, z12) * eps - _coef(schedule.sigmas, t, z12) * z12


def predict_from_v(z_t, v_hat, t, schedule: NoiseSchedule):
    """Invert the velocity parameterisation: returns ``(z12_hat, eps_hat)``."""
    _same_shape(z_t, v_hat, "predict_from_v")
    _check_t(schedule, t)
    a, s = _coef(schedule.alphas, t, z_t), _coef(schedule.sigmas, t, z_t)
    return a * z_t - s * v_hat, s * z_t + a * v_hat


# ---------------------------------------------------------------- U-Net


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class SpatialSelfAttention(nn.Module):
    def __init__(self, ch: int, heads: int):
        super().__init__()
        self.norm = nn.GroupNorm(8, ch)
        self.attn = nn.MultiheadAttention(ch, heads, batch_first=True)

    def forward(self, x):
        b, c, h, w = x.shape
        tokens = self.norm(x).reshape(b, c, h * w).transpose(1, 2)
        out, _ = self.attn(tokens, tokens, tokens, need_weights=False)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation gating over channels."""

    def __init__(self, ch: int, reduction: int = 4):
        super().__init__()
        self.fc = nn.Sequential(nn.Linear(ch, max(ch // reduction, 4)), nn.SiLU(),
                                nn.Linear(max(ch // reduction, 4), ch))

    def forward(self, x):
        gate = torch.sigmoid(self.fc(x.mean(dim=(2, 3))))
        return x * gate[:, :, None, None]


class UNetBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int, attention: str, heads: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(8, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        if attention == SPATIAL:
            self.attn = SpatialSelfAttention(out_ch, heads)
        elif attention == CHANNEL:
            self.attn = ChannelAttention(out_ch)
        else:
            raise ValueError(f"unknown attention kind {attention!r}")
        self.attention = attention

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.attn(self.skip(x) + h)


@dataclass
class UNetConfig:
    latent_channels: int = 4
    base_channels: int = 32
    heads: int = 4
    # enc1..enc4, bottleneck, dec1..dec4
    attention: list = field(default_factory=lambda: [SPATIAL] * 3 + [CHANNEL] * 3 + [SPATIAL] * 3)

    def __post_init__(self):
        if len(self.attention) != 9:
            raise ValueError("the U-Net has exactly 9 blocks")


class UNet(nn.Module):
    """Four encoder blocks, a bottleneck and four decoder blocks.

    Encoder block ``i`` feeds decoder block ``5 - i`` through a skip
    connection. Resolution halves after encoder blocks 1 and 2 and doubles
    before decoder blocks 3 and 4, so latent sides must be divisible by 4.
    """

    def __init__(self, cfg: UNetConfig | None = None):
        super().__init__()
        cfg = cfg or UNetConfig()
        self.cfg = cfg
        c, C, att, hd = cfg.base_channels, cfg.latent_channels, cfg.attention, cfg.heads
        temb = 4 * c
        self.time_mlp = nn.Sequential(nn.Linear(c, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.stem = nn.Conv2d(2 * C, c, 3, padding=1)
        self.enc = nn.ModuleList([
            UNetBlock(c, c, temb, att[0], hd),
            UNetBlock(c, 2 * c, temb, att[1], hd),
            UNetBlock(2 * c, 2 * c, temb, att[2], hd),
            UNetBlock(2 * c, 2 * c, temb, att[3], hd),
        ])
        self.down = nn.ModuleList([nn.Conv2d(c, c, 3, stride=2, padding=1),
                                   nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1)])
        self.mid = UNetBlock(2 * c, 2 * c, temb, att[4], hd)
        self.dec = nn.ModuleList([
            UNetBlock(4 * c, 2 * c, temb, att[5], hd),
            UNetBlock(4 * c, 2 * c, temb, att[6], hd),
            UNetBlock(4 * c, c, temb, att[7], hd),
            UNetBlock(2 * c, c, temb, att[8], hd),
        ])
        self.up = nn.ModuleList([nn.Conv2d(2 * c, 2 * c, 3, padding=1), nn.Conv2d(c, c, 3, padding=1)])
        self.out = nn.Sequential(nn.GroupNorm(8, c), nn.SiLU(), nn.Conv2d(c, C, 3, padding=1))
        self.register_buffer("latent_scale", torch.ones(()))

    def blocks(self) -> list:
        return [*self.enc, self.mid, *self.dec]

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, z0: torch.Tensor) -> torch.Tensor:
        if z_t.shape[-2:] != z0.shape[-2:]:
            raise ValueError(f"target latent {tuple(z_t.shape)} and condition {tuple(z0.shape)} differ spatially")
        if z_t.shape[-1] % 4 or z_t.shape[-2] % 4:
            raise ValueError("latent sides must be divisible by 4")
        t = torch.as_tensor(t).reshape(-1).expand(z_t.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.cfg.base_channels))
        h = self.stem(torch.cat([z_t, z0], dim=1))
        e1 = self.enc[0](h, temb)
        e2 = self.enc[1](self.down[0](e1), temb)
        e3 = self.enc[2](self.down[1](e2), temb)
        e4 = self.enc[3](e3, temb)
        m = self.mid(e4, temb)
        d1 = self.dec[0](torch.cat([m, e4], 1), temb)
        d2 = self.dec[1](torch.cat([d1, e3], 1), temb)
        u = self.up[0](F.interpolate(d2, scale_factor=2, mode="nearest"))
        d3 = self.dec[2](torch.cat([u, e2], 1), temb)
        u = self.up[1](F.interpolate(d3, scale_factor=2, mode="nearest"))
        d4 = self.dec[3](torch.cat([u, e1], 1), temb)
        return self.out(d4)


def unet_forward(z_t, t, z0_cond, model: UNet) -> torch.Tensor:
    """Velocity prediction for (batched or single) latents, without gradients."""
    single = torch.as_tensor(z_t).dim() == 3
    zt = torch.as_tensor(z_t, dtype=torch.float32)
    zc = torch.as_tensor(z0_cond, dtype=torch.float32)
    if single:
        zt, zc = zt[None], zc[None]
    with torch.no_grad():
        out = model(zt, torch.as_tensor(t).reshape(-1), zc)
    return out[0] if single else out


# ------------------------------------------------------------------ EMA


@dataclass
class EmaState:
    shadow: dict
    decay: float = 0.995
    count: int = 0

    @classmethod
    def from_model(cls, model: nn.Module, decay: float = 0.995) -> "EmaState":
        return cls({k: v.detach().clone() for k, v in model.state_dict().items()}, decay, 0)


def ema_update(ema: EmaState, current) -> EmaState:
    """``shadow <- decay * shadow + (1 - decay) * current`` for every tensor."""
    weights = current.state_dict() if isinstance(current, nn.Module) else current
    if set(weights) != set(ema.shadow):
        raise ValueError("EMA shadow and model weights have different entries")
    g = ema.decay
    for name, w in weights.items():
        s = ema.shadow[name]
        if s.shape != w.shape:
            raise ValueError(f"EMA shape mismatch for {name}: {tuple(s.shape)} vs {tuple(w.shape)}")
        if s.is_floating_point():
            s.mul_(g).add_(w.detach().to(s.dtype), alpha=1 - g)
        else:
            s.copy_(w)
    ema.count += 1
    return ema


def ema_model(model: UNet, ema: EmaState) -> UNet:
    twin = UNet(model.cfg)
    twin.load_state_dict(ema.shadow)
    twin.eval()
    return twin


# ------------------------------------------------------------- training


def diffusion_loss(net, z12: torch.Tensor, z0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor,
                   schedule: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between the true velocity and ``net(z_t, t, z0)``."""
    z_t = add_noise(z12, eps, t, schedule)
    v = v_target(z12, eps, t, schedule)
    return ((v - net(z_t, t, z0)) ** 2).mean()


def train_diffusion(z0: torch.Tensor, z12: torch.Tensor, cfg: DiffusionConfig, seed: int,
                    latent_channels: int | None = None, steps: int | None = None, log=None):
    """Fit the conditional U-Net on latent pairs.

    Latents are rescaled to unit standard deviation (factor stored in the
    model) before noising. ``steps`` caps training at a fixed number of
    optimiser steps instead of ``cfg.epochs`` epochs.

    Returns ``(model, ema_state, curve)``; ``curve`` has one row per epoch.
    """
    if len(z0) == 0 or len(z0) != len(z12):
        raise ValueError("diffusion training needs a nonempty set of aligned latent pairs")
    seed_everything(seed)
    C = latent_channels or z0.shape[1]
    model = UNet(UNetConfig(C, cfg.base_channels, cfg.attention_heads))
    scale = 1.0 / float(torch.cat([z0, z12]).std().clamp(min=1e-8))
    model.latent_scale.fill_(scale)
    schedule = make_schedule(cfg.timesteps)
    n = len(z0)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps if steps is not None else steps_per_epoch * cfg.epochs
    opt, sched = cosine_optimizer(model, cfg.lr, cfg.lr_min, cfg.adam_betas, total_steps)
    ema = EmaState.from_model(model, cfg.ema_decay)
    gen = torch.Generator().manual_seed(seed)
    a, b = z0 * scale, z12 * scale
    curve, running, count, step = [], 0.0, 0, 0
    model.train()
    while step < total_steps:
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            t = torch.randint(1, cfg.timesteps + 1, (len(idx),), generator=gen)
            eps = torch.randn(b[idx].shape, generator=gen)
            loss = diffusion_loss(model, b[idx], a[idx], t, eps, schedule)
            if not torch.isfinite(loss):
                raise TrainingDivergedError("diffusion", step, "v-mse")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            ema_update(ema, model)
            running += loss.item()
            count += 1
            step += 1
            if step >= total_steps:
                break
        curve.append({"epoch": len(curve), "loss": running / count, "step": step})
        if log and (len(curve) % 10 == 0 or step >= total_steps):
            log(f"diffusion epoch {len(curve) - 1}: loss={running / count:.5g}")
        running, count = 0.0, 0
    model.eval()
    return model, ema, curve


# -------------------------------------------------------------- sampling


def sampling_timesteps(T: int, steps: int) -> np.ndarray:
    """Uniform-stride descending sub-schedule ending near t = T/steps."""
    if steps < 1 or steps > T:
        raise ValueError(f"sampling steps must lie in 1..{T}, got {steps}")
    return np.round(np.arange(steps, 0, -1) * T / steps).astype(int)


@torch.no_grad()
def sample_future(z0_cond, net, schedule: NoiseSchedule, steps: int = 100, seed: int = 0,
                  eta: float = 0.0) -> torch.Tensor:
    """Deterministic DDIM trajectory from seeded noise to a future latent.

    ``net(z_t, t, z0)`` may be a :class:`UNet` (its ``latent_scale`` is
    applied on the way in and undone on the way out) or any callable working
    directly in latent units.
    """
    if eta != 0.0:
        raise ValueError("only deterministic sampling (eta = 0) is supported")
    ts = sampling_timesteps(schedule.T, steps)
    single = torch.as_tensor(z0_cond).dim() == 3
    cond = torch.as_tensor(z0_cond, dtype=torch.float32)
    if single:
        cond = cond[None]
    scale = float(net.latent_scale) if isinstance(net, UNet) else 1.0
    if isinstance(net, nn.Module):
        net.eval()
    cond = cond * scale
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(cond.shape, generator=gen, dtype=cond.dtype)
    z12_hat = z
    for i, t in enumerate(ts):
        tt = torch.full((cond.shape[0],), int(t), dtype=torch.long)
        v = net(z, tt, cond)
        z12_hat, eps_hat = predict_from_v(z, v, tt, schedule)
        if i + 1 < len(ts):
            z = add_noise(z12_hat, eps_hat, torch.full_like(tt, int(ts[i + 1])), schedule)
    out = z12_hat / scale
    return out[0] if single else out


@torch.no_grad()
def sample_all(z0: torch.Tensor, net: UNet, schedule: NoiseSchedule, steps: int, seed: int,
               batch: int = 256) -> torch.Tensor:
    """Sample futures for many conditions; chunk ``k`` uses seed ``seed + k``."""
    parts = [sample_future(z0[i:i + batch], net, schedule, steps, seed + k)
             for k, i in enumerate(range(0, len(z0), batch))]
    return torch.cat(parts) if parts else z0[:0].clone()
