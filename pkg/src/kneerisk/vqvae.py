"""Vector-quantised autoencoder with an embedded latent KL classifier.

The classifier reads the continuous encoder output; quantisation sits only on
the decoder path, so the diffusion model and the classifiers all work on
continuous latents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from kneerisk.classifier import LatentClassifier
from kneerisk.config import VqVaeConfig
from kneerisk.dataset import N_GRADES
from kneerisk.training import TrainingDivergedError, cosine_optimizer, seed_everything


class ShapeError(ValueError):
    pass


class _StraightThrough(torch.autograd.Function):
    """Forward returns the quantised tensor unchanged; backward copies the gradient to z_e."""

    @staticmethod
    def forward(ctx, z_e, z_q):
        return z_q.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


@dataclass
class Quantized:
    z_q: torch.Tensor
    indices: torch.Tensor
    codebook_term: torch.Tensor
    commitment_term: torch.Tensor


def nearest_codes(flat: torch.Tensor, codebook: torch.Tensor, chunk: int = 4096) -> torch.Tensor:
    """Index of the nearest codebook row for every row of ``flat`` (ties -> lowest index)."""
    out = []
    for start in range(0, flat.shape[0], chunk):
        part = flat[start:start + chunk]
        # elementwise accumulation keeps duplicate codes bitwise tied; a
        # vectorised sum(-1) may round them differently
        d = torch.zeros(part.shape[0], codebook.shape[0], dtype=part.dtype)
        for j in range(part.shape[1]):
            d += (part[:, j, None] - codebook[None, :, j]) ** 2
        out.append(torch.argmin(d, dim=1))
    return torch.cat(out) if out else torch.zeros(0, dtype=torch.long)


def quantize(z_e: torch.Tensor, codebook: torch.Tensor) -> Quantized:
    """Snap each spatial position of ``z_e`` (B, D, h, w) to its nearest codebook entry.

    Both loss terms are squared Euclidean distances averaged over positions;
    the codebook term only moves the codebook, the commitment term only the
    encoder. Gradients reach ``z_e`` through ``z_q`` unchanged.
    """
    if codebook.numel() == 0 or codebook.shape[0] == 0:
        raise ValueError("codebook is empty")
    b, d, h, w = z_e.shape
    if codebook.shape[1] != d:
        raise ShapeError(f"codebook dim {codebook.shape[1]} does not match latent channels {d}")
    flat = z_e.permute(0, 2, 3, 1).reshape(-1, d)
    with torch.no_grad():
        idx = nearest_codes(flat, codebook)
    picked = codebook[idx]
    codebook_term = ((flat.detach() - picked) ** 2).sum(-1).mean()
    commitment_term = ((flat - picked.detach()) ** 2).sum(-1).mean()
    z_q_exact = picked.detach().reshape(b, h, w, d).permute(0, 3, 1, 2)
    z_q = _StraightThrough.apply(z_e, z_q_exact)
    return Quantized(z_q, idx.reshape(b, h, w), codebook_term, commitment_term)


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.block = nn.Sequential(nn.GroupNorm(8, ch), nn.SiLU(), nn.Conv2d(ch, ch, 3, padding=1),
                                   nn.GroupNorm(8, ch), nn.SiLU(), nn.Conv2d(ch, ch, 3, padding=1))

    def forward(self, x):
        return x + self.block(x)


def _n_down(compression: int) -> int:
    n = int(round(math.log2(compression)))
    if n < 1 or 2**n != compression:
        raise ValueError(f"compression ratio must be a power of two >= 2, got {compression}")
    return n


class Encoder(nn.Module):
    def __init__(self, latent_channels: int, hidden: int, compression: int):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv2d(1, hidden, 3, padding=1), nn.SiLU()]
        ch = hidden
        for i in range(_n_down(compression)):
            nxt = hidden * 2 if i > 0 else hidden
            layers += [nn.Conv2d(ch, nxt, 4, stride=2, padding=1), nn.GroupNorm(8, nxt), nn.SiLU()]
            ch = nxt
        layers += [ResBlock(ch), nn.GroupNorm(8, ch), nn.SiLU(), nn.Conv2d(ch, latent_channels, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    def __init__(self, latent_channels: int, hidden: int, compression: int):
        super().__init__()
        n = _n_down(compression)
        ch = hidden * 2 if n > 1 else hidden
        layers: list[nn.Module] = [nn.Conv2d(latent_channels, ch, 3, padding=1), ResBlock(ch)]
        for i in range(n):
            nxt = hidden if i >= n - 2 else hidden * 2
            layers += [nn.GroupNorm(8, ch), nn.SiLU(), nn.ConvTranspose2d(ch, nxt, 4, stride=2, padding=1)]
            ch = nxt
        layers += [nn.GroupNorm(8, ch), nn.SiLU(), nn.Conv2d(ch, 1, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


@dataclass
class VqVaeOutputs:
    z_e: torch.Tensor
    z_q: torch.Tensor
    indices: torch.Tensor
    reconstruction: torch.Tensor
    class_logits: torch.Tensor
    codebook_term: torch.Tensor
    commitment_term: torch.Tensor


class VQVAE(nn.Module):
    def __init__(self, cfg: VqVaeConfig | None = None):
        super().__init__()
        cfg = cfg or VqVaeConfig()
        self.latent_channels = cfg.latent_channels
        self.compression = cfg.compression
        self.encoder = Encoder(cfg.latent_channels, cfg.hidden_channels, cfg.compression)
        self.decoder = Decoder(cfg.latent_channels, cfg.hidden_channels, cfg.compression)
        k = cfg.codebook_size
        self.codebook = nn.Parameter(torch.empty(k, cfg.latent_channels).uniform_(-1.0 / k, 1.0 / k))
        self.register_buffer("usage_counts", torch.zeros(k, dtype=torch.long))
        self._window_counts = torch.zeros(k, dtype=torch.long)
        self.classifier = LatentClassifier(cfg.latent_channels, cfg.classifier_hidden)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % self.compression or w % self.compression:
            raise ShapeError(f"image size {h}x{w} is not divisible by compression {self.compression}")
        return self.encoder(x)

    def decode(self, z_q: torch.Tensor) -> torch.Tensor:
        if z_q.dim() != 4 or z_q.shape[1] != self.latent_channels:
            raise ShapeError(f"expected latent (B, {self.latent_channels}, h, w), got {tuple(z_q.shape)}")
        return self.decoder(z_q)

    def forward(self, x: torch.Tensor) -> VqVaeOutputs:
        z_e = self.encode(x)
        q = quantize(z_e, self.codebook)
        if self.training:
            with torch.no_grad():
                used = torch.bincount(q.indices.reshape(-1), minlength=self.codebook.shape[0])
                self.usage_counts += used
                self._window_counts += used
        recon = self.decode(q.z_q)
        return VqVaeOutputs(z_e, q.z_q, q.indices, recon, self.classifier(z_e),
                            q.codebook_term, q.commitment_term)


@torch.no_grad()
def restart_dead_codes(model: VQVAE, z_e: torch.Tensor, gen: torch.Generator) -> int:
    """Move codes unused since the last call onto random current encoder outputs."""
    dead = torch.nonzero(model._window_counts == 0)[:, 0]
    model._window_counts.zero_()
    if len(dead) == 0:
        return 0
    flat = z_e.detach().permute(0, 2, 3, 1).reshape(-1, z_e.shape[1])
    pick = flat[torch.randint(len(flat), (len(dead),), generator=gen)]
    jitter = 0.01 * pick.abs().mean().clamp(min=1e-3)
    model.codebook.data[dead] = pick + jitter * torch.randn(pick.shape, generator=gen)
    return len(dead)


def combine_vqvae_terms(recon, codebook, commitment, ce, alpha: float, beta: float):
    """Weighted sum of the four autoencoder terms; ``alpha == 0`` drops the class term entirely."""
    total = recon + codebook + beta * commitment
    if alpha != 0:
        total = total + alpha * ce
    return total


def vqvae_loss(x: torch.Tensor, y_onehot: torch.Tensor, outputs: VqVaeOutputs, alpha: float,
               beta: float) -> tuple[torch.Tensor, dict]:
    """Reconstruction MSE + codebook + beta*commitment + alpha*cross-entropy.

    Returns the total and a dict of the individual (detached) terms.
    """
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be nonnegative")
    y = torch.as_tensor(y_onehot, dtype=outputs.class_logits.dtype)
    if y.shape[-1] != N_GRADES or not torch.all((y == 0) | (y == 1)) or not torch.all(y.sum(-1) == 1):
        raise ValueError("labels must be one-hot vectors over 5 KL grades")
    recon = F.mse_loss(outputs.reconstruction, x)
    ce = -(y * F.log_softmax(outputs.class_logits, dim=-1)).sum(-1).mean()
    total = combine_vqvae_terms(recon, outputs.codebook_term, outputs.commitment_term, ce, alpha, beta)
    terms = {"recon": recon.detach(), "codebook": outputs.codebook_term.detach(),
             "commitment": outputs.commitment_term.detach(), "ce": ce.detach(), "total": total.detach()}
    return total, terms


def train_vqvae(images: torch.Tensor, labels: torch.Tensor, cfg: VqVaeConfig, seed: int,
                epochs: int | None = None, log=None) -> tuple[VQVAE, list]:
    """Train autoencoder and embedded classifier jointly.

    Args:
        images: (N, 1, H, W) float tensor in [0, 1].
        labels: (N,) integer KL grades.
        epochs: overrides ``cfg.epochs`` (used by short overfit runs).

    Returns:
        The trained model (eval mode) and one dict of mean loss terms per epoch.
    """
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    seed_everything(seed)
    epochs = cfg.epochs if epochs is None else epochs
    model = VQVAE(cfg)
    n = len(images)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    opt, sched = cosine_optimizer(model, cfg.lr, cfg.lr_min, cfg.adam_betas, steps_per_epoch * epochs)
    gen = torch.Generator().manual_seed(seed)
    onehot = F.one_hot(labels.long(), N_GRADES).float()
    curve = []
    step = 0
    total_steps = steps_per_epoch * epochs
    restart_gen = torch.Generator().manual_seed(seed + 1)
    model.train()
    for epoch in range(epochs):
        sums = {k: 0.0 for k in ("total", "recon", "codebook", "commitment", "ce")}
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            out = model(images[idx])
            loss, terms = vqvae_loss(images[idx], onehot[idx], out, cfg.alpha, cfg.beta)
            for name, value in terms.items():
                if not torch.isfinite(value):
                    raise TrainingDivergedError("vqvae", step, name)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            step += 1
            every = cfg.dead_code_restart_every
            if every and step % every == 0 and step <= cfg.restart_until * total_steps:
                restart_dead_codes(model, out.z_e, restart_gen)
            for k in sums:
                sums[k] += terms[k].item() * len(idx)
        row = {"epoch": epoch, **{k: v / n for k, v in sums.items()},
               "codes_used": int((model.usage_counts > 0).sum())}
        curve.append(row)
        if log:
            log(f"vqvae epoch {epoch}: " + " ".join(f"{k}={v:.5g}" for k, v in row.items() if k != "epoch"))
    model.eval()
    return model, curve


def _as_batch(x) -> torch.Tensor:
    """(H, W) -> (1, 1, H, W); (B, H, W) -> (B, 1, H, W); 4-D passes through."""
    x = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x, dtype=torch.float32)
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[:, None]
    return x


@torch.no_grad()
def encode(x, model: VQVAE) -> torch.Tensor:
    """Continuous latent(s) for image(s) shaped (H, W), (B, H, W) or (B, 1, H, W)."""
    model.eval()
    return model.encode(_as_batch(x))


@torch.no_grad()
def decode(z, model: VQVAE, quantized: bool = True) -> torch.Tensor:
    """Decode latent(s); continuous latents are snapped to the codebook first unless ``quantized=False``."""
    model.eval()
    zb = torch.as_tensor(z, dtype=torch.float32)
    if zb.dim() == 3:
        zb = zb[None]
    if quantized:
        zb = quantize(zb, model.codebook).z_q
    return model.decode(zb)


@torch.no_grad()
def encode_all(images: torch.Tensor, model: VQVAE, batch: int = 256) -> torch.Tensor:
    return torch.cat([encode(images[i:i + batch], model) for i in range(0, len(images), batch)])
