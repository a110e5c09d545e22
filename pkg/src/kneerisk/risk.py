"""Progression risk from two KL-grade distributions, latent upscaling, and the inference pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from kneerisk.classifier import LatentClassifier, MultiTaskClassifier, classify, landmark_head
from kneerisk.dataset import N_GRADES
from kneerisk.diffusion import NoiseSchedule, UNet, sample_future
from kneerisk.vqvae import VQVAE, decode, encode

SIMPLEX_TOL = 1e-6


class PipelineStageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


@dataclass
class RiskEstimate:
    p_increase: float
    p_stable: float
    p0: np.ndarray
    p12: np.ndarray
    used_upscale: bool = False

    def to_record(self) -> dict:
        return {"p_increase": self.p_increase, "p_stable": self.p_stable,
                "p0": [float(v) for v in self.p0], "p12": [float(v) for v in self.p12],
                "used_upscale": self.used_upscale}


def _check_simplex(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != N_GRADES:
        raise ValueError(f"{name} must have {N_GRADES} entries per row")
    if not np.all(np.isfinite(p)) or np.any(p < 0) or np.any(p > 1) \
            or np.any(np.abs(p.sum(-1) - 1) > SIMPLEX_TOL):
        raise ValueError(f"{name} is not a probability simplex")
    return p


def risk_terms(p0, p12) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised increase/stable probabilities for ``(..., 5)`` distribution pairs.

    ``P(increase) = sum_k p12[k] * sum_{c<k} p0[c]`` and
    ``P(stable) = sum_k p12[k] * sum_{c>=k} p0[c]``, the two grades treated as independent.
    """
    p0 = _check_simplex(p0, "p0")
    p12 = _check_simplex(p12, "p12")
    below = np.cumsum(p0, axis=-1) - p0  # sum_{c<k} p0[c]
    at_or_above = np.cumsum(p0[..., ::-1], axis=-1)[..., ::-1]  # sum_{c>=k} p0[c]
    return (p12 * below).sum(-1), (p12 * at_or_above).sum(-1)


def progression_risk(p0, p12, used_upscale: bool = False) -> RiskEstimate:
    inc, stable = risk_terms(p0, p12)
    return RiskEstimate(float(inc), float(stable), np.asarray(p0, float), np.asarray(p12, float), used_upscale)


# ------------------------------------------------------------ upscaling


def cubic_weights(t: torch.Tensor, a: float = -0.5) -> torch.Tensor:
    """Keys cubic-convolution weights for taps at offsets -1, 0, 1, 2 from ``floor(x)``."""
    def k(x):
        x = x.abs()
        return torch.where(x <= 1, (a + 2) * x**3 - (a + 3) * x**2 + 1,
                           torch.where(x < 2, a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a, torch.zeros_like(x)))
    return torch.stack([k(t + 1), k(t), k(1 - t), k(2 - t)], dim=-1)


def _resize_axis(z: torch.Tensor, factor: int, dim: int) -> torch.Tensor:
    n = z.shape[dim]
    out = torch.arange(n * factor, dtype=z.dtype)
    src = (out + 0.5) / factor - 0.5
    base = torch.floor(src)
    w = cubic_weights(src - base)  # (n_out, 4)
    taps = (base.long()[:, None] + torch.arange(-1, 3)[None]).clamp(0, n - 1)
    zm = z.movedim(dim, -1)
    gathered = zm[..., taps]  # (..., n_out, 4)
    centre = gathered[..., 1:2]
    # offsets from the centre tap keep constant rows exactly constant
    res = centre[..., 0] + ((gathered - centre) * w).sum(-1)
    return res.movedim(-1, dim)


def upscale_latent(z, factor: int = 2) -> torch.Tensor:
    """Per-channel bicubic (Catmull-Rom, a = -0.5) upscaling with clamped edges."""
    zt = torch.as_tensor(z)
    if not zt.is_floating_point():
        zt = zt.double()
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upscale factor must be a positive integer, got {factor}")
    if zt.shape[-1] < 4 or zt.shape[-2] < 4:
        raise ValueError(f"bicubic upscaling needs at least 4x4 latents, got {tuple(zt.shape[-2:])}")
    if factor == 1:
        return zt.clone()
    return _resize_axis(_resize_axis(zt, factor, zt.dim() - 2), factor, zt.dim() - 1)


# --------------------------------------------------------------- pipeline


@dataclass
class Models:
    vqvae: VQVAE
    unet: UNet  # EMA weights
    schedule: NoiseSchedule
    clf0: LatentClassifier
    clf12: LatentClassifier
    meta: dict = field(default_factory=dict)


@dataclass
class RiskArtifacts:
    future_image: np.ndarray
    future_latent: np.ndarray
    landmarks0: np.ndarray | None = None
    landmarks12: np.ndarray | None = None


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
        raise PipelineStageError(name, exc) from exc


def estimate_risk_batch(x0: np.ndarray, models: Models, upscale: bool = False, steps: int = 100,
                        seed: int = 0, with_artifacts: bool = True) -> tuple[list, list]:
    """Run encode -> forecast -> classify -> aggregate for a stack of images (N, H, W)."""
    x = np.asarray(x0, dtype=np.float32)
    if x.ndim == 2:
        x = x[None]
    z0 = _stage("encode", encode, x, models.vqvae)
    z12 = _stage("forecast", sample_future, z0, models.unet, models.schedule, steps, seed)
    z0_cls = _stage("upscale", upscale_latent, z0, 2).float() if upscale else z0
    p0 = _stage("classify_current", classify, z0_cls, models.clf0)
    p12 = _stage("classify_future", classify, z12, models.clf12)
    p0 = p0 / p0.sum(-1, keepdims=True)
    p12 = p12 / p12.sum(-1, keepdims=True)
    inc, stable = _stage("aggregate", risk_terms, p0, p12)
    estimates = [RiskEstimate(float(inc[i]), float(stable[i]), p0[i], p12[i], upscale) for i in range(len(x))]
    artifacts = []
    if with_artifacts:
        future = _stage("decode", decode, z12, models.vqvae).numpy()[:, 0]
        lm0 = lm12 = None
        if isinstance(models.clf0, MultiTaskClassifier):
            lm0 = _stage("landmarks", landmark_head, z0, models.clf0)
            lm12 = _stage("landmarks", landmark_head, z12, models.clf0)
        for i in range(len(x)):
            artifacts.append(RiskArtifacts(future[i], z12[i].numpy(),
                                           lm0[i].coords if lm0 else None,
                                           lm12[i].coords if lm12 else None))
    return estimates, artifacts


def estimate_risk(x0: np.ndarray, models: Models, upscale: bool = False, steps: int = 100,
                  seed: int = 0) -> tuple[RiskEstimate, RiskArtifacts]:
    est, art = estimate_risk_batch(np.asarray(x0)[None], models, upscale, steps, seed)
    return est[0], art[0]
