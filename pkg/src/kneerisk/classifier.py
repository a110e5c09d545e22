"""Latent-space KL classifiers, SoftArgmax landmark head and their losses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from kneerisk.config import ClassifierConfig
from kneerisk.dataset import N_GRADES, N_LANDMARKS, balanced_batch_indices
from kneerisk.training import TrainingDivergedError, cosine_optimizer, seed_everything

LOG_CLAMP = 1e-12


class LatentClassifier(nn.Module):
    """Two conv blocks, global average pool, linear 5-way head.

    Pooling makes the head indifferent to the latent's spatial size, so
    upscaled latents are accepted as-is. Replicate padding keeps a constant
    latent constant through the body, so its class distribution does not
    depend on the grid size either.
    """

    def __init__(self, in_channels: int, hidden: int = 32):
        super().__init__()
        self.in_channels = in_channels
        self.hidden = hidden
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, padding=1, padding_mode="replicate"), nn.GroupNorm(4, hidden),
            nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1, padding_mode="replicate"), nn.GroupNorm(4, hidden),
            nn.SiLU(),
        )
        self.head = nn.Linear(hidden, N_GRADES)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(z).mean(dim=(2, 3)))


class MultiTaskClassifier(LatentClassifier):
    """Latent classifier with a deconvolutional landmark branch.

    The branch upsamples the body's feature map by ``upsample`` (a power of
    two, normally the VQ-VAE compression ratio) to one heatmap per landmark.
    """

    def __init__(self, in_channels: int, hidden: int = 32, upsample: int = 8,
                 n_landmarks: int = N_LANDMARKS, temperature: float = 1.0):
        super().__init__(in_channels, hidden)
        n_up = int(round(math.log2(upsample)))
        if 2**n_up != upsample:
            raise ValueError(f"upsample must be a power of two, got {upsample}")
        layers: list[nn.Module] = []
        ch = hidden
        for _ in range(n_up):
            out = max(hidden // 2, n_landmarks)
            layers += [nn.ConvTranspose2d(ch, out, 4, stride=2, padding=1), nn.GroupNorm(4, out), nn.SiLU()]
            ch = out
        layers.append(nn.Conv2d(ch, n_landmarks, 3, padding=1))
        self.deconv = nn.Sequential(*layers)
        self.upsample = upsample
        self.temperature = temperature

    def heatmaps(self, z: torch.Tensor) -> torch.Tensor:
        return self.deconv(self.body(z))

    def forward_all(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Return class logits, raw heatmaps and 1-based pixel coordinates."""
        feats = self.body(z)
        raw = self.deconv(feats)
        grid = soft_argmax_2d(raw, self.temperature)
        image_size = z.shape[-1] * self.upsample
        coords = grid_to_pixels(grid, raw.shape[-1], image_size)
        return self.head(feats.mean(dim=(2, 3))), raw, coords

    @classmethod
    def from_classifier(cls, base: LatentClassifier, upsample: int, temperature: float = 1.0):
        model = cls(base.in_channels, base.hidden, upsample, temperature=temperature)
        model.body.load_state_dict(base.body.state_dict())
        model.head.load_state_dict(base.head.state_dict())
        return model


@dataclass
class LandmarkPrediction:
    heatmaps: np.ndarray  # (L, h, w), softmax-normalised
    coords: np.ndarray  # (L, 2), 1-based pixel (row, col)


def soft_argmax_2d(raw: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Expected 1-based ``(row, col)`` under ``softmax(raw / temperature)``.

    Works on any leading batch dims: ``(..., h, w) -> (..., 2)``.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    h, w = raw.shape[-2:]
    p = torch.softmax(raw.reshape(*raw.shape[:-2], h * w) / temperature, dim=-1).reshape(raw.shape)
    # sum_k q_k (k - centre) == 0.5 * sum_k (q_k - q_mirror(k)) (k - centre); differencing
    # before reducing makes a mirror-symmetric heatmap land exactly on the centre
    rc, cc = (h + 1) / 2, (w + 1) / 2
    rows = torch.arange(1, h + 1, dtype=raw.dtype, device=raw.device) - rc
    cols = torch.arange(1, w + 1, dtype=raw.dtype, device=raw.device) - cc
    r = rc + 0.5 * ((p - p.flip(-2)).sum(dim=-1) * rows).sum(dim=-1)
    c = cc + 0.5 * ((p - p.flip(-1)).sum(dim=-2) * cols).sum(dim=-1)
    return torch.stack([r, c], dim=-1)


def grid_to_pixels(coords: torch.Tensor, grid_size: int, image_size: int) -> torch.Tensor:
    """Map 1-based heatmap-cell coordinates to 1-based image pixel coordinates."""
    scale = image_size / grid_size
    return (coords - 0.5) * scale + 0.5


def normalize_coords(coords, image_size: int):
    """Map 1-based pixel coordinates ``[1, H]`` onto ``[0, 1]``."""
    return (coords - 1.0) / (image_size - 1.0)


def _as_tensor(z) -> torch.Tensor:
    z = torch.as_tensor(z, dtype=torch.float32)
    return z[None] if z.dim() == 3 else z


def _check_finite(z: torch.Tensor) -> None:
    if not torch.isfinite(z).all():
        raise ValueError("latent contains NaN or infinite values")


@torch.no_grad()
def classify(z, model: LatentClassifier) -> np.ndarray:
    """Class distribution(s) over KL grades; ``(C,h,w)`` -> ``(5,)``, batched -> ``(B,5)``."""
    single = torch.as_tensor(z).dim() == 3
    zt = _as_tensor(z)
    _check_finite(zt)
    model.eval()
    logits = model(zt).double()
    probs = torch.softmax(logits, dim=-1).numpy()
    return probs[0] if single else probs


@torch.no_grad()
def landmark_head(z, model: MultiTaskClassifier) -> LandmarkPrediction | list:
    single = torch.as_tensor(z).dim() == 3
    zt = _as_tensor(z)
    _check_finite(zt)
    if zt.shape[1] != model.in_channels:
        raise ValueError(f"latent has {zt.shape[1]} channels, model expects {model.in_channels}")
    model.eval()
    _, raw, coords = model.forward_all(zt)
    h, w = raw.shape[-2:]
    heat = torch.softmax(raw.reshape(*raw.shape[:2], -1) / model.temperature, -1).reshape(raw.shape)
    out = [LandmarkPrediction(heat[i].numpy(), coords[i].numpy()) for i in range(zt.shape[0])]
    return out[0] if single else out


def _check_onehot(y: torch.Tensor) -> None:
    if y.shape[-1] != N_GRADES or not torch.all((y == 0) | (y == 1)) or not torch.all(y.sum(-1) == 1):
        raise ValueError("labels must be one-hot vectors over 5 KL grades")


def cls_loss(probs, y_onehot) -> torch.Tensor:
    """Cross-entropy ``-sum y log p`` on class probabilities, batch-averaged."""
    p = torch.as_tensor(probs)
    y = torch.as_tensor(y_onehot, dtype=p.dtype)
    _check_onehot(y)
    if torch.any(p < 0) or torch.any(p > 1) or not torch.allclose(p.sum(-1), torch.ones((), dtype=p.dtype), atol=1e-6):
        raise ValueError("probabilities must form a simplex")
    ce = -(y * torch.log(torch.clamp(p, min=LOG_CLAMP))).sum(-1)
    return ce.mean()


def mts_loss(probs, y_onehot, coords_pred, coords_true, delta: float,
             mask=None) -> tuple[torch.Tensor, dict]:
    """Classification + ``delta`` x summed squared landmark error.

    Coordinates are expected in normalised [0, 1] units. ``mask`` (per
    sample, bool) drops the landmark term for unannotated samples.
    """
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    cp = torch.as_tensor(coords_pred)
    ct = torch.as_tensor(coords_true, dtype=cp.dtype)
    if cp.shape != ct.shape or cp.shape[-2:] != (N_LANDMARKS, 2):
        raise ValueError(f"expected {N_LANDMARKS} coordinate pairs on both sides, got "
                         f"{tuple(cp.shape)} and {tuple(ct.shape)}")
    ce = cls_loss(probs, y_onehot)
    sq = ((cp - ct) ** 2).sum(dim=(-1, -2))
    if mask is not None:
        m = torch.as_tensor(mask, dtype=sq.dtype)
        lm = (sq * m).sum() / m.sum().clamp(min=1.0)
    else:
        lm = sq.mean()
    total = ce + delta * lm
    return total, {"cls": ce.detach(), "landmark": lm.detach(), "total": total.detach()}


# ---------------------------------------------------------------- training


@dataclass
class ClassifierTrainingSet:
    """Latents plus labels for one classifier, tagged with where they came from."""

    latents: torch.Tensor  # (N, C, h, w)
    labels: torch.Tensor  # (N,) int grades
    progressing: np.ndarray  # (N,) bool, drives batch balancing
    provenance: str  # "real" or "synthetic"
    landmarks: torch.Tensor | None = None  # (N, 16, 2) pixel coords, NaN where absent
    image_size: int = 64
    sources: list = field(default_factory=list)  # per-item ids for the training manifest


def train_classifier(model: LatentClassifier, data: ClassifierTrainingSet, cfg: ClassifierConfig,
                     seed: int, epochs: int | None = None, multitask: bool = False) -> list:
    """Fit ``model`` in place with progression-balanced batches; returns per-epoch losses."""
    seed_everything(seed)
    epochs = cfg.epochs if epochs is None else epochs
    flags = np.asarray(data.progressing, dtype=bool)
    if flags.all() or not flags.any():
        flags = np.arange(len(flags)) % 2 == 0  # degenerate labels: plain shuffled batches
    half = cfg.batch_size // 2
    steps_per_epoch = math.ceil(max(flags.sum(), (~flags).sum()) / half)
    opt, sched = cosine_optimizer(model, cfg.lr, cfg.lr_min, cfg.adam_betas, steps_per_epoch * epochs)
    onehot = F.one_hot(data.labels.long(), N_GRADES).float()
    has_lm = None
    if multitask:
        if data.landmarks is None:
            raise ValueError("multi-task training needs landmark annotations")
        has_lm = ~torch.isnan(data.landmarks).any(dim=(1, 2))
        lm_norm = normalize_coords(torch.nan_to_num(data.landmarks, nan=1.0), data.image_size)
    curve = []
    batches = balanced_batch_indices(flags, cfg.batch_size, seed, epochs)
    model.train()
    for epoch in range(epochs):
        total, n = 0.0, 0
        for step in range(steps_per_epoch):
            idx = torch.as_tensor(next(batches))
            z, y = data.latents[idx], onehot[idx]
            if multitask:
                logits, _, coords = model.forward_all(z)
                loss, _ = mts_loss(torch.softmax(logits, -1), y,
                                   normalize_coords(coords, data.image_size), lm_norm[idx],
                                   cfg.delta, has_lm[idx])
            else:
                loss = cls_loss(torch.softmax(model(z), -1), y)
            if not torch.isfinite(loss):
                raise TrainingDivergedError("classifier", epoch * steps_per_epoch + step, "cls")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item()
            n += 1
        curve.append({"epoch": epoch, "loss": total / n})
    model.eval()
    return curve


def clone_classifier(model: LatentClassifier) -> LatentClassifier:
    twin = LatentClassifier(model.in_channels, model.hidden)
    twin.load_state_dict(model.state_dict())
    return twin


def fine_tune_classifiers(init: LatentClassifier, real: ClassifierTrainingSet,
                          synthetic: ClassifierTrainingSet | None, cfg: ClassifierConfig,
                          seed: int, upsample: int = 8) -> tuple:
    """Fine-tune the current-grade (real latents) and future-grade (generated latents) classifiers.

    Both start from a copy of ``init``. With ``cfg.multitask`` the
    current-grade model gains a landmark branch trained on the annotated real
    latents. Landmarks exist only for real current images, so the
    future-grade model is trained with the classification loss alone; its
    landmark overlays come from the current-grade model's branch.

    Returns ``(clf0, clf12, manifest)`` where ``manifest`` records the
    provenance of each classifier's training data.
    """
    if synthetic is None or len(synthetic.latents) == 0:
        raise ValueError("future-grade classifier needs generated future latents; train diffusion first")
    if real.provenance != "real" or synthetic.provenance != "synthetic":
        raise ValueError("real/synthetic training sets are swapped or mislabelled")
    curves = {}
    if cfg.multitask:
        clf0 = MultiTaskClassifier.from_classifier(init, upsample, cfg.softargmax_temperature)
        curves["clf0"] = train_classifier(clf0, real, cfg, seed, multitask=True)
    else:
        clf0 = clone_classifier(init)
        curves["clf0"] = train_classifier(clf0, real, cfg, seed)
    clf12 = clone_classifier(init)
    curves["clf12"] = train_classifier(clf12, synthetic, cfg, seed + 1)
    manifest = {
        "clf0": {"provenance": real.provenance, "n": len(real.latents), "sources": list(real.sources)},
        "clf12": {"provenance": synthetic.provenance, "n": len(synthetic.latents),
                  "sources": list(synthetic.sources)},
        "curves": curves,
    }
    return clf0, clf12, manifest
