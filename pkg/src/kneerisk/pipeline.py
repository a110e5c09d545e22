"""Training stages and checkpoint layout for a run directory.

Layout::

    runs/<name>/
      config.yaml
      checkpoints/{vqvae,diffusion,synthetic_latents,clf0_cls,clf0_mts,clf12,
                   scratch0,scratch12,image_y0,image_y12}/
      reports/
      images/

Stages run in a fixed order: vqvae -> diffusion -> classifiers, with an
optional ``baselines`` stage (ablation reference models) after classifiers.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from kneerisk import checkpoint as ckpt
from kneerisk.classifier import (ClassifierTrainingSet, LatentClassifier, MultiTaskClassifier,
                                 fine_tune_classifiers, train_classifier)
from kneerisk.config import RunConfig, dump_config
from kneerisk.dataset import PairDataset, Sample
from kneerisk.diffusion import UNet, UNetConfig, make_schedule, sample_all, train_diffusion
from kneerisk.risk import Models
from kneerisk.vqvae import VQVAE, encode_all, train_vqvae

log = logging.getLogger("kneerisk")

STAGES = ("vqvae", "diffusion", "classifiers", "baselines")
REQUIRES = {"diffusion": "vqvae", "classifiers": "diffusion", "baselines": "classifiers"}
STAGE_MARKER = {"vqvae": "vqvae", "diffusion": "diffusion", "classifiers": "clf12",
                "baselines": "image_y12"}


class StageOrderError(RuntimeError):
    pass


class RunDir:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def images(self) -> Path:
        return self.root / "images"

    def ckpt(self, name: str) -> Path:
        return self.checkpoints / name

    def has(self, name: str) -> bool:
        return ckpt.exists(self.ckpt(name))

    def prepare(self, cfg: RunConfig) -> None:
        for d in (self.checkpoints, self.reports, self.images):
            d.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, self.root / "config.yaml")
        (self.root / "run.json").write_text(json.dumps({"config_hash": cfg.config_hash(), "seed": cfg.seed}))


def _meta(cfg: RunConfig, stage: str, **extra) -> dict:
    return {"stage": stage, "config_hash": cfg.config_hash(), "seed": cfg.seed, **extra}


# --------------------------------------------------------------- data views


def train_images(samples: list[Sample]) -> tuple[torch.Tensor, torch.Tensor]:
    """Unique (patient, month) images of a split with their grades."""
    seen, imgs, labels = set(), [], []
    for s in samples:
        for t, x, y in ((s.t0_months, s.x0, s.y0), (s.t0_months + 12, s.x12, s.y12)):
            if (s.patient_id, t) not in seen:
                seen.add((s.patient_id, t))
                imgs.append(x)
                labels.append(y)
    return torch.tensor(np.stack(imgs), dtype=torch.float32)[:, None], torch.tensor(labels)


def stack_pairs(samples: list[Sample]) -> dict:
    lm = np.full((len(samples), 16, 2), np.nan)
    for i, s in enumerate(samples):
        if s.has_landmarks and s.landmarks0 is not None:
            lm[i] = s.landmarks0
    return {
        "x0": torch.tensor(np.stack([s.x0 for s in samples]), dtype=torch.float32)[:, None],
        "x12": torch.tensor(np.stack([s.x12 for s in samples]), dtype=torch.float32)[:, None],
        "y0": torch.tensor([s.y0 for s in samples]),
        "y12": torch.tensor([s.y12 for s in samples]),
        "progressed": np.array([s.progressed for s in samples]),
        "landmarks": torch.tensor(lm, dtype=torch.float32),
        "ids": [f"{s.patient_id}@{s.t0_months}" for s in samples],
    }


# ------------------------------------------------------------------ loading


def _require(run: RunDir, stage: str) -> None:
    need = REQUIRES.get(stage)
    if need and not run.has(STAGE_MARKER[need]):
        raise StageOrderError(f"stage '{stage}' needs a trained '{need}' checkpoint in {run.checkpoints}; "
                              f"run `train {need}` first")


def load_vqvae(run: RunDir, cfg: RunConfig) -> VQVAE:
    tensors, _ = ckpt.load_checkpoint(run.ckpt("vqvae"))
    model = VQVAE(cfg.vqvae)
    model.load_state_dict(tensors)
    return model.eval()


def load_unet(run: RunDir, ema: bool = True) -> UNet:
    tensors, meta = ckpt.load_checkpoint(run.ckpt("diffusion"))
    model = UNet(UNetConfig(**meta["unet"]))
    model.load_state_dict(ckpt.unprefixed(tensors, "ema" if ema else "model"))
    return model.eval()


def load_classifier(run: RunDir, name: str) -> LatentClassifier:
    tensors, meta = ckpt.load_checkpoint(run.ckpt(name))
    kind = meta.get("kind", "latent")
    if kind == "multitask":
        model = MultiTaskClassifier(meta["in_channels"], meta["hidden"], meta["upsample"],
                                    temperature=meta["temperature"])
    elif kind == "image":
        model = ImageClassifier(meta["hidden"], meta["compression"])
    else:
        model = LatentClassifier(meta["in_channels"], meta["hidden"])
    model.load_state_dict(tensors)
    return model.eval()


def load_models(run: RunDir, cfg: RunConfig) -> Models:
    clf0_name = "clf0_mts" if run.has("clf0_mts") else "clf0_cls"
    return Models(load_vqvae(run, cfg), load_unet(run, ema=True), make_schedule(cfg.diffusion.timesteps),
                  load_classifier(run, clf0_name), load_classifier(run, "clf12"), {"clf0": clf0_name})


def _save_classifier(run: RunDir, name: str, model: nn.Module, cfg: RunConfig, curve, **extra) -> None:
    if isinstance(model, MultiTaskClassifier):
        info = {"kind": "multitask", "in_channels": model.in_channels, "hidden": model.hidden,
                "upsample": model.upsample, "temperature": model.temperature}
    elif isinstance(model, ImageClassifier):
        info = {"kind": "image", "hidden": model.hidden, "compression": model.compression}
    else:
        info = {"kind": "latent", "in_channels": model.in_channels, "hidden": model.hidden}
    ckpt.save_checkpoint(run.ckpt(name), model.state_dict(), _meta(cfg, name, **info, **extra), curve)


# ------------------------------------------------------------------- stages


def stage_vqvae(run: RunDir, cfg: RunConfig, data: PairDataset) -> list:
    imgs, labels = train_images(data.split("train"))
    log.info("vqvae: %d training images", len(imgs))
    model, curve = train_vqvae(imgs, labels, cfg.vqvae, cfg.seed, log=log.info)
    ckpt.save_checkpoint(run.ckpt("vqvae"), model.state_dict(),
                         _meta(cfg, "vqvae", epoch=cfg.vqvae.epochs, n_images=len(imgs)), curve)
    return curve


def stage_diffusion(run: RunDir, cfg: RunConfig, data: PairDataset) -> list:
    _require(run, "diffusion")
    vq = load_vqvae(run, cfg)
    pairs = stack_pairs(data.split("train"))
    z0, z12 = encode_all(pairs["x0"], vq), encode_all(pairs["x12"], vq)
    log.info("diffusion: %d latent pairs of shape %s", len(z0), tuple(z0.shape[1:]))
    model, ema, curve = train_diffusion(z0, z12, cfg.diffusion, cfg.seed, log=log.info)
    tensors = {**ckpt.prefixed(model.state_dict(), "model"), **ckpt.prefixed(ema.shadow, "ema")}
    unet_info = {k: v for k, v in asdict(model.cfg).items()}
    ckpt.save_checkpoint(run.ckpt("diffusion"), tensors,
                         _meta(cfg, "diffusion", unet=unet_info, ema_updates=ema.count,
                               latent_scale=float(model.latent_scale), epoch=cfg.diffusion.epochs), curve)
    return curve


def synthetic_latents(run: RunDir, cfg: RunConfig, z0: torch.Tensor) -> torch.Tensor:
    """Generated futures for the training pairs, cached as a checkpoint."""
    if run.has("synthetic_latents"):
        tensors, meta = ckpt.load_checkpoint(run.ckpt("synthetic_latents"))
        if meta.get("config_hash") == cfg.config_hash() and tensors["z12_hat"].shape == z0.shape:
            return tensors["z12_hat"]
    unet = load_unet(run, ema=True)
    t0 = time.perf_counter()
    z12_hat = sample_all(z0, unet, make_schedule(cfg.diffusion.timesteps), cfg.diffusion.sample_steps,
                         cfg.seed + 500)
    log.info("generated %d future latents in %.1fs", len(z0), time.perf_counter() - t0)
    ckpt.save_checkpoint(run.ckpt("synthetic_latents"), {"z12_hat": z12_hat},
                         _meta(cfg, "synthetic_latents", steps=cfg.diffusion.sample_steps))
    return z12_hat


def _training_sets(run: RunDir, cfg: RunConfig, data: PairDataset, vq: VQVAE):
    pairs = stack_pairs(data.split("train"))
    z0 = encode_all(pairs["x0"], vq)
    z12_hat = synthetic_latents(run, cfg, z0)
    size = data.image_size or pairs["x0"].shape[-1]
    real = ClassifierTrainingSet(z0, pairs["y0"], pairs["progressed"], "real", pairs["landmarks"], size,
                                 [f"{i}:x0" for i in pairs["ids"]])
    synth = ClassifierTrainingSet(z12_hat, pairs["y12"], pairs["progressed"], "synthetic", None, size,
                                  [f"{i}:generated12" for i in pairs["ids"]])
    return pairs, real, synth


def stage_classifiers(run: RunDir, cfg: RunConfig, data: PairDataset) -> dict:
    _require(run, "classifiers")
    vq = load_vqvae(run, cfg)
    _, real, synth = _training_sets(run, cfg, data, vq)
    ccfg = cfg.classifier
    clf0, clf12, manifest = fine_tune_classifiers(vq.classifier, real, synth, replace(ccfg, multitask=False),
                                                  cfg.seed, vq.compression)
    _save_classifier(run, "clf0_cls", clf0, cfg, manifest["curves"]["clf0"], provenance="real")
    _save_classifier(run, "clf12", clf12, cfg, manifest["curves"]["clf12"], provenance="synthetic")
    curves = dict(manifest["curves"])
    if ccfg.multitask:
        mts, _, mt_manifest = fine_tune_classifiers(vq.classifier, real, synth, ccfg, cfg.seed, vq.compression)
        _save_classifier(run, "clf0_mts", mts, cfg, mt_manifest["curves"]["clf0"], provenance="real")
        curves["clf0_mts"] = mt_manifest["curves"]["clf0"]
    prov = {"clf0_cls": manifest["clf0"], "clf12": manifest["clf12"]}
    if ccfg.multitask:
        prov["clf0_mts"] = {**manifest["clf0"], "landmark_annotated": int((~torch.isnan(real.landmarks)
                                                                            ).all(-1).all(-1).sum())}
    (run.checkpoints / "training_manifest.json").write_text(json.dumps(prov, indent=1))
    return curves


class ImageClassifier(nn.Module):
    """Image-space reference classifier: strided conv stem down to latent resolution, then the latent head."""

    def __init__(self, hidden: int = 32, compression: int = 8):
        super().__init__()
        self.hidden = hidden
        self.compression = compression
        layers: list[nn.Module] = [nn.Conv2d(1, 16, 3, padding=1), nn.SiLU()]
        ch = 16
        for _ in range(int(np.log2(compression))):
            layers += [nn.Conv2d(ch, hidden, 4, stride=2, padding=1), nn.GroupNorm(4, hidden), nn.SiLU()]
            ch = hidden
        self.stem = nn.Sequential(*layers)
        self.latent = LatentClassifier(hidden, hidden)

    def forward(self, x):
        return self.latent(self.stem(x))


def stage_baselines(run: RunDir, cfg: RunConfig, data: PairDataset) -> dict:
    """Reference models for the ablation tables: from-scratch latent classifiers and image-space classifiers."""
    _require(run, "baselines")
    vq = load_vqvae(run, cfg)
    pairs, real, synth = _training_sets(run, cfg, data, vq)
    ccfg = cfg.classifier
    curves = {}
    torch.manual_seed(cfg.seed + 7)
    s0 = LatentClassifier(vq.latent_channels, cfg.vqvae.classifier_hidden)
    s12 = LatentClassifier(vq.latent_channels, cfg.vqvae.classifier_hidden)
    curves["scratch0"] = train_classifier(s0, real, ccfg, cfg.seed + 11)
    curves["scratch12"] = train_classifier(s12, synth, ccfg, cfg.seed + 12)
    _save_classifier(run, "scratch0", s0, cfg, curves["scratch0"], provenance="real")
    _save_classifier(run, "scratch12", s12, cfg, curves["scratch12"], provenance="synthetic")
    for name, labels in (("image_y0", pairs["y0"]), ("image_y12", pairs["y12"])):
        torch.manual_seed(cfg.seed + 13)
        model = ImageClassifier(cfg.vqvae.classifier_hidden, cfg.vqvae.compression)
        ds = ClassifierTrainingSet(pairs["x0"], labels, pairs["progressed"], "real")
        curves[name] = train_classifier(model, ds, ccfg, cfg.seed + 14, epochs=ccfg.image_classifier_epochs)
        _save_classifier(run, name, model, cfg, curves[name], provenance="real", target=name[-3:])
    return curves


STAGE_FUNCS = {"vqvae": stage_vqvae, "diffusion": stage_diffusion, "classifiers": stage_classifiers,
               "baselines": stage_baselines}


def run_stage(stage: str, run: RunDir, cfg: RunConfig, data: PairDataset):
    if stage not in STAGE_FUNCS:
        raise ValueError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
    _require(run, stage)
    run.prepare(cfg)
    t0 = time.perf_counter()
    out = STAGE_FUNCS[stage](run, cfg, data)
    log.info("stage %s finished in %.1fs", stage, time.perf_counter() - t0)
    return out
