"""Evaluation on the test split: the three ablation tables and the timing benchmark."""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from kneerisk.classifier import MultiTaskClassifier, classify, landmark_head
from kneerisk.config import RunConfig
from kneerisk.dataset import PairDataset
from kneerisk.diffusion import NoiseSchedule, UNet, make_schedule, sample_all, sample_future
from kneerisk.metrics import MetricReport, auc_binary, landmark_error, mauc, roc_points, transition_breakdown
from kneerisk.pipeline import RunDir, load_classifier, load_unet, load_vqvae, stack_pairs
from kneerisk.risk import risk_terms, upscale_latent
from kneerisk.vqvae import encode_all

# (key, label, checkpoints needed beyond vqvae + diffusion)
TABLES = {
    "classification": [
        ("image_space", "Image space p(y0|x0)", ["image_y0"]),
        ("latent_space", "Latent space p(y0|z0)", ["scratch0"]),
        ("vqvae_classifier", "+ VQ-VAE classifier training", []),
        ("fine_tune", "+ fine-tune VQ-VAE classifier", ["clf0_cls"]),
    ],
    "prediction": [
        ("image_space", "Image space p(y12|x0)", ["image_y12"]),
        ("latent_space", "Latent space p(y12|z0)", ["scratch12"]),
        ("vqvae_classifier", "+ VQ-VAE classifier training", []),
        ("fine_tune", "+ fine-tune VQ-VAE classifier", ["clf12"]),
    ],
    "risk": [
        ("image_space_gt", "Image space (ground truth x12) p(y12>y0|x0,x12)", ["image_y0"]),
        ("latent_space", "Latent space p(y12>y0|z0,z12_hat)", ["scratch0", "scratch12"]),
        ("vqvae_classifier", "+ VQ-VAE classifier training", []),
        ("fine_tune", "+ fine-tune VQ-VAE classifier", ["clf0_cls", "clf12"]),
        ("multitask", "+ multi-task training (classifier+landmark localisation)", ["clf0_mts", "clf12"]),
        ("upscale", "+ 2x upscale z0", ["clf0_mts", "clf12"]),
    ],
}
TASKS = tuple(TABLES)


class AblationBlockedError(RuntimeError):
    def __init__(self, blocked: dict):
        lines = [f"{task}/{row}: missing {', '.join(miss)}" for (task, row), miss in blocked.items()]
        super().__init__("blocked ablation rows:\n  " + "\n  ".join(lines))
        self.blocked = blocked


@dataclass
class EvalContext:
    """Test-split tensors shared by all rows; futures are sampled once per run."""

    pairs: dict
    z0: torch.Tensor
    z12_hat: torch.Tensor
    risk_mask: np.ndarray  # pairs starting at month 0
    image_size: int


def _missing(run: RunDir, names) -> list:
    return [n for n in ["vqvae", "diffusion", *names] if not run.has(n)]


def blocked_rows(run: RunDir, tasks=TASKS) -> dict:
    out = {}
    for task in tasks:
        for key, _, needs in TABLES[task]:
            miss = _missing(run, needs)
            if miss:
                out[(task, key)] = miss
    return out


def build_context(run: RunDir, cfg: RunConfig, data: PairDataset, split: str = "test") -> EvalContext:
    vq = load_vqvae(run, cfg)
    samples = data.split(split)
    if not samples:
        raise ValueError(f"split {split!r} has no pairs")
    pairs = stack_pairs(samples)
    z0 = encode_all(pairs["x0"], vq)
    unet = load_unet(run, ema=True)
    z12_hat = sample_all(z0, unet, make_schedule(cfg.diffusion.timesteps), cfg.risk.steps, cfg.seed + 1000)
    mask = np.array([s.t0_months == 0 for s in samples])
    return EvalContext(pairs, z0, z12_hat, mask, data.image_size or pairs["x0"].shape[-1])


def _probs(model, z) -> np.ndarray:
    p = classify(z, model)
    return p / p.sum(-1, keepdims=True)


def _row_probs(run: RunDir, cfg: RunConfig, ctx: EvalContext, task: str, key: str):
    vq_clf = load_vqvae(run, cfg).classifier
    x0, x12 = ctx.pairs["x0"], ctx.pairs["x12"]
    if task == "classification":
        model = {"image_space": "image_y0", "latent_space": "scratch0", "fine_tune": "clf0_cls"}.get(key)
        inp = x0 if key == "image_space" else ctx.z0
        return _probs(vq_clf if model is None else load_classifier(run, model), inp)
    if task == "prediction":
        model = {"image_space": "image_y12", "latent_space": "scratch12", "fine_tune": "clf12"}.get(key)
        inp = x0 if key == "image_space" else ctx.z12_hat
        return _probs(vq_clf if model is None else load_classifier(run, model), inp)
    # risk rows return the current/future distribution pair
    if key == "image_space_gt":
        m = load_classifier(run, "image_y0")
        return _probs(m, x0), _probs(m, x12)
    if key == "latent_space":
        return _probs(load_classifier(run, "scratch0"), ctx.z0), _probs(load_classifier(run, "scratch12"), ctx.z12_hat)
    if key == "vqvae_classifier":
        return _probs(vq_clf, ctx.z0), _probs(vq_clf, ctx.z12_hat)
    clf12 = load_classifier(run, "clf12")
    if key == "fine_tune":
        return _probs(load_classifier(run, "clf0_cls"), ctx.z0), _probs(clf12, ctx.z12_hat)
    clf0 = load_classifier(run, "clf0_mts")
    z0 = upscale_latent(ctx.z0, 2).float() if key == "upscale" else ctx.z0
    return _probs(clf0, z0), _probs(clf12, ctx.z12_hat)


def _landmark_rmse(run: RunDir, ctx: EvalContext) -> float | None:
    if not run.has("clf0_mts"):
        return None
    lm = ctx.pairs["landmarks"].numpy()
    have = ~np.isnan(lm).any(axis=(1, 2))
    if not have.any():
        return None
    model = load_classifier(run, "clf0_mts")
    assert isinstance(model, MultiTaskClassifier)
    preds = landmark_head(ctx.z0[torch.as_tensor(have)], model)
    errs = [landmark_error(p.coords, t)[1] for p, t in zip(preds, lm[have])]
    return float(np.mean(errs))


def run_ablation(run: RunDir, cfg: RunConfig, data: PairDataset, tasks=TASKS, require_all: bool = True,
                 ctx: EvalContext | None = None) -> tuple[list, dict]:
    """Evaluate every available row of the requested tables.

    Returns ``(reports, roc)`` where ``roc`` maps risk-row keys to ROC points.
    With ``require_all`` any row lacking a checkpoint raises
    :class:`AblationBlockedError` naming the blocked rows.
    """
    blocked = blocked_rows(run, tasks)
    if blocked and require_all:
        raise AblationBlockedError(blocked)
    if _missing(run, []):
        raise AblationBlockedError({(t, "*"): _missing(run, []) for t in tasks})
    ctx = ctx or build_context(run, cfg, data)
    y0 = ctx.pairs["y0"].numpy()
    y12 = ctx.pairs["y12"].numpy()
    reports, roc = [], {}
    lm_rmse = _landmark_rmse(run, ctx)
    for task in tasks:
        for key, label, _ in TABLES[task]:
            if (task, key) in blocked:
                continue
            if task == "risk":
                p0, p12 = _row_probs(run, cfg, ctx, task, key)
                m = ctx.risk_mask
                inc, _ = risk_terms(p0[m], p12[m])
                truth = (y12[m] > y0[m]).astype(int)
                score = auc_binary(inc, truth)
                reports.append(MetricReport(task, label, score,
                                            per_transition=transition_breakdown(y0[m], y12[m], inc),
                                            landmark_rmse_px=lm_rmse if key in ("multitask", "upscale") else None))
                roc[key] = roc_points(inc, truth)
            else:
                probs = _row_probs(run, cfg, ctx, task, key)
                labels = y0 if task == "classification" else y12
                score, per_class = mauc(probs, labels)
                reports.append(MetricReport(task, label, score, [float(v) for v in per_class]))
    return reports, roc


def row_score(reports: list, task: str, key: str) -> float:
    label = {k: lab for k, lab, _ in TABLES[task]}[key]
    for r in reports:
        if r.task == task and r.row == label:
            return r.score
    raise KeyError(f"{task}/{key} not in reports")


def write_reports(reports: list, roc: dict, out_dir: str | Path) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    by_task: dict[str, list] = {}
    for r in reports:
        by_task.setdefault(r.task, []).append(r)
    for task, rows in by_task.items():
        path = out / f"{task}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "task", "mauc"])
            for r in rows:
                w.writerow([r.row, r.task, f"{r.score:.6f}"])
        written.append(path)
        (out / f"{task}.txt").write_text(render_table(rows))
        if task == "risk":
            with open(out / "risk_transitions.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["row", "transition", "count", "mean_risk"])
                for r in rows:
                    for k, v in r.per_transition.items():
                        w.writerow([r.row, k, v["count"], f"{v['mean_risk']:.6f}"])
    for key, pts in roc.items():
        with open(out / f"roc_{key}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fpr", "tpr"])
            for thr, fpr, tpr in pts:
                w.writerow([f"{thr:.6g}", f"{fpr:.6f}", f"{tpr:.6f}"])
    return written


def render_table(rows: list) -> str:
    width = max(len(r.row) for r in rows)
    head = f"{'Experiment':<{width}} | mAUC"
    lines = [head, "-" * len(head)]
    lines += [f"{r.row:<{width}} | {r.score:.3f}" for r in rows]
    extra = [r for r in rows if r.landmark_rmse_px is not None]
    if extra:
        lines.append(f"(landmark error on test x0: {extra[0].landmark_rmse_px:.2f} px)")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- timing


def benchmark_inference(unet: UNet, schedule: NoiseSchedule, steps_list, n_samples: int,
                        latent_shape=(4, 8, 8), seed: int = 0, repeats: int = 1) -> list:
    """Median per-sample sampling wall time for each step count.

    Step counts are interleaved per sample so that slow drift in machine
    speed affects all of them alike. Each (sample, steps) cell keeps the
    fastest of ``repeats`` runs; the table reports the median over samples.
    """
    if n_samples <= 0:
        return []
    gen = torch.Generator().manual_seed(seed)
    conds = torch.randn((n_samples, *latent_shape), generator=gen)
    sample_future(conds[0], unet, schedule, min(steps_list), seed)  # warm-up
    best = {s: [float("inf")] * n_samples for s in steps_list}
    for i in range(n_samples):
        for _ in range(repeats):
            for steps in steps_list:
                t0 = time.perf_counter()
                sample_future(conds[i], unet, schedule, steps, seed + i)
                best[steps][i] = min(best[steps][i], time.perf_counter() - t0)
    return [{"steps": int(s), "median_seconds": statistics.median(best[s])} for s in steps_list]


def timing_ratio(rows: list, fast: int = 100, slow: int = 1000) -> float:
    t = {r["steps"]: r["median_seconds"] for r in rows}
    return t[fast] / t[slow]
