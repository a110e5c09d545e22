"""End-to-end desk experiment: generate data, train all stages, evaluate."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import replace
from pathlib import Path

from kneerisk.ablation import build_context, row_score, run_ablation, write_reports
from kneerisk.config import RunConfig
from kneerisk.dataset import build_dataset
from kneerisk.pipeline import RunDir, run_stage

log = logging.getLogger("kneerisk")


def headline_row(cfg: RunConfig) -> str:
    return "upscale" if cfg.risk.upscale else "multitask" if cfg.classifier.multitask else "fine_tune"


def run_experiment(cfg: RunConfig, workdir: str | Path, baselines: bool = True) -> dict:
    """Train and evaluate one seed; returns timings and the key scores."""
    work = Path(workdir)
    t0 = time.perf_counter()
    data = build_dataset(cfg.dataset, work / "data", seed=cfg.seed)
    run = RunDir(work / "run")
    timings = {"data": time.perf_counter() - t0}
    stages = ["vqvae", "diffusion", "classifiers"] + (["baselines"] if baselines else [])
    for stage in stages:
        t = time.perf_counter()
        run_stage(stage, run, cfg, data)
        timings[stage] = time.perf_counter() - t
    pipeline_seconds = time.perf_counter() - t0
    t = time.perf_counter()
    ctx = build_context(run, cfg, data)
    reports, roc = run_ablation(run, cfg, data, require_all=baselines, ctx=ctx)
    write_reports(reports, roc, run.reports)
    timings["eval"] = time.perf_counter() - t
    head = headline_row(cfg)
    result = {
        "seed": cfg.seed,
        "pipeline_seconds": pipeline_seconds - timings.get("baselines", 0.0),
        "timings": timings,
        "risk_auc": row_score(reports, "risk", head),
        "classification_mauc": row_score(reports, "classification", "fine_tune"),
        "frozen_classification_mauc": row_score(reports, "classification", "vqvae_classifier"),
        "rows": {f"{r.task}/{r.row}": r.score for r in reports},
        "n_test_risk_pairs": int(ctx.risk_mask.sum()),
    }
    if baselines:
        result["gt_future_risk_auc"] = row_score(reports, "risk", "image_space_gt")
    (run.reports / "experiment.json").write_text(json.dumps(result, indent=1))
    return result


def run_seeds(cfg: RunConfig, workdir: str | Path, seeds=(0, 1, 2), baselines: bool = True) -> list:
    return [run_experiment(replace(cfg, seed=s), Path(workdir) / f"seed{s}", baselines) for s in seeds]
