"""``kneerisk`` command line: gen-data, train, estimate, eval.

Exit codes: 0 success, 1 validation failure (bad config, input or missing
prerequisite), 2 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from kneerisk import ablation
from kneerisk.checkpoint import CheckpointError
from kneerisk.config import ConfigError, RunConfig, dump_config, load_config
from kneerisk.dataset import ManifestError, build_dataset, load_manifest, manifest_images, read_png
from kneerisk.diffusion import make_schedule
from kneerisk.pipeline import STAGES, RunDir, StageOrderError, load_models, load_unet, run_stage
from kneerisk.risk import PipelineStageError, estimate_risk_batch
from kneerisk.viz import save_overlay

log = logging.getLogger("kneerisk")

EXIT_OK, EXIT_INVALID, EXIT_INTERNAL = 0, 1, 2


class CliError(Exception):
    """Validation failure reported to the user with exit code 1."""


# ------------------------------------------------------------------ helpers


def _config(args, run: RunDir | None = None) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    elif run is not None and (run.root / "config.yaml").is_file():
        cfg = load_config(run.root / "config.yaml")
    else:
        cfg = RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _writable_dir(path: str | Path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
        probe = p / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"output directory {p} is not writable: {exc.strerror or exc}") from exc
    return p


def _load_data(path: str | Path):
    p = Path(path)
    manifest = p / "manifest.csv" if p.is_dir() else p
    if not manifest.is_file():
        raise CliError(f"no manifest at {manifest}; run `kneerisk gen-data` first")
    return load_manifest(manifest)


def _parse_steps(text: str) -> list:
    try:
        steps = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise CliError(f"--steps must be comma-separated integers, got {text!r}") from exc
    if not steps or min(steps) < 1:
        raise CliError("--steps needs at least one positive step count")
    return steps


# ----------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _writable_dir(args.out)
    data = build_dataset(cfg.dataset, out, seed=cfg.seed)
    dump_config(cfg, out / "config.yaml")
    counts = {s: len(data.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {out / 'manifest.csv'}: {len(data.samples)} pairs "
          f"(train {counts['train']}, val {counts['val']}, test {counts['test']})")
    return EXIT_OK


def cmd_train(args) -> int:
    run = RunDir(args.run)
    cfg = _config(args)
    stages = [s for s in STAGES] if args.stage == "all" else [args.stage]
    data = _load_data(args.data)
    _writable_dir(run.root)
    for stage in stages:
        curve = run_stage(stage, run, cfg, data)
        print(f"{stage}: done ({run.checkpoints})")
        if isinstance(curve, list) and curve:
            last = {k: v for k, v in curve[-1].items() if k != "epoch"}
            print("  final " + " ".join(f"{k}={v:.6g}" for k, v in last.items() if isinstance(v, float)))
    return EXIT_OK


def _estimate_inputs(args) -> list:
    if args.image:
        path = Path(args.image)
        if not path.is_file():
            raise CliError(f"image {path} not found")
        img = read_png(path)
        if img.ndim != 2 or img.shape[0] != img.shape[1]:
            raise CliError(f"image {path} must be a square grayscale image, got shape {img.shape}")
        return [(path.stem, img)]
    return manifest_images(args.manifest)


def cmd_estimate(args) -> int:
    run = RunDir(args.run)
    cfg = _config(args, run)
    inputs = _estimate_inputs(args)
    out = _writable_dir(args.out or run.images)
    models = _load_models(run, cfg)
    upscale = args.upscale or cfg.risk.upscale
    steps = args.steps or cfg.risk.steps
    results_path = out / "results.jsonl"
    with open(results_path, "w") as fh:
        for start in range(0, len(inputs), args.batch):
            chunk = inputs[start:start + args.batch]
            x = np.stack([img for _, img in chunk])
            est, art = estimate_risk_batch(x, models, upscale, steps, cfg.seed + start)
            for (rid, img), e, a in zip(chunk, est, art):
                stem = rid.replace("@", "_m").replace("/", "_")
                cur = save_overlay(out / f"{stem}_current.png", img, a.landmarks0)
                fut = save_overlay(out / f"{stem}_future.png", a.future_image, a.landmarks12)
                rec = {"id": rid, **e.to_record(), "config_hash": cfg.config_hash(), "seed": cfg.seed,
                       "current_png": cur.name, "future_png": fut.name}
                fh.write(json.dumps(rec) + "\n")
    print(f"wrote {len(inputs)} record(s) to {results_path}")
    return EXIT_OK


def _load_models(run: RunDir, cfg: RunConfig):
    for stage, marker in (("vqvae", "vqvae"), ("diffusion", "diffusion"), ("classifiers", "clf12")):
        if not run.has(marker):
            raise CliError(f"missing {stage} checkpoint in {run.checkpoints}; run `kneerisk train {stage}`")
    try:
        return load_models(run, cfg)
    except CheckpointError as exc:
        raise PipelineStageError("load_checkpoints", exc) from exc


def cmd_eval(args) -> int:
    run = RunDir(args.run)
    cfg = _config(args, run)
    if args.task == "bench":
        return _eval_bench(args, run, cfg)
    data = _load_data(args.data)
    out = _writable_dir(args.out or run.reports)
    tasks = ablation.TASKS if args.task == "ablation" else (args.task,)
    reports, roc = ablation.run_ablation(run, cfg, data, tasks, require_all=not args.allow_partial)
    ablation.write_reports(reports, roc, out)
    for task in tasks:
        rows = [r for r in reports if r.task == task]
        if rows:
            print(f"[{task}]")
            print(ablation.render_table(rows))
    warnings = _trend_warnings(reports)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    if warnings and (args.strict or cfg.eval.strict):
        return EXIT_INVALID
    return EXIT_OK


def _trend_warnings(reports) -> list:
    scores = {(r.task, k): r.score for r in reports for k, lab, _ in ablation.TABLES[r.task] if lab == r.row}
    checks = [(("classification", "fine_tune"), ("classification", "vqvae_classifier")),
              (("risk", "image_space_gt"), ("risk", "multitask"))]
    out = []
    for hi, lo in checks:
        if hi in scores and lo in scores and scores[hi] < scores[lo]:
            out.append(f"{'/'.join(hi)} ({scores[hi]:.3f}) < {'/'.join(lo)} ({scores[lo]:.3f})")
    return out


def _eval_bench(args, run: RunDir, cfg: RunConfig) -> int:
    if not run.has("diffusion"):
        raise CliError(f"missing diffusion checkpoint in {run.checkpoints}")
    try:
        unet = load_unet(run, ema=True)
    except CheckpointError as exc:
        raise PipelineStageError("diffusion", exc) from exc
    steps = _parse_steps(args.steps) if args.steps else list(cfg.eval.bench_steps)
    n = cfg.eval.bench_samples if args.samples is None else args.samples
    shape = (unet.cfg.latent_channels, cfg.dataset.phantom.image_size // cfg.vqvae.compression,
             cfg.dataset.phantom.image_size // cfg.vqvae.compression)
    rows = ablation.benchmark_inference(unet, make_schedule(cfg.diffusion.timesteps), steps, n, shape, cfg.seed,
                                       repeats=args.repeats)
    out = _writable_dir(args.out or run.reports)
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["steps", "median_seconds"])
        for r in rows:
            w.writerow([r["steps"], f"{r['median_seconds']:.6f}"])
            print(f"steps={r['steps']:>5}  median {r['median_seconds']:.4f} s/sample")
    have = {r["steps"] for r in rows}
    if {100, 1000} <= have:
        ratio = ablation.timing_ratio(rows)
        ok = 0.08 <= ratio <= 0.15
        print(f"time(100)/time(1000) = {ratio:.4f} ({'within' if ok else 'outside'} [0.08, 0.15])")
        if not ok and (args.strict or cfg.eval.strict):
            return EXIT_INVALID
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kneerisk", description="Knee OA progression risk from a single radiograph.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic phantom dataset")
    g.add_argument("--config", help="YAML run config (defaults: 76 patients)")
    g.add_argument("--out", required=True, help="output directory for images and manifest")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one stage (stages run in order: vqvae, diffusion, classifiers)")
    t.add_argument("stage", choices=[*STAGES, "all"])
    t.add_argument("--config")
    t.add_argument("--data", required=True, help="dataset directory or manifest.csv")
    t.add_argument("--run", required=True, help="run directory, e.g. runs/<name>")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("estimate", help="progression risk for one image or a manifest")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", help="16-bit or 8-bit grayscale PNG")
    src.add_argument("--manifest", help="manifest CSV; one record per row, order preserved")
    e.add_argument("--run", required=True)
    e.add_argument("--config", help="defaults to the run's config.yaml")
    e.add_argument("--out", help="defaults to <run>/images")
    e.add_argument("--upscale", action="store_true", help="2x bicubic upscale of z0 before classification")
    e.add_argument("--steps", type=int, help="sampling steps (default from config)")
    e.add_argument("--batch", type=int, default=64)
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_estimate)

    v = sub.add_parser("eval", help="evaluation reports and timing benchmark")
    v.add_argument("task", choices=["classification", "prediction", "risk", "ablation", "bench"])
    v.add_argument("--run", required=True)
    v.add_argument("--data", help="dataset directory (not needed for bench)")
    v.add_argument("--config")
    v.add_argument("--out", help="defaults to <run>/reports")
    v.add_argument("--steps", help="bench: comma-separated step counts, e.g. 100,1000")
    v.add_argument("--samples", type=int, help="bench: samples per step count")
    v.add_argument("--repeats", type=int, default=1, help="bench: best-of-N runs per sample")
    v.add_argument("--allow-partial", action="store_true", help="skip rows whose checkpoints are missing")
    v.add_argument("--strict", action="store_true", help="directional trend and timing warnings fail the run")
    v.add_argument("--seed", type=int)
    v.set_defaults(func=cmd_eval)
    return p


VALIDATION_ERRORS = (CliError, ConfigError, ManifestError, StageOrderError, ablation.AblationBlockedError,
                     CheckpointError, PipelineStageError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    if args.command == "eval" and args.task != "bench" and not args.data:
        parser.error("eval needs --data for this task")
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - top-level guard
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
