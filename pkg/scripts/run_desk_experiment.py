"""Train and evaluate the desk-scale pipeline for several seeds.

Example:
    python scripts/run_desk_experiment.py --out runs/desk --seeds 0 1 2
"""

from __future__ import annotations

import argparse
import json
import logging
import statistics
from pathlib import Path

from kneerisk.config import load_config
from kneerisk.experiment import run_seeds

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=str(ROOT / "configs" / "desk.yaml"))
    parser.add_argument("--out", default="runs/desk")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--no-baselines", action="store_true", help="skip the image-space and from-scratch rows")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    results = run_seeds(load_config(args.config), args.out, args.seeds, baselines=not args.no_baselines)
    summary = {
        key: statistics.median(r[key] for r in results)
        for key in ("pipeline_seconds", "risk_auc", "classification_mauc", "frozen_classification_mauc",
                    "gt_future_risk_auc") if key in results[0]
    }
    for r in results:
        print(f"seed {r['seed']}: risk AUC {r['risk_auc']:.3f}, mAUC {r['classification_mauc']:.3f}, "
              f"{r['pipeline_seconds'] / 60:.1f} min")
    print("median:", json.dumps(summary, indent=1))
    (Path(args.out) / "summary.json").write_text(json.dumps({"seeds": results, "median": summary}, indent=1))


if __name__ == "__main__":
    main()
