import json
import os
import shutil

import numpy as np
import pytest
from PIL import Image

from kneerisk.cli import main
from kneerisk.config import dump_config
from kneerisk.dataset import write_png16


@pytest.fixture
def cfg_file(tmp_path, tiny_cfg):
    path = tmp_path / "tiny.yaml"
    dump_config(tiny_cfg, path)
    return path


def test_gen_data_default_and_deterministic(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "a"), "--seed", "7"]) == 0
    assert main(["gen-data", "--out", str(tmp_path / "b"), "--seed", "7"]) == 0
    a = (tmp_path / "a" / "manifest.csv").read_text()
    assert a == (tmp_path / "b" / "manifest.csv").read_text()
    assert len({line.split(",")[0] for line in a.splitlines()[1:]}) == 76


def test_gen_data_unwritable(tmp_path, capsys):
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    target = blocker / "data"
    assert main(["gen-data", "--out", str(target)]) == 1
    assert str(target) in capsys.readouterr().err


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_gen_data_readonly_dir(tmp_path, capsys):
    ro = tmp_path / "ro"
    ro.mkdir()
    ro.chmod(0o500)
    assert main(["gen-data", "--out", str(ro)]) == 1
    assert str(ro) in capsys.readouterr().err


def test_invalid_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("vqvae:\n  alpah: 1\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == 1
    assert "alpah" in capsys.readouterr().err


def test_train_requires_prior_stage(tmp_path, tiny_data, cfg_file, capsys):
    data_dir, _ = tiny_data
    code = main(["train", "diffusion", "--config", str(cfg_file), "--data", str(data_dir),
                 "--run", str(tmp_path / "r")])
    assert code == 1
    assert "vqvae" in capsys.readouterr().err


def _copy_run(tiny_run, dest):
    run, _, _ = tiny_run
    shutil.copytree(run.root, dest)
    return dest


def test_estimate_single_image(tmp_path, tiny_run, tiny_data):
    run_dir = _copy_run(tiny_run, tmp_path / "run")
    img = tiny_data[1].split("test")[0].x0
    write_png16(img, tmp_path / "knee.png")
    out = tmp_path / "out"
    for flag, expect in (([], False), (["--upscale"], True)):
        assert main(["estimate", "--image", str(tmp_path / "knee.png"), "--run", str(run_dir),
                     "--out", str(out), *flag]) == 0
        recs = [json.loads(line) for line in (out / "results.jsonl").read_text().splitlines()]
        assert len(recs) == 1 and recs[0]["used_upscale"] is expect
        assert abs(recs[0]["p_increase"] + recs[0]["p_stable"] - 1) < 1e-9
    pngs = sorted(p.name for p in out.glob("*.png"))
    assert pngs == ["knee_current.png", "knee_future.png"]
    assert Image.open(out / "knee_future.png").size == (64, 64)


def test_estimate_manifest_preserves_order(tmp_path, tiny_run, tiny_data):
    run_dir = _copy_run(tiny_run, tmp_path / "run")
    manifest = tiny_data[0] / "manifest.csv"
    out = tmp_path / "out"
    assert main(["estimate", "--manifest", str(manifest), "--run", str(run_dir), "--out", str(out),
                 "--batch", "7"]) == 0
    rows = manifest.read_text().splitlines()[1:]
    ids = [json.loads(line)["id"] for line in (out / "results.jsonl").read_text().splitlines()]
    assert ids == [f"{r.split(',')[0]}@{r.split(',')[1]}" for r in rows]
    assert len(list(out.glob("*.png"))) == 2 * len(rows)


def test_estimate_corrupt_checkpoint(tmp_path, tiny_run, tiny_data):
    run_dir = _copy_run(tiny_run, tmp_path / "run")
    (run_dir / "checkpoints" / "diffusion" / "weights.npz").write_bytes(b"broken")
    write_png16(np.zeros((64, 64)), tmp_path / "k.png")
    code = main(["estimate", "--image", str(tmp_path / "k.png"), "--run", str(run_dir)])
    assert code == 1


def test_estimate_missing_checkpoint(tmp_path, capsys):
    write_png16(np.zeros((64, 64)), tmp_path / "k.png")
    assert main(["estimate", "--image", str(tmp_path / "k.png"), "--run", str(tmp_path / "none")]) == 1
    assert "vqvae" in capsys.readouterr().err


def test_eval_ablation_and_bench(tmp_path, tiny_run, tiny_data, capsys):
    run_dir = _copy_run(tiny_run, tmp_path / "run")
    assert main(["eval", "ablation", "--run", str(run_dir), "--data", str(tiny_data[0])]) == 0
    reports = run_dir / "reports"
    for task in ("classification", "prediction", "risk"):
        assert (reports / f"{task}.csv").read_text().startswith("row,task,mauc")
    assert len((reports / "risk.csv").read_text().splitlines()) == 7
    assert main(["eval", "bench", "--run", str(run_dir), "--steps", "5,50", "--samples", "1"]) == 0
    assert (reports / "bench.csv").read_text().startswith("steps,median_seconds")


def test_eval_metric_csvs_byte_identical(tmp_path, tiny_run, tiny_data):
    run_dir = _copy_run(tiny_run, tmp_path / "run")
    outs = []
    for name in ("a", "b"):
        assert main(["eval", "risk", "--run", str(run_dir), "--data", str(tiny_data[0]),
                     "--out", str(tmp_path / name)]) == 0
        outs.append((tmp_path / name / "risk.csv").read_bytes())
    assert outs[0] == outs[1]


def test_eval_missing_checkpoint(tmp_path, tiny_data):
    assert main(["eval", "risk", "--run", str(tmp_path / "none"), "--data", str(tiny_data[0])]) == 1
    assert main(["eval", "bench", "--run", str(tmp_path / "none")]) == 1
