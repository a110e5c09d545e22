"""Shared fixtures: a tiny phantom cohort and a fully trained tiny run."""

from __future__ import annotations

import pytest

from kneerisk.config import config_from_dict
from kneerisk.dataset import build_dataset
from kneerisk.pipeline import STAGES, RunDir, run_stage

TINY = {
    "seed": 3,
    "dataset": {"n_train": 8, "n_val": 2, "n_test": 16, "landmark_fraction": 0.5},
    "vqvae": {"epochs": 2, "batch_size": 16, "lr": 0.002, "codebook_size": 32, "hidden_channels": 16,
              "classifier_hidden": 8},
    "diffusion": {"timesteps": 50, "sample_steps": 5, "epochs": 2, "batch_size": 16, "lr": 0.001,
                  "base_channels": 16},
    "classifier": {"epochs": 1, "batch_size": 8, "lr": 0.001, "image_classifier_epochs": 1},
    "risk": {"steps": 5},
    "eval": {"bench_steps": [5, 50], "bench_samples": 1},
}


@pytest.fixture
def tiny_cfg():
    return config_from_dict(TINY)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    cfg = config_from_dict(TINY)
    out = tmp_path_factory.mktemp("tiny_data")
    return out, build_dataset(cfg.dataset, out, seed=cfg.seed)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory, tiny_data):
    """All four training stages on the tiny cohort (about ten seconds)."""
    cfg = config_from_dict(TINY)
    run = RunDir(tmp_path_factory.mktemp("runs") / "tiny")
    _, data = tiny_data
    for stage in STAGES:
        run_stage(stage, run, cfg, data)
    return run, cfg, data


# ------------------------------------------------------- acceptance summary

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
    _CRITERIA[number] = (title, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        line = f"criterion {number:>2}: {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
