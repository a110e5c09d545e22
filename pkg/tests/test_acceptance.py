"""Acceptance criteria 1-11, each at its stated tolerance.

Criteria 9-11 train the desk-scale pipeline (configs/desk.yaml) for three
seeds; expect roughly 30 minutes on one CPU core. Set
``KNEERISK_STRICT=1`` to turn the directional trend warnings of criterion 10
into failures.
"""

from __future__ import annotations

import os
import statistics
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
import torch

from kneerisk.ablation import benchmark_inference, timing_ratio
from kneerisk.classifier import mts_loss, soft_argmax_2d
from kneerisk.config import VqVaeConfig, load_config
from kneerisk.diffusion import EmaState, add_noise, ema_update, make_schedule, predict_from_v, sample_future, v_target
from kneerisk.experiment import run_seeds
from kneerisk.metrics import auc_binary, mauc
from kneerisk.pipeline import RunDir, load_unet
from kneerisk.risk import progression_risk, risk_terms
from kneerisk.vqvae import VQVAE, combine_vqvae_terms, quantize, vqvae_loss

from test_classifier import brute_force_expectation
from test_diffusion import _OracleNet
from test_metrics import brute_auc
from test_risk import enumerate_risk
from test_vqvae import brute_force_nearest

ROOT = Path(__file__).resolve().parents[1]
STRICT = os.environ.get("KNEERISK_STRICT", "0") == "1"
SEEDS = (0, 1, 2)


def _fd_check(f, x: torch.Tensor, analytic: torch.Tensor, rel: float, h: float = 1e-6) -> float:
    """Largest relative gap between ``analytic`` and central differences of scalar ``f`` at ``x``."""
    worst = 0.0
    for idx in np.ndindex(*x.shape):
        up, down = x.detach().clone(), x.detach().clone()
        up[idx] += h
        down[idx] -= h
        fd = (f(up) - f(down)).item() / (2 * h)
        gap = abs(analytic[idx].item() - fd) / max(abs(fd), 1e-8)
        worst = max(worst, gap)
    assert worst <= rel, f"finite-difference mismatch {worst:.2e} > {rel}"
    return worst


@pytest.mark.criterion(1, "risk aggregation equals 25-term enumeration; increase + stable = 1")
def test_criterion_1_risk_oracle(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    p0 = rng.dirichlet(np.ones(5), size=1000)
    p12 = rng.dirichlet(np.ones(5), size=1000)
    worst = 0.0
    for a, b in zip(p0, p12):
        est = progression_risk(a, b)
        inc, stable = enumerate_risk(a, b)
        worst = max(worst, abs(est.p_increase - inc), abs(est.p_stable - stable))
        assert abs(est.p_increase + est.p_stable - 1) < 1e-12
    inc, stable = risk_terms(p0, p12)
    assert np.abs(inc + stable - 1).max() < 1e-12
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max error {worst:.1e}, {elapsed:.2f}s")
    assert worst < 1e-12
    assert elapsed < 1.0


@pytest.mark.criterion(2, "v-prediction round trip and variance-preserving schedule")
def test_criterion_2_v_algebra(record_property):
    t0 = time.perf_counter()
    sched = make_schedule(1000)
    assert np.abs(sched.alphas**2 + sched.sigmas**2 - 1).max() < 1e-9
    rng = np.random.default_rng(2)
    worst = 0.0
    for t in rng.permutation(np.arange(1, 1001)):  # 1000 draws, every t once
        z, e = rng.normal(size=(4, 8, 8)), rng.normal(size=(4, 8, 8))
        z_hat, e_hat = predict_from_v(add_noise(z, e, int(t), sched), v_target(z, e, int(t), sched), int(t), sched)
        worst = max(worst, np.abs(z_hat - z).max(), np.abs(e_hat - e).max())
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max round-trip error {worst:.1e}, {elapsed:.2f}s")
    assert worst < 1e-6
    assert elapsed < 5.0


@pytest.mark.criterion(3, "quantizer equals exhaustive search; straight-through gradient is identity")
def test_criterion_3_quantizer(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    for case in range(1000):
        k, d = int(rng.integers(1, 16)), int(rng.integers(1, 6))
        codebook = rng.normal(size=(k, d)).astype(np.float32)
        if case % 5 == 0:
            codebook[-1] = codebook[0]
        z = rng.normal(size=(1, d, 2, 2)).astype(np.float32)
        if case % 7 == 0:
            z[0, :, 0, 0] = codebook[int(rng.integers(0, k))]
        q = quantize(torch.from_numpy(z), torch.from_numpy(codebook))
        flat = z.transpose(0, 2, 3, 1).reshape(-1, d)
        assert np.array_equal(q.indices.flatten().numpy(), brute_force_nearest(flat, codebook))
    codebook = torch.randn(16, 3, dtype=torch.float64)
    z = torch.randn(1, 3, 2, 2, dtype=torch.float64, requires_grad=True)
    (quantize(z, codebook).z_q ** 2).sum().backward()
    zq = quantize(z.detach(), codebook).z_q
    worst = _fd_check(lambda v: (v**2).sum(), zq, z.grad, rel=1e-4)
    elapsed = time.perf_counter() - t0
    record_property("detail", f"1000 cases exact, FD gap {worst:.1e}, {elapsed:.2f}s")
    assert elapsed < 10.0


@pytest.mark.criterion(4, "soft-argmax delta, uniform centre and finite-difference gradient")
def test_criterion_4_soft_argmax(record_property):
    t0 = time.perf_counter()
    raw = torch.zeros(32, 32, dtype=torch.float64)
    raw[9, 19] = 1000.0
    assert torch.allclose(soft_argmax_2d(raw), torch.tensor([10.0, 20.0], dtype=torch.float64), atol=1e-3)
    for h, w in ((9, 9), (5, 5), (8, 12)):
        assert soft_argmax_2d(torch.zeros(h, w, dtype=torch.float64)).tolist() == [(h + 1) / 2, (w + 1) / 2]
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(3):
        x = torch.tensor(rng.normal(size=(5, 5)), requires_grad=True)
        wts = torch.tensor(rng.normal(size=2))
        (soft_argmax_2d(x) * wts).sum().backward()
        worst = max(worst, _fd_check(lambda v: (soft_argmax_2d(v) * wts).sum(), x, x.grad, rel=1e-4))
        assert np.allclose(soft_argmax_2d(x.detach()).numpy(), brute_force_expectation(x.detach().numpy(), 1.0),
                           atol=1e-12)
    elapsed = time.perf_counter() - t0
    record_property("detail", f"FD gap {worst:.1e}, {elapsed:.2f}s")
    assert elapsed < 5.0


@pytest.mark.criterion(5, "autoencoder and multi-task loss totals equal their terms; alpha=0, delta=0 exact")
def test_criterion_5_loss_decompositions(record_property):
    torch.manual_seed(5)
    model = VQVAE(VqVaeConfig(hidden_channels=8)).double()
    x = torch.rand(4, 1, 16, 16, dtype=torch.float64)
    y = torch.eye(5, dtype=torch.float64)[[0, 1, 3, 4]]
    out = model(x)
    total, t = vqvae_loss(x, y, out, 1e-4, 0.25)
    gap1 = abs(total.item() - (t["recon"] + t["codebook"] + 0.25 * t["commitment"] + 1e-4 * t["ce"]).item())
    off, _ = vqvae_loss(x, y, out, 0.0, 0.25)
    assert off.item() == (t["recon"] + t["codebook"] + 0.25 * t["commitment"]).item()
    assert combine_vqvae_terms(1.0, 2.0, 3.0, float("inf"), 0.0, 0.5) == 4.5

    rng = np.random.default_rng(5)
    probs = torch.tensor(rng.dirichlet(np.ones(5), size=6))
    onehot = torch.eye(5, dtype=torch.float64)[rng.integers(0, 5, 6)]
    cp, ct = torch.tensor(rng.uniform(size=(6, 16, 2))), torch.tensor(rng.uniform(size=(6, 16, 2)))
    tot, terms = mts_loss(probs, onehot, cp, ct, 0.5)
    gap6 = abs(tot.item() - (terms["cls"] + 0.5 * terms["landmark"]).item())
    zero, zterms = mts_loss(probs, onehot, cp, ct, 0.0)
    assert zero.item() == zterms["cls"].item()
    record_property("detail", f"gaps {gap1:.1e} / {gap6:.1e}")
    assert gap1 < 1e-9 and gap6 < 1e-9


@pytest.mark.criterion(6, "EMA matches w + g^n (shadow0 - w) for g=0.995, n in {1, 10, 100}")
def test_criterion_6_ema_closed_form(record_property):
    rng = np.random.default_rng(6)
    w = torch.tensor(rng.normal(size=(3, 4)))
    s0 = torch.tensor(rng.normal(size=(3, 4)))
    worst = 0.0
    for n in (1, 10, 100):
        ema = EmaState({"p": s0.clone()}, decay=0.995)
        for _ in range(n):
            ema_update(ema, {"p": w})
        closed = w + 0.995**n * (s0 - w)
        worst = max(worst, (ema.shadow["p"] - closed).abs().max().item())
    record_property("detail", f"max deviation {worst:.1e} (float64 rounding)")
    assert worst <= 1e-12


@pytest.mark.criterion(7, "sampler with an oracle network recovers the known target")
def test_criterion_7_sampler_oracle(record_property):
    sched = make_schedule(1000)
    z12 = torch.randn(3, 4, 8, 8, generator=torch.Generator().manual_seed(7))
    out = sample_future(torch.zeros_like(z12), _OracleNet(z12, sched), sched, steps=1000, seed=7)
    err = (out - z12).abs().max().item()
    record_property("detail", f"max error {err:.1e}")
    assert err < 1e-4


@pytest.mark.criterion(8, "AUC equals pair counting; worked example 0.75; shuffled mAUC near 0.5")
def test_criterion_8_metrics(record_property):
    rng = np.random.default_rng(8)
    for n in list(range(2, 40)) + [100, 200] * 10:
        s = rng.integers(0, 10, n) / 9 if n % 2 else rng.uniform(size=n)
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        assert auc_binary(s, y) == brute_auc(s.tolist(), y.tolist())
    assert auc_binary([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    labels = rng.integers(0, 5, 2000)
    probs = np.eye(5)[labels] * 0.9 + 0.02
    shuffled = mauc(probs, rng.permutation(labels))[0]
    record_property("detail", f"shuffled mAUC {shuffled:.3f}")
    assert abs(shuffled - 0.5) <= 0.05


# ------------------------------------------------------ desk experiment


@pytest.fixture(scope="module")
def desk_results(tmp_path_factory):
    cfg = load_config(ROOT / "configs" / "desk.yaml")
    work = tmp_path_factory.mktemp("desk")
    return cfg, work, run_seeds(cfg, work, SEEDS, baselines=True)


@pytest.mark.slow
@pytest.mark.criterion(9, "desk pipeline < 30 min; median risk AUC >= 0.65 and classification mAUC >= 0.8")
def test_criterion_9_end_to_end(desk_results, record_property):
    _, _, results = desk_results
    minutes = max(r["pipeline_seconds"] for r in results) / 60
    risk = statistics.median(r["risk_auc"] for r in results)
    cls = statistics.median(r["classification_mauc"] for r in results)
    record_property("detail", f"risk AUC {risk:.3f}, mAUC {cls:.3f}, slowest run {minutes:.1f} min; per seed "
                    + ", ".join(f"{r['risk_auc']:.3f}/{r['classification_mauc']:.3f}" for r in results))
    assert minutes < 30
    assert risk >= 0.65
    assert cls >= 0.8


@pytest.mark.slow
@pytest.mark.criterion(10, "fine-tuned >= frozen classifier; real-future >= generated-future risk (median)")
def test_criterion_10_trends(desk_results, record_property):
    _, _, results = desk_results
    fine = statistics.median(r["classification_mauc"] for r in results)
    frozen = statistics.median(r["frozen_classification_mauc"] for r in results)
    real = statistics.median(r["gt_future_risk_auc"] for r in results)
    generated = statistics.median(r["risk_auc"] for r in results)
    problems = []
    if fine < frozen:
        problems.append(f"fine-tuned {fine:.3f} < frozen {frozen:.3f}")
    if real < generated:
        problems.append(f"real-future {real:.3f} < generated-future {generated:.3f}")
    record_property("detail", f"mAUC {fine:.3f} vs {frozen:.3f}; risk {real:.3f} vs {generated:.3f}"
                    + (f"; WARNING {'; '.join(problems)}" if problems else ""))
    if problems:
        if STRICT:
            pytest.fail("; ".join(problems))
        warnings.warn("directional trend violated: " + "; ".join(problems))


@pytest.mark.slow
@pytest.mark.criterion(11, "sampling time ratio t(100)/t(1000) in [0.08, 0.15]")
def test_criterion_11_timing(desk_results, record_property):
    cfg, work, _ = desk_results
    unet = load_unet(RunDir(work / "seed0" / "run"), ema=True)
    rows = benchmark_inference(unet, make_schedule(cfg.diffusion.timesteps), [100, 1000], 3, (4, 8, 8),
                               seed=0, repeats=3)
    ratio = timing_ratio(rows)
    record_property("detail", f"ratio {ratio:.4f} ({rows[0]['median_seconds']:.3f}s vs "
                    f"{rows[1]['median_seconds']:.3f}s)")
    assert 0.08 <= ratio <= 0.15
