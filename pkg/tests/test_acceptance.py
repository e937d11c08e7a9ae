"""End-to-end acceptance checks, one test per criterion.

Each test finishes by emitting a single line
    ACCEPTANCE <n> <name>: PASS|FAIL|SKIP (detail)
collected again in the terminal summary. The heavy training fixtures are
session-scoped and shared between criteria.
"""
import os
import time
from pathlib import Path

import numpy as np
import pytest

from pacbayes import bayes, certify, data, kbound, nn, trainer
from pacbayes.certify import CertificateParams, correction_eta, lipschitz_constants
from pacbayes.pacloss import PacBayesConfig, optimal_gamma, pac_loss
from pacbayes.seeding import stream

from conftest import ACCEPTANCE_LINES
from oracles import (bisect_k, direct_scan_k, fd_grad, mc_kl, scalar_eta,
                     scalar_l1, scalar_l2)

SIZES = (2, 32, 32, 2)
BASE_GRID = {
    "optimizer": "adam",
    "lr": [1e-3, 1e-2, 1e-1],
    "weight_decay": [0.0, 1e-4, 1e-2],
    "noise": [0.0, 1e-3, 1e-2],
}


def report(num, name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    line = f"ACCEPTANCE {num} {name}: {status}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def skip_line(num, name, reason):
    line = f"ACCEPTANCE {num} {name}: SKIP ({reason})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    pytest.skip(reason)


def blobs_train(seed, m=1000):
    return data.gen_blobs(stream(seed, "data", 0), m=m, classes=2,
                          spread=0.35, label_noise=0.1)


def blobs_heldout(seed, m=1000):
    return data.gen_blobs(stream(seed, "heldout-data"), m=m, classes=2,
                          spread=0.35, label_noise=0.1)


def blobs_test(seed, m=2000):
    return data.gen_blobs(stream(seed, "test-data"), m=m, classes=2,
                          spread=0.35, label_noise=0.1)


def full_pac_run(seed, prior, out_dir, **cfg_overrides):
    cfg = PacBayesConfig(seed=seed, prior_kind=prior, **cfg_overrides)
    state = trainer.train(cfg, blobs_train(seed), SIZES, out_dir)
    _, acc = trainer._eval_mean(state.model, state.post.h, blobs_test(seed),
                                cfg.label_smoothing)
    return acc


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def pac_matrix(workdir):
    """5 seeds x 2 prior kinds, full pipeline, default configuration."""
    accs, dirs = {}, {}
    t0 = time.monotonic()
    for prior in ("layerwise", "scalar"):
        for seed in range(5):
            out = workdir / f"pac_{prior}_{seed}"
            accs[(prior, seed)] = full_pac_run(seed, prior, out)
            dirs[(prior, seed)] = out
    return {"accs": accs, "dirs": dirs, "elapsed": time.monotonic() - t0}


@pytest.fixture(scope="session")
def baseline_best(workdir):
    """27-cell Adam grid, averaged over the same 5 seeds, best cell mean."""
    t0 = time.monotonic()
    per_cell = {}
    for seed in range(5):
        cfg = PacBayesConfig(seed=seed)
        _, table = trainer.train_baseline(
            BASE_GRID, cfg, SIZES, blobs_train(seed), blobs_test(seed),
            workdir / f"grid_seed{seed}")
        for row in table:
            per_cell.setdefault(row["cell"], []).append(row["test_acc"])
    means = {c: float(np.mean(v)) for c, v in per_cell.items()}
    best_cell = max(means, key=means.get)
    return {"best": means[best_cell], "cell": best_cell, "means": means,
            "elapsed": time.monotonic() - t0}


def test_criterion_01_kl_closed_form_vs_monte_carlo():
    t0 = time.monotonic()
    rng = np.random.Generator(np.random.PCG64(1001))
    worst = 0.0
    for i in range(100):
        d = int(rng.integers(1, 9))
        h = rng.standard_normal(d)
        v = rng.standard_normal(d) * 0.5 - 0.5
        h0 = rng.standard_normal(d)
        post = bayes.PosteriorSpec(h, v)
        if d == 1 or i % 2 == 0:
            prior = bayes.PriorSpec(h0, "scalar", rng.standard_normal(1) * 0.4,
                                    ((0, d),))
        else:
            cut = int(rng.integers(1, d))
            prior = bayes.PriorSpec(h0, "layerwise",
                                    rng.standard_normal(2) * 0.4,
                                    ((0, cut), (cut, d)))
        got = bayes.kl_value(post, prior)
        est, se = mc_kl(h, v, h0, prior.lam_per_coord(), 1_000_000, rng)
        dev_in_se = abs(got - est) / max(se, 1e-300)
        worst = max(worst, dev_in_se)
        assert dev_in_se <= 3.0, (i, got, est, se)
        # a uniform layerwise prior must collapse to the scalar formula
        b0 = float(rng.standard_normal() * 0.4)
        cut = max(1, d // 2)
        if d > 1:
            uni = bayes.PriorSpec(h0, "layerwise", np.array([b0, b0]),
                                  ((0, cut), (cut, d)))
        else:
            uni = bayes.PriorSpec(h0, "layerwise", np.array([b0]), ((0, d),))
        sca = bayes.PriorSpec(h0, "scalar", np.array([b0]), ((0, d),))
        assert abs(bayes.kl_value(post, uni) - bayes.kl_scalar(post, sca)) < 1e-12
    elapsed = time.monotonic() - t0
    report(1, "kl-closed-form", elapsed < 60.0,
           f"100 instances, worst |dev| {worst:.2f} SE, {elapsed:.1f}s")


def test_criterion_02_gamma_choice():
    rng = np.random.Generator(np.random.PCG64(1002))
    grid = np.linspace(0.5, 10.0, 100_000)
    step = grid[1] - grid[0]
    worst = 0.0
    for _ in range(100):
        kl = float(rng.uniform(0.0, 25.0))
        k = float(rng.uniform(0.01, 3.0))
        m = int(rng.integers(20, 5000))
        a = np.log(10.0) + kl
        got = optimal_gamma(kl, k, m, 0.1, 0.5, 10.0, "argmin")
        dense = grid[np.argmin(a / (grid * m) + grid * k)]
        worst = max(worst, abs(got - dense))
        assert abs(got - dense) <= step + 1e-12
        gp = optimal_gamma(kl, 1.0, m, 0.1, 0.5, 10.0, "paper")
        ga = optimal_gamma(kl, 1.0, m, 0.1, 0.5, 10.0, "argmin")
        assert abs(gp - ga) < 1e-12
    report(2, "gamma-choice", True,
           f"100 draws, worst gap {worst:.2e} <= one grid step {step:.2e}")


def test_criterion_03_k_estimator():
    rng = np.random.Generator(np.random.PCG64(1003))
    grid50 = kbound.GammaGrid.uniform(0.5, 10.0, 50)
    dense = kbound.GammaGrid.uniform(0.5, 10.0, 10_000)
    worst_slack, worst_scan, worst_bis = 0.0, 0.0, 0.0
    for _ in range(100):
        n = int(rng.integers(2, 9))
        m = int(rng.integers(10, 81))
        losses = rng.uniform(0.0, 3.0, size=(n, m))
        k50 = kbound.kmin_from_losses(losses, grid50)
        logm = kbound.log_moments(losses, grid50)
        slack = (k50 * grid50.points ** 2 - logm).min()
        worst_slack = min(worst_slack, slack)
        assert slack >= -1e-12
        kd = kbound.kmin_from_losses(losses, dense)
        scan = direct_scan_k(losses, dense.points)
        worst_scan = max(worst_scan, abs(kd - scan))
        assert abs(kd - scan) <= 1e-6
        bis = bisect_k(losses, grid50.points)
        worst_bis = max(worst_bis, abs(k50 - bis))
        assert abs(k50 - bis) <= 1e-8
    fixture = kbound.kmin_from_losses(np.array([[0.0, 2.0]]), grid50)
    assert abs(fixture - np.log(np.cosh(0.5)) / 0.25) < 1e-10
    assert abs(fixture - 0.48046) < 1e-4
    report(3, "k-estimator", True,
           f"100 matrices, min slack {worst_slack:.1e}, dense gap "
           f"{worst_scan:.1e}, bisection gap {worst_bis:.1e}, "
           f"cosh fixture {fixture:.5f}")


def test_criterion_04_objective_gradients():
    rng = np.random.Generator(np.random.PCG64(1004))
    worst = 0.0
    for kind in ("layerwise", "scalar"):
        cfg = PacBayesConfig(seed=11, prior_kind=kind, prior_samples=4,
                             lambda_queries=6)
        ds = data.gen_blobs(stream(11, "data", 0), m=64, classes=2)
        state = trainer.init_run(cfg, (2, 8, 2))
        curve = trainer.estimate_curve(cfg, state.model, state.prior.anchor, ds)
        d = state.model.d
        post = bayes.PosteriorSpec(state.post.h + 0.05 * rng.standard_normal(d),
                                   state.post.v + 0.05 * rng.standard_normal(d))
        prior = state.prior
        xi = rng.standard_normal(d)
        bd, grads = pac_loss(state.model, post, prior, curve, ds.x, ds.y,
                             cfg, ds.m, xi=xi)

        def full(theta):
            p = bayes.PosteriorSpec(theta[:d], theta[d:2 * d])
            pr = bayes.PriorSpec(prior.anchor, kind, theta[2 * d:], prior.groups)
            out, _ = pac_loss(state.model, p, pr, curve, ds.x, ds.y, cfg,
                              ds.m, xi=xi, fixed_gamma=bd.gamma)
            return out.total

        theta0 = np.concatenate([post.h, post.v, prior.b])
        want = fd_grad(full, theta0, eps=1e-6)
        got = np.concatenate([grads["h"], grads["v"], grads["b"]])
        err = np.abs(got - want) / np.maximum(
            np.maximum(np.abs(got), np.abs(want)), 1e-8)
        worst = max(worst, float(err.max()))
        assert err.max() <= 1e-4, (kind, err.max())
    report(4, "objective-gradients", True,
           f"2-8-2 net, both prior kinds, worst rel err {worst:.2e}")


def test_criterion_05_matches_tuned_baseline(pac_matrix, baseline_best):
    elapsed = pac_matrix["elapsed"] + baseline_best["elapsed"]
    best = baseline_best["best"]
    details = []
    ok = elapsed < 900.0
    for prior in ("layerwise", "scalar"):
        mean_acc = float(np.mean([pac_matrix["accs"][(prior, s)]
                                  for s in range(5)]))
        gap = (best - mean_acc) * 100.0
        details.append(f"{prior} {mean_acc:.4f} (gap {gap:+.2f} pts)")
        ok = ok and gap <= 2.0
    report(5, "tuning-free-vs-grid", ok,
           f"best grid {best:.4f} [cell {baseline_best['cell']}], "
           + ", ".join(details) + f", {elapsed:.0f}s")


def test_criterion_06_stage1_certificates_hold(workdir):
    holds = 0
    margins = []
    for seed in range(20):
        cfg = PacBayesConfig(seed=seed)
        train = blobs_train(seed)
        state = trainer.init_run(cfg, SIZES)
        state.curve = trainer.estimate_curve(cfg, state.model,
                                             state.prior.anchor, train)
        trainer.stage1(state, train, cfg)
        cert = certify.evaluate_bound(state.model, state.post, state.prior,
                                      state.curve, cfg, train,
                                      heldout=blobs_heldout(seed))
        holds += bool(cert.holds)
        margins.append(cert.bound - cert.heldout_loss)
    report(6, "certificates-hold", holds >= 18,
           f"{holds}/20 seeds, median margin {float(np.median(margins)):.3f}")


def _setting_spread(pac_matrix, workdir, num, name, key, values, default_value):
    accs = {}
    for val in values:
        per_seed = []
        for seed in range(5):
            if val == default_value:
                per_seed.append(pac_matrix["accs"][("layerwise", seed)])
            else:
                out = workdir / f"{key}_{val}_{seed}"
                per_seed.append(full_pac_run(seed, "layerwise", out,
                                             **{key: val}))
        accs[val] = float(np.mean(per_seed))
    spread = (max(accs.values()) - min(accs.values())) * 100.0
    detail = ", ".join(f"{key}={v}: {a:.4f}" for v, a in accs.items())
    report(num, name, spread <= 2.0, f"spread {spread:.2f} pts; {detail}")


def test_criterion_07_batch_size_insensitivity(pac_matrix, workdir):
    _setting_spread(pac_matrix, workdir, 7, "batch-size-insensitivity",
                    "batch_size", (32, 256, 1000), 32)


def test_criterion_08_learning_rate_insensitivity(pac_matrix, workdir):
    _setting_spread(pac_matrix, workdir, 8, "learning-rate-insensitivity",
                    "lr", (5e-5, 1e-4, 3e-4), 1e-4)


def test_criterion_09_correction_constants():
    rng = np.random.Generator(np.random.PCG64(1009))
    for _ in range(20):
        d = int(rng.integers(2, 500))
        p = CertificateParams(
            M=float(rng.uniform(1.0, 6.0)), T=float(rng.uniform(1.0, 5.0)),
            a=float(rng.uniform(0.5, 7.0)), b_up=float(rng.uniform(0.0, 1.0)),
            k=int(rng.integers(1, min(d, 16) + 1)), m=int(rng.integers(50, 10_000)),
            d=d, gamma1=float(rng.uniform(0.1, 1.0)),
            gamma2=float(rng.uniform(2.0, 20.0)), eps=0.1)
        l1, l2 = lipschitz_constants(p)
        assert abs(l1 - scalar_l1(p.d, p.M, p.T, p.a)) <= 1e-10 * max(1.0, abs(l1))
        assert abs(l2 - scalar_l2(p.d, p.M, p.a, p.b_up, p.gamma1)) \
            <= 1e-10 * max(1.0, abs(l2))
        big_l = max(l1, l2)
        eta = correction_eta(p, big_l)
        want = scalar_eta(p.k, p.m, p.gamma1, p.gamma2, p.a, p.b_up, big_l)
        assert abs(eta - want) <= 1e-10 * max(1.0, abs(want))
    lf1, lf2 = lipschitz_constants(CertificateParams(M=1.0, T=1.0, a=0.0,
                                                     b_up=0.0, k=2, m=1000, d=4,
                                                     gamma1=0.5, gamma2=10.0,
                                                     eps=0.1))
    eta_fix = correction_eta(CertificateParams(M=1.0, T=1.0, a=8.0, b_up=0.0,
                                               k=1, m=1000, d=4,
                                               gamma1=0.5, gamma2=10.0, eps=0.1),
                             big_l=100.0)
    assert abs(lf1 - 4.0) < 1e-10
    assert abs(lf2 - 32.0) < 1e-10
    assert abs(eta_fix - 0.03102) < 1e-4
    report(9, "correction-constants", True,
           f"20 draws at 1e-10; fixtures L1={lf1:.1f}, L2={lf2:.1f}, "
           f"eta={eta_fix:.5f}")


def test_criterion_10_stage_separation_and_reproducibility(pac_matrix, workdir):
    import json
    for key, out in pac_matrix["dirs"].items():
        s1 = json.loads((out / "checkpoint_stage1.json").read_text())
        s2 = json.loads((out / "checkpoint.json").read_text())
        assert s1["v"] == s2["v"], key
        assert s1["b"] == s2["b"], key
    ref = pac_matrix["dirs"][("layerwise", 0)]
    rerun = workdir / "rerun_layerwise_0"
    full_pac_run(0, "layerwise", rerun)
    same = (ref / "metrics.csv").read_bytes() == (rerun / "metrics.csv").read_bytes()
    assert same, "metrics.csv differs between identical runs"
    report(10, "stage-separation-reproducibility", True,
           "v,b bitwise frozen on 10 runs; full rerun metrics.csv identical")


def test_criterion_11_mnist_subset(workdir):
    mnist_dir = os.environ.get("PACBAYES_MNIST_DIR", "")
    if not mnist_dir:
        skip_line(11, "mnist-subset", "PACBAYES_MNIST_DIR not set; needs the "
                  "four raw idx files offline")
    t0 = time.monotonic()
    root = Path(mnist_dir)
    full = data.load_idx(str(root / "train-images-idx3-ubyte"),
                         str(root / "train-labels-idx1-ubyte"))
    test = data.load_idx(str(root / "t10k-images-idx3-ubyte"),
                         str(root / "t10k-labels-idx1-ubyte"))
    perm = stream(0, "data", 2).permutation(full.m)
    train = full.take(perm[:2000])
    sizes = (784, 128, 10)
    cfg = PacBayesConfig(seed=0)
    state = trainer.train(cfg, train, sizes, workdir / "mnist_pac")
    _, pac_acc = trainer._eval_mean(state.model, state.post.h, test,
                                    cfg.label_smoothing)
    grid = {"optimizer": "adam", "lr": [1e-3, 1e-2, 1e-1],
            "weight_decay": [0.0, 1e-4, 1e-2]}
    best, _ = trainer.train_baseline(grid, cfg, sizes, train, test,
                                     workdir / "mnist_grid")
    elapsed = time.monotonic() - t0
    gap = (best["test_acc"] - pac_acc) * 100.0
    report(11, "mnist-subset", gap <= 3.0 and elapsed < 2700.0,
           f"pac {pac_acc:.4f} vs grid {best['test_acc']:.4f} "
           f"(gap {gap:+.2f} pts), {elapsed:.0f}s")
