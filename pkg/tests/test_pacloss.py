import numpy as np
import pytest

from pacbayes import bayes, data, kbound, nn, trainer
from pacbayes.pacloss import (GAMMA_MODES, PacBayesConfig, optimal_gamma,
                              pac_loss)

from oracles import fd_grad


def test_optimal_gamma_clamps_low():
    # paper mode, K = 2: (1/2) sqrt(ln(10)/100) ~ 0.076, below gamma1
    g = optimal_gamma(kl=0.0, k_value=2.0, m=100, delta=0.1,
                      gamma1=0.5, gamma2=10.0, mode="paper")
    assert g == 0.5


def test_optimal_gamma_interior_value():
    kl = 5.0
    a = np.log(10.0) + kl
    g = optimal_gamma(kl, k_value=0.2, m=100, delta=0.1,
                      gamma1=0.5, gamma2=10.0, mode="paper")
    assert g == pytest.approx(np.sqrt(a / 100.0) / 0.2)
    assert 0.5 < g < 10.0


def test_optimal_gamma_zero_k_hits_upper_end():
    for mode in GAMMA_MODES:
        assert optimal_gamma(1.0, 0.0, 50, 0.1, 0.5, 10.0, mode) == 10.0


def test_gamma_modes_coincide_at_unit_k(rng):
    for _ in range(20):
        kl = float(rng.uniform(0.0, 30.0))
        m = int(rng.integers(10, 5000))
        gp = optimal_gamma(kl, 1.0, m, 0.1, 0.5, 10.0, "paper")
        ga = optimal_gamma(kl, 1.0, m, 0.1, 0.5, 10.0, "argmin")
        assert abs(gp - ga) < 1e-12


def test_argmin_mode_minimizes_the_tradeoff(rng):
    # against a dense scan of A/(gamma m) + gamma K over [gamma1, gamma2]
    grid = np.linspace(0.5, 10.0, 100_000)
    step = grid[1] - grid[0]
    for _ in range(20):
        kl = float(rng.uniform(0.0, 20.0))
        k = float(rng.uniform(0.01, 3.0))
        m = int(rng.integers(20, 2000))
        a = np.log(10.0) + kl
        vals = a / (grid * m) + grid * k
        want = grid[np.argmin(vals)]
        got = optimal_gamma(kl, k, m, 0.1, 0.5, 10.0, "argmin")
        assert abs(got - want) <= step + 1e-12


def test_optimal_gamma_rejects_bad_inputs():
    with pytest.raises(ValueError):
        optimal_gamma(-1.0, 1.0, 10, 0.1, 0.5, 10.0)
    with pytest.raises(ValueError):
        optimal_gamma(1.0, -1.0, 10, 0.1, 0.5, 10.0)
    with pytest.raises(ValueError):
        optimal_gamma(1.0, 1.0, 10, 0.1, 0.5, 10.0, mode="other")


def test_optimal_gamma_tolerates_float_dust_kl():
    g = optimal_gamma(-3e-13, 1.0, 100, 0.1, 0.5, 10.0)
    assert 0.5 <= g <= 10.0


def make_setup(seed=0, sizes=(2, 8, 2), m=64, kind="layerwise"):
    cfg = PacBayesConfig(seed=seed, prior_kind=kind, prior_samples=3,
                         lambda_queries=5, gamma_grid_size=20)
    ds = data.gen_blobs(seed, m=m, classes=sizes[-1])
    state = trainer.init_run(cfg, sizes)
    curve = trainer.estimate_curve(cfg, state.model, state.prior.anchor, ds)
    return cfg, ds, state, curve


def test_breakdown_identity_and_ranges(rng):
    cfg, ds, state, curve = make_setup()
    xi = rng.standard_normal(state.model.d)
    bd, grads = pac_loss(state.model, state.post, state.prior, curve,
                         ds.x, ds.y, cfg, ds.m, xi=xi)
    assert abs(bd.total - (bd.empirical + bd.complexity + bd.moment)) < 1e-12
    assert cfg.gamma1 <= bd.gamma <= cfg.gamma2
    assert bd.empirical >= 0.0 and bd.k_value >= 0.0
    assert bd.kl >= -1e-9
    assert abs(bd.moment - bd.gamma * bd.k_value) < 1e-12
    for key in ("h", "v", "b"):
        assert np.all(np.isfinite(grads[key]))
    assert grads["b"].shape == state.prior.b.shape


def test_k_value_comes_from_curve_at_mean_scale(rng):
    cfg, ds, state, curve = make_setup(kind="layerwise")
    bd, _ = pac_loss(state.model, state.post, state.prior, curve,
                     ds.x, ds.y, cfg, ds.m, xi=np.zeros(state.model.d))
    want = kbound.eval_curve(curve, state.prior.mean_lam())
    assert bd.k_value == pytest.approx(want, abs=1e-12)


def test_zero_noise_draw_reduces_to_mean_loss():
    cfg, ds, state, curve = make_setup()
    bd, _ = pac_loss(state.model, state.post, state.prior, curve,
                     ds.x, ds.y, cfg, ds.m, xi=np.zeros(state.model.d))
    logits = nn.forward_np(state.model, state.post.h, ds.x)
    want, _ = nn.ce_np(logits, ds.y, cfg.label_smoothing)
    assert bd.empirical == pytest.approx(want, abs=1e-12)


def test_fixed_xi_makes_the_loss_deterministic(rng):
    cfg, ds, state, curve = make_setup()
    xi = rng.standard_normal(state.model.d)
    bd1, g1 = pac_loss(state.model, state.post, state.prior, curve,
                       ds.x, ds.y, cfg, ds.m, xi=xi)
    bd2, g2 = pac_loss(state.model, state.post, state.prior, curve,
                       ds.x, ds.y, cfg, ds.m, xi=xi)
    assert bd1 == bd2
    assert all(np.array_equal(g1[k], g2[k]) for k in g1)


@pytest.mark.parametrize("kind", ["scalar", "layerwise"])
def test_gradients_match_finite_differences(kind, rng):
    cfg, ds, state, curve = make_setup(sizes=(2, 8, 2), kind=kind)
    # move off the symmetric init point before differentiating
    post = bayes.PosteriorSpec(state.post.h + 0.05 * rng.standard_normal(state.model.d),
                               state.post.v + 0.05 * rng.standard_normal(state.model.d))
    prior = state.prior
    xi = rng.standard_normal(state.model.d)
    bd, grads = pac_loss(state.model, post, prior, curve, ds.x, ds.y, cfg,
                         ds.m, xi=xi)
    gamma0 = bd.gamma
    d, k = state.model.d, prior.k

    def full(theta):
        p = bayes.PosteriorSpec(theta[:d], theta[d:2 * d])
        pr = bayes.PriorSpec(prior.anchor, prior.kind, theta[2 * d:], prior.groups)
        out, _ = pac_loss(state.model, p, pr, curve, ds.x, ds.y, cfg, ds.m,
                          xi=xi, fixed_gamma=gamma0)
        return out.total

    theta0 = np.concatenate([post.h, post.v, prior.b])
    want = fd_grad(full, theta0, eps=1e-6)
    got = np.concatenate([grads["h"], grads["v"], grads["b"]])
    err = np.abs(got - want) / np.maximum(np.maximum(np.abs(got), np.abs(want)), 1e-8)
    assert err.max() < 1e-4, err.max()


def test_config_validation():
    with pytest.raises(ValueError):
        PacBayesConfig(gamma1=2.0, gamma2=1.0)
    with pytest.raises(ValueError):
        PacBayesConfig(delta=1.5)
    with pytest.raises(ValueError):
        PacBayesConfig(lambda_lo=1.0, lambda_hi=0.5)
    with pytest.raises(ValueError):
        PacBayesConfig(gamma_mode="sideways")
    with pytest.raises(ValueError):
        PacBayesConfig(batch_size=0)
