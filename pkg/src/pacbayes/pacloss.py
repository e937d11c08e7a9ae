"""The PAC-Bayes training objective: sampled empirical loss + complexity + moment.

total = E_{h~Q} loss(h; batch) + (ln(1/delta) + KL) / (gamma m) + gamma K(lambda)

with gamma set in closed form from the current KL and K and treated as a
constant inside each step's differentiation (envelope argument: at an interior
optimum its partial vanishes, at the clamps it is locally constant). m is the
full training-set size even when the empirical term is a mini-batch estimate.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import bayes, kbound, nn
from .bayes import LOG_NOISE_FLOOR

GAMMA_MODES = ("paper", "argmin")


@dataclass
class PacBayesConfig:
    """Every knob of the tuning-free pipeline, with its documented default."""

    gamma1: float = 0.5
    gamma2: float = 10.0
    delta: float = 0.1
    lambda_lo: float = float(np.exp(-7.0))
    lambda_hi: float = 1.0
    stage1_epochs: int = 200
    prior_samples: int = 10
    lambda_queries: int = 10
    gamma_grid_size: int = 50
    warmup_epochs: int = 50
    clip_log_noise: bool = False
    clip_floor: float = LOG_NOISE_FLOOR
    lr: float = 1e-4
    batch_size: int = 32
    label_smoothing: float = 0.1
    seed: int = 0
    gamma_mode: str = "paper"
    prior_kind: str = "layerwise"
    n_eval: int = 30
    stage2_max_epochs: int = 2000
    plateau_window: int = 20
    lr_decay: float = 0.1
    acc_threshold: float = 0.999
    lr_floor: float = 1e-5

    def __post_init__(self):
        if not 0.0 < self.gamma1 < self.gamma2:
            raise ValueError(f"need 0 < gamma1 < gamma2, got {self.gamma1}, {self.gamma2}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0.0 < self.lambda_lo < self.lambda_hi:
            raise ValueError(f"bad lambda range [{self.lambda_lo}, {self.lambda_hi}]")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label smoothing {self.label_smoothing} outside [0, 1)")
        if self.gamma_mode not in GAMMA_MODES:
            raise ValueError(f"gamma mode {self.gamma_mode!r} not one of {GAMMA_MODES}")
        if self.prior_kind not in bayes.PRIOR_KINDS:
            raise ValueError(f"prior kind {self.prior_kind!r} not one of {bayes.PRIOR_KINDS}")
        for name in ("stage1_epochs", "warmup_epochs", "stage2_max_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("prior_samples", "lambda_queries", "batch_size", "n_eval",
                     "plateau_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.gamma_grid_size < 2:
            raise ValueError("gamma_grid_size must be >= 2")
        for name in ("lr", "lr_decay", "lr_floor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def gamma_grid(self) -> kbound.GammaGrid:
        return kbound.GammaGrid.uniform(self.gamma1, self.gamma2, self.gamma_grid_size)

    def lambda_query_values(self) -> np.ndarray:
        return kbound.log_uniform_queries(self.lambda_lo, self.lambda_hi,
                                          self.lambda_queries)


@dataclass(frozen=True)
class PacLossBreakdown:
    empirical: float
    kl: float
    gamma: float
    k_value: float
    complexity: float
    moment: float
    total: float


def optimal_gamma(kl: float, k_value: float, m: int, delta: float,
                  gamma1: float, gamma2: float, mode: str = "paper") -> float:
    """Closed-form gamma, clamped to [gamma1, gamma2].

    "paper" uses (1/K) sqrt(A/m); "argmin" uses sqrt(A/(m K)), the true
    stationary point of A/(gamma m) + gamma K. A = ln(1/delta) + KL. The two
    coincide at K = 1. K = 0 pushes gamma to the upper end in both modes.
    """
    if mode not in GAMMA_MODES:
        raise ValueError(f"gamma mode {mode!r} not one of {GAMMA_MODES}")
    if -1e-9 < kl < 0.0:
        kl = 0.0  # closed-form KL cancels to tiny negatives at the init point
    if kl < 0 or k_value < 0 or m < 1:
        raise ValueError(f"bad optimal_gamma inputs kl={kl}, K={k_value}, m={m}")
    if k_value == 0.0:
        return float(gamma2)
    a = np.log(1.0 / delta) + kl
    if mode == "paper":
        raw = np.sqrt(a / m) / k_value
    else:
        raw = np.sqrt(a / (m * k_value))
    return float(min(max(raw, gamma1), gamma2))


def prior_lambda_tensor(b_t, prior: bayes.PriorSpec):
    """Scalar lambda (or mean of the per-group lambdas) as a tape scalar."""
    if prior.kind == "scalar":
        return ad.exp(ad.sum_(b_t))
    return ad.mul_const(ad.sum_(ad.exp(b_t)), 1.0 / prior.k)


def pac_loss(model: nn.MlpModel, post: bayes.PosteriorSpec, prior: bayes.PriorSpec,
             curve: kbound.KCurve, batch_x, batch_y, cfg: PacBayesConfig,
             m: int, xi=None, rng=None, fixed_gamma: float | None = None):
    """One stochastic evaluation of the objective plus its gradients.

    Draws a single posterior sample (pass xi to fix it), builds the whole
    objective on one tape, and returns (breakdown, {"h","v","b"} gradient
    arrays). m is the size of the full training set the bound refers to.
    fixed_gamma bypasses the closed-form choice; gradients always treat
    gamma as a constant either way.
    """
    if xi is None:
        xi = bayes._as_rng(rng).standard_normal(post.d)
    xi = np.asarray(xi, dtype=np.float64)
    tape = ad.Tape()
    h = tape.leaf(post.h)
    v = tape.leaf(post.v)
    b = tape.leaf(prior.b)
    h_tilde = ad.add(h, ad.mul(ad.exp(ad.mul_const(v, 0.5)), xi))
    logits = nn.forward(model, h_tilde, np.asarray(batch_x, dtype=np.float64))
    empirical = nn.ce_loss(logits, batch_y, cfg.label_smoothing)
    kl_t = bayes.kl_tensor(h, v, b, prior)
    k_t = kbound.eval_curve_tensor(curve, prior_lambda_tensor(b, prior))
    gamma = fixed_gamma if fixed_gamma is not None else \
        optimal_gamma(kl_t.item(), k_t.item(), m, cfg.delta,
                      cfg.gamma1, cfg.gamma2, cfg.gamma_mode)
    complexity = ad.mul_const(ad.add_const(kl_t, np.log(1.0 / cfg.delta)),
                              1.0 / (gamma * m))
    moment = ad.mul_const(k_t, gamma)
    total = ad.add(ad.add(empirical, complexity), moment)
    grads = ad.backward(tape, total)
    breakdown = PacLossBreakdown(
        empirical=empirical.item(), kl=kl_t.item(), gamma=gamma,
        k_value=k_t.item(), complexity=complexity.item(),
        moment=moment.item(), total=total.item())
    return breakdown, {"h": grads[h.nid].data, "v": grads[v.nid].data,
                       "b": grads[b.nid].data}
