"""Numerical generalization certificates for trained posteriors.

The certified bound is the training objective evaluated at the trained point
(with a low-noise multi-sample empirical term) plus a correction eta that
prices the trainable prior: eta = (k/(gamma1 m)) (1 + ln(C L (b+a) gamma1 m / (2k)))
with C = 1/(gamma1 m) + gamma2 and L = L1 + L2 the KL- and K-continuity
constants of the Gaussian family over the certified parameter box.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import bayes, kbound, nn
from .pacloss import PacBayesConfig, PacLossBreakdown, optimal_gamma
from .seeding import stream


@dataclass(frozen=True)
class CertificateParams:
    """Box constants the correction term is evaluated over.

    M bounds weights (||h||_2 <= sqrt(d) M), T bounds the posterior variance
    budget (||sigma||_1 <= d T), lambda ranges over [e^-a, e^b_up], k is the
    prior's degrees of freedom.
    """

    M: float
    T: float
    a: float
    b_up: float
    k: int
    m: int
    d: int
    gamma1: float
    gamma2: float
    eps: float

    def __post_init__(self):
        if min(self.M, self.T, self.m, self.d, self.k) <= 0:
            raise ValueError("M, T, k, m, d must all be positive")
        if self.k > self.d:
            raise ValueError(f"prior degrees of freedom {self.k} exceed d={self.d}")
        if self.a + self.b_up < 0:
            raise ValueError("inverted prior variance range: need b_up >= -a")
        if not 0.0 < self.gamma1 < self.gamma2:
            raise ValueError("need 0 < gamma1 < gamma2")
        if not 0.0 < self.eps < 1.0:
            raise ValueError("eps must lie in (0, 1)")

    @classmethod
    def from_run(cls, post: bayes.PosteriorSpec, prior: bayes.PriorSpec,
                 cfg: PacBayesConfig, m: int) -> "CertificateParams":
        d = post.d
        return cls(
            M=max(1.0, float(np.linalg.norm(post.h)) / np.sqrt(d)),
            T=max(1.0, float(np.abs(post.sigma).sum()) / d),
            a=-float(np.log(cfg.lambda_lo)),
            b_up=float(np.log(cfg.lambda_hi)),
            k=prior.k, m=int(m), d=d,
            gamma1=cfg.gamma1, gamma2=cfg.gamma2, eps=cfg.delta)


def lipschitz_constants(params: CertificateParams) -> tuple:
    """(L1, L2): continuity constants of KL and K over the certified box."""
    d, mm, tt, a = params.d, params.M, params.T, params.a
    l1 = 0.5 * max(d, np.exp(a) * (2.0 * np.sqrt(d) * mm + d * tt))
    l2 = (2.0 * d * mm * mm * np.exp(2.0 * a) + d * (a + params.b_up) / 2.0) \
        / (params.gamma1 ** 2)
    return float(l1), float(l2)


def correction_eta(params: CertificateParams, big_l: float) -> float:
    """Trainable-prior correction; grows like k/(gamma1 m) with a log factor."""
    c = 1.0 / (params.gamma1 * params.m) + params.gamma2
    arg = c * big_l * (params.b_up + params.a) * params.gamma1 * params.m / (2.0 * params.k)
    if arg <= 0.0:
        raise ValueError(f"degenerate certificate params: log argument {arg}")
    return float(params.k / (params.gamma1 * params.m) * (1.0 + np.log(arg)))


def c_constant(params: CertificateParams) -> float:
    return float(1.0 / (params.gamma1 * params.m) + params.gamma2)


@dataclass(frozen=True)
class BoundCertificate:
    params: CertificateParams
    breakdown: PacLossBreakdown
    l1: float
    l2: float
    c_value: float
    eta: float
    bound: float
    n_eval: int
    heldout_loss: float | None = None
    holds: bool | None = None


def expected_posterior_loss(model: nn.MlpModel, post: bayes.PosteriorSpec,
                            datasets, smoothing: float, n_eval: int, rng) -> list:
    """Mean smoothed loss of n_eval posterior draws on each dataset.

    The same weight draws are reused across datasets so a bound/held-out
    comparison sees one posterior sample set, not two.
    """
    sums = [0.0] * len(datasets)
    for _ in range(n_eval):
        h = bayes.sample_posterior(post, xi=rng.standard_normal(post.d))
        for i, ds in enumerate(datasets):
            loss, _ = nn.ce_np(nn.forward_np(model, h, ds.x), ds.y, smoothing)
            sums[i] += loss
    return [s / n_eval for s in sums]


def evaluate_bound(model: nn.MlpModel, post: bayes.PosteriorSpec,
                   prior: bayes.PriorSpec, curve: kbound.KCurve,
                   cfg: PacBayesConfig, train_data, heldout=None,
                   n_eval: int | None = None,
                   params: CertificateParams | None = None) -> BoundCertificate:
    """Certificate for a trained posterior: bound = L_PAC + eta.

    The empirical term averages n_eval posterior draws over the FULL training
    set; gamma is recomputed from the certified KL and K.
    """
    if curve is None:
        raise ValueError("missing K curve; estimate it before certifying")
    n_eval = cfg.n_eval if n_eval is None else int(n_eval)
    m = train_data.m
    rng = stream(cfg.seed, "certify")
    sets = [train_data] + ([heldout] if heldout is not None and heldout.m else [])
    losses = expected_posterior_loss(model, post, sets, cfg.label_smoothing,
                                     n_eval, rng)
    empirical = losses[0]
    kl = bayes.kl_value(post, prior)
    k_value = kbound.eval_curve(curve, prior.mean_lam())
    gamma = optimal_gamma(kl, k_value, m, cfg.delta, cfg.gamma1, cfg.gamma2,
                          cfg.gamma_mode)
    complexity = (np.log(1.0 / cfg.delta) + kl) / (gamma * m)
    moment = gamma * k_value
    breakdown = PacLossBreakdown(
        empirical=empirical, kl=kl, gamma=gamma, k_value=k_value,
        complexity=float(complexity), moment=float(moment),
        total=float(empirical + complexity + moment))
    if params is None:
        params = CertificateParams.from_run(post, prior, cfg, m)
    l1, l2 = lipschitz_constants(params)
    eta = correction_eta(params, l1 + l2)
    bound = breakdown.total + eta
    heldout_loss = losses[1] if len(losses) > 1 else None
    holds = None if heldout_loss is None else bool(bound >= heldout_loss)
    return BoundCertificate(params=params, breakdown=breakdown, l1=l1, l2=l2,
                            c_value=c_constant(params), eta=eta, bound=float(bound),
                            n_eval=n_eval, heldout_loss=heldout_loss, holds=holds)


CERTIFICATE_VERSION = 1


def save_certificate(cert: BoundCertificate, path) -> None:
    doc = {"version": CERTIFICATE_VERSION}
    doc.update(asdict(cert))
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def load_certificate(path) -> BoundCertificate:
    with open(path) as f:
        doc = json.load(f)
    if doc.pop("version", None) != CERTIFICATE_VERSION:
        raise ValueError("unsupported certificate version")
    doc["params"] = CertificateParams(**doc["params"])
    doc["breakdown"] = PacLossBreakdown(**doc["breakdown"])
    return BoundCertificate(**doc)


def summary_lines(cert: BoundCertificate) -> list:
    b = cert.breakdown
    lines = [
        f"empirical (n_eval={cert.n_eval}): {b.empirical:.6f}",
        f"complexity (ln(1/eps)+KL)/(gamma m): {b.complexity:.6f}  [KL={b.kl:.4f}, gamma={b.gamma:.4f}]",
        f"moment gamma*K: {b.moment:.6f}  [K={b.k_value:.6f}]",
        f"objective total: {b.total:.6f}",
        f"eta correction: {cert.eta:.6f}  [L1={cert.l1:.4g}, L2={cert.l2:.4g}, C={cert.c_value:.4f}]",
        f"certified bound = total + eta: {cert.bound:.6f}",
    ]
    if cert.heldout_loss is not None:
        verdict = "holds" if cert.holds else "VIOLATED"
        lines.append(f"held-out posterior loss: {cert.heldout_loss:.6f}  bound {verdict}")
    return lines
