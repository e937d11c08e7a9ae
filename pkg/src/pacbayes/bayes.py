"""Gaussian posterior and prior over flat weights: KL closed forms and sampling.

The posterior is N(h, diag sigma) with sigma = exp(v) stored as log-variance;
sampling therefore perturbs with std = exp(v/2). The prior is N(h0, lambda I)
with one lambda (scalar kind) or one per parameter group (layerwise kind),
lambda = exp(b). Getting variance-vs-std wrong is the classic bug here, hence
the explicit naming.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

LOG_NOISE_FLOOR = -float(np.log(10.0))

PRIOR_KINDS = ("scalar", "layerwise")


@dataclass(frozen=True)
class PosteriorSpec:
    h: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "h", np.asarray(self.h, dtype=np.float64))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=np.float64))
        if self.h.shape != self.v.shape or self.h.ndim != 1:
            raise DimensionError(f"posterior shapes h {self.h.shape} vs v {self.v.shape}")

    @property
    def d(self) -> int:
        return self.h.size

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.v)


@dataclass(frozen=True)
class PriorSpec:
    anchor: np.ndarray
    kind: str
    b: np.ndarray
    groups: tuple

    def __post_init__(self):
        object.__setattr__(self, "anchor", np.asarray(self.anchor, dtype=np.float64))
        object.__setattr__(self, "b", np.atleast_1d(np.asarray(self.b, dtype=np.float64)))
        object.__setattr__(self, "groups", tuple((int(s), int(e)) for s, e in self.groups))
        if self.kind not in PRIOR_KINDS:
            raise ValueError(f"prior kind {self.kind!r} not one of {PRIOR_KINDS}")
        want = 1 if self.kind == "scalar" else len(self.groups)
        if self.b.shape != (want,):
            raise DimensionError(f"{self.kind} prior needs b of length {want}, got {self.b.shape}")
        edges = [0] + [e for _, e in self.groups]
        starts = [s for s, _ in self.groups]
        if starts != edges[:-1] or edges[-1] != self.anchor.size:
            raise DimensionError("groups must partition the flat parameter vector")

    @property
    def d(self) -> int:
        return self.anchor.size

    @property
    def k(self) -> int:
        return self.b.size

    @property
    def lam(self) -> np.ndarray:
        return np.exp(self.b)

    def lam_per_coord(self) -> np.ndarray:
        """Prior variance expanded to one value per parameter."""
        out = np.empty(self.d)
        if self.kind == "scalar":
            out[:] = np.exp(self.b[0])
        else:
            for i, (s, e) in enumerate(self.groups):
                out[s:e] = np.exp(self.b[i])
        return out

    def mean_lam(self) -> float:
        return float(np.exp(self.b).mean())


def init_specs(h0: np.ndarray, kind: str, groups) -> tuple:
    """Initialization shared by both training algorithms.

    Posterior log-variance and prior log-variance both start at
    ln(mean |h0|); the anchor is the init itself.
    """
    h0 = np.asarray(h0, dtype=np.float64)
    scale = float(np.abs(h0).mean())
    if scale <= 0.0:
        raise ValueError("|h0| has zero mean; log-variance init undefined")
    v0 = np.full(h0.size, np.log(scale))
    k = 1 if kind == "scalar" else len(tuple(groups))
    b0 = np.full(k, np.log(scale))
    return PosteriorSpec(h0.copy(), v0), PriorSpec(h0.copy(), kind, b0, tuple(groups))


def _kl_closed(h, v, h0, b_i, d_i):
    return (-v.sum() + d_i * (b_i - 1.0)
            + np.exp(-b_i) * (np.exp(v).sum() + ((h - h0) ** 2).sum()))


def kl_scalar(post: PosteriorSpec, prior: PriorSpec) -> float:
    """KL(N(h, diag sigma) || N(h0, lambda I)) for a single scalar lambda."""
    if prior.kind != "scalar":
        raise ValueError("kl_scalar needs a scalar-kind prior")
    if prior.d != post.d:
        raise DimensionError("posterior/prior dimensions differ")
    return 0.5 * _kl_closed(post.h, post.v, prior.anchor, prior.b[0], post.d)


def kl_layerwise(post: PosteriorSpec, prior: PriorSpec) -> float:
    """Sum of per-group KL terms, one prior variance per group."""
    if prior.kind != "layerwise":
        raise ValueError("kl_layerwise needs a layerwise-kind prior")
    if prior.d != post.d:
        raise DimensionError("posterior/prior dimensions differ")
    total = 0.0
    for i, (s, e) in enumerate(prior.groups):
        total += _kl_closed(post.h[s:e], post.v[s:e], prior.anchor[s:e],
                            prior.b[i], e - s)
    return 0.5 * total


def kl_value(post: PosteriorSpec, prior: PriorSpec) -> float:
    return kl_scalar(post, prior) if prior.kind == "scalar" else kl_layerwise(post, prior)


def kl_tensor(h_t: Tensor, v_t: Tensor, b_t: Tensor, prior: PriorSpec) -> Tensor:
    """Differentiable KL on the tape carrying h_t, v_t, b_t.

    Same closed form as kl_scalar/kl_layerwise; the scalar kind is the single
    group [0, d) with the one b entry.
    """
    d = prior.d
    groups = ((0, d),) if prior.kind == "scalar" else prior.groups
    acc = None
    for i, (s, e) in enumerate(groups):
        whole = s == 0 and e == d
        vi = v_t if whole else ad.segment(v_t, s, e)
        hi = h_t if whole else ad.segment(h_t, s, e)
        bi = ad.sum_(ad.segment(b_t, i, i + 1))
        quad = ad.add(ad.sum_(ad.exp(vi)),
                      ad.sum_(ad.square(ad.sub(hi, prior.anchor[s:e]))))
        term = ad.add(ad.neg(ad.sum_(vi)),
                      ad.mul_const(ad.add_const(bi, -1.0), float(e - s)))
        term = ad.add(term, ad.mul(ad.exp(ad.neg(bi)), quad))
        acc = term if acc is None else ad.add(acc, term)
    return ad.mul_const(acc, 0.5)


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def sample_posterior(post: PosteriorSpec, rng=None, xi=None) -> np.ndarray:
    """One reparameterized draw h + exp(v/2) * xi."""
    if xi is None:
        xi = _as_rng(rng).standard_normal(post.d)
    return post.h + np.exp(0.5 * post.v) * np.asarray(xi)


def sample_prior(prior: PriorSpec, rng=None, xi=None) -> np.ndarray:
    """One draw h0 + sqrt(lambda) * xi with per-group lambda."""
    if xi is None:
        xi = _as_rng(rng).standard_normal(prior.d)
    return prior.anchor + np.sqrt(prior.lam_per_coord()) * np.asarray(xi)


def clamp_log_noise(post: PosteriorSpec, prior: PriorSpec,
                    floor: float = LOG_NOISE_FLOOR) -> tuple:
    """Lower-bound every log-variance entry at `floor` (small-m safeguard)."""
    return (replace(post, v=np.maximum(post.v, floor)),
            replace(prior, b=np.maximum(prior.b, floor)))


def project_prior(prior: PriorSpec, lam_lo: float, lam_hi: float) -> PriorSpec:
    """Clip b so that lambda stays inside [lam_lo, lam_hi]."""
    if not 0.0 < lam_lo < lam_hi:
        raise ValueError(f"bad lambda range [{lam_lo}, {lam_hi}]")
    return replace(prior, b=np.clip(prior.b, np.log(lam_lo), np.log(lam_hi)))
