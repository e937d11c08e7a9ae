"""Exponential-moment bound K(lambda): estimation before training, then lookup.

For each queried prior variance, draw n networks from the prior, collect
per-sample losses over the training set, and find the smallest K with
exp(gamma^2 K) >= (1/(nm)) sum exp(gamma * X) at every grid gamma, where X is
the deviation of each per-sample loss from that network's mean loss. The sup
form ln(moment)/gamma^2 solves this exactly on the grid. All moment arithmetic
stays in the log domain so large gamma * X cannot overflow.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .seeding import stream


@dataclass(frozen=True)
class GammaGrid:
    gamma1: float
    gamma2: float
    points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=np.float64))
        if not 0.0 < self.gamma1 < self.gamma2:
            raise ValueError(f"need 0 < gamma1 < gamma2, got {self.gamma1}, {self.gamma2}")
        p = self.points
        if p.size < 2 or p[0] != self.gamma1 or p[-1] != self.gamma2 or np.any(np.diff(p) <= 0):
            raise ValueError("grid must ascend from gamma1 to gamma2 with >= 2 points")

    @classmethod
    def uniform(cls, gamma1: float = 0.5, gamma2: float = 10.0, size: int = 50) -> "GammaGrid":
        return cls(float(gamma1), float(gamma2), np.linspace(gamma1, gamma2, size))


@dataclass(frozen=True)
class KCurve:
    """Piecewise-linear K estimate keyed on lambda (mean lambda when layerwise)."""

    kind: str
    knots: tuple
    gamma1: float
    gamma2: float
    grid_size: int
    n_samples: int
    seed: int

    def __post_init__(self):
        knots = tuple((float(q), float(k)) for q, k in self.knots)
        object.__setattr__(self, "knots", knots)
        if not knots:
            raise ValueError("curve needs at least one knot")
        qs = [q for q, _ in knots]
        if sorted(qs) != qs or len(set(qs)) != len(qs):
            raise ValueError("knot queries must be strictly ascending")
        if any(k < 0 for _, k in knots):
            raise ValueError("K estimates must be nonnegative")


def deviations(losses: np.ndarray) -> np.ndarray:
    """X[l, j] = (mean loss of network l) - (its loss on sample j)."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 2:
        raise ValueError(f"loss matrix must be 2-D, got {losses.shape}")
    return losses.mean(axis=1, keepdims=True) - losses


def log_moments(losses: np.ndarray, grid: GammaGrid) -> np.ndarray:
    """ln of the empirical moment at every grid gamma, stable in log domain."""
    x = deviations(losses)
    scaled = grid.points[:, None, None] * x[None, :, :]
    flat = scaled.reshape(grid.points.size, -1)
    hi = flat.max(axis=1, keepdims=True)
    lse = hi[:, 0] + np.log(np.exp(flat - hi).sum(axis=1))
    return lse - np.log(x.size)


def empirical_moment(losses: np.ndarray, gamma: float) -> float:
    """(1/(nm)) sum exp(gamma * X); may overflow to inf only on exponentiation."""
    x = deviations(losses)
    scaled = (gamma * x).reshape(-1)
    hi = scaled.max()
    log_m = hi + np.log(np.exp(scaled - hi).mean())
    with np.errstate(over="ignore"):
        return float(np.exp(log_m))


def solve_kmin(log_moms: np.ndarray, grid: GammaGrid) -> float:
    """Smallest K satisfying gamma^2 K >= log-moment(gamma) on the whole grid."""
    log_moms = np.asarray(log_moms, dtype=np.float64)
    if log_moms.shape != grid.points.shape:
        raise ValueError(f"{log_moms.shape} log-moments for {grid.points.shape} grid")
    if not np.all(np.isfinite(log_moms)):
        raise ad.NumericError("non-finite log-moment")
    return max(0.0, float(np.max(log_moms / grid.points ** 2)))


def kmin_from_losses(losses: np.ndarray, grid: GammaGrid) -> float:
    return solve_kmin(log_moments(losses, grid), grid)


def prior_loss_matrix(model: nn.MlpModel, h0: np.ndarray, lam: float,
                      data, n: int, rng, smoothing: float) -> np.ndarray:
    """Per-sample losses of n isotropic-prior draws at variance lam."""
    losses = np.empty((n, data.m))
    std = np.sqrt(lam)
    for l in range(n):
        h = h0 + std * rng.standard_normal(h0.size)
        logits = nn.forward_np(model, h, data.x)
        _, per = nn.ce_np(logits, data.y, smoothing)
        losses[l] = per
    return losses


def build_curve(kind: str, lambdas, h0: np.ndarray, data, n: int,
                grid: GammaGrid, seed: int, model: nn.MlpModel,
                smoothing: float = 0.0) -> KCurve:
    """Estimate K at each queried prior variance; one knot per unique query.

    Queries are deduplicated and sorted first, and each gets its own RNG
    substream, so knot values depend only on (seed, query value) and may be
    computed in parallel without changing results.
    """
    lam_arr = np.unique(np.asarray(list(lambdas), dtype=np.float64))
    if lam_arr.size == 0:
        raise ValueError("no lambda queries")
    if np.any(lam_arr <= 0):
        raise ValueError("lambda queries must be positive")
    if n < 1:
        raise ValueError(f"need n >= 1 prior samples, got {n}")
    knots = []
    for qi, lam in enumerate(lam_arr):
        rng = stream(seed, "prior-samples", qi)
        losses = prior_loss_matrix(model, h0, float(lam), data, n, rng, smoothing)
        knots.append((float(lam), kmin_from_losses(losses, grid)))
    return KCurve(kind=kind, knots=tuple(knots), gamma1=grid.gamma1,
                  gamma2=grid.gamma2, grid_size=int(grid.points.size),
                  n_samples=int(n), seed=int(seed))


def log_uniform_queries(lam_lo: float, lam_hi: float, count: int) -> np.ndarray:
    if count < 1:
        raise ValueError("need at least one query")
    if count == 1:
        return np.array([lam_hi])
    return np.exp(np.linspace(np.log(lam_lo), np.log(lam_hi), count))


def eval_curve(curve: KCurve, lam) -> float:
    """Interpolated K at lambda (vector inputs are reduced to their mean)."""
    q = float(np.mean(lam))
    qs = np.array([p for p, _ in curve.knots])
    ks = np.array([k for _, k in curve.knots])
    return float(np.interp(q, qs, ks))


def eval_curve_tensor(curve: KCurve, lam_t: Tensor) -> Tensor:
    """Tape version of eval_curve: linear inside the bracket, constant outside.

    Outside the knot range the result still rides on the tape (with zero
    slope) so the surrounding objective stays differentiable end to end.
    """
    q = float(lam_t.data)
    qs = [p for p, _ in curve.knots]
    ks = [k for _, k in curve.knots]
    if len(qs) == 1 or q <= qs[0] or q >= qs[-1]:
        edge = ks[0] if (len(qs) > 1 and q <= qs[0]) else ks[-1]
        return ad.add_const(ad.mul_const(lam_t, 0.0), edge)
    j = int(np.searchsorted(qs, q, side="right")) - 1
    slope = (ks[j + 1] - ks[j]) / (qs[j + 1] - qs[j])
    return ad.add_const(ad.mul_const(ad.add_const(lam_t, -qs[j]), slope), ks[j])


CURVE_VERSION = 1


def save_curve(curve: KCurve, path) -> None:
    doc = {
        "version": CURVE_VERSION,
        "kind": curve.kind,
        "gamma1": curve.gamma1,
        "gamma2": curve.gamma2,
        "grid_size": curve.grid_size,
        "n_samples": curve.n_samples,
        "seed": curve.seed,
        "knots": [[q, k] for q, k in curve.knots],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def load_curve(path) -> KCurve:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != CURVE_VERSION:
        raise ValueError(f"unsupported curve version {doc.get('version')!r}")
    return KCurve(kind=doc["kind"], knots=tuple((q, k) for q, k in doc["knots"]),
                  gamma1=doc["gamma1"], gamma2=doc["gamma2"],
                  grid_size=doc["grid_size"], n_samples=doc["n_samples"],
                  seed=doc["seed"])
