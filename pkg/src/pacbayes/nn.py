"""Dense MLP with a flat parameter registry, smoothed cross-entropy, Adam/SGD.

Parameters live in one flat float64 vector. Each weight matrix and each bias
vector is its own group; the layerwise prior and the warmup tying both key off
these groups. Group count is therefore 2 x number of dense layers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, NumericError, Tensor


@dataclass(frozen=True)
class ParamGroup:
    name: str
    start: int
    stop: int
    shape: tuple

    @property
    def size(self) -> int:
        return self.stop - self.start


class MlpModel:
    """Feed-forward ReLU network described by its layer sizes."""

    def __init__(self, sizes):
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError(f"bad layer sizes {sizes}")
        self.sizes = sizes
        groups = []
        off = 0
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = fan_in * fan_out
            groups.append(ParamGroup(f"layer{i}.weight", off, off + w, (fan_in, fan_out)))
            off += w
            groups.append(ParamGroup(f"layer{i}.bias", off, off + fan_out, (fan_out,)))
            off += fan_out
        self.groups = tuple(groups)
        self.d = off

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def n_classes(self) -> int:
        return self.sizes[-1]

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """Per-layer uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
        flat = np.empty(self.d)
        for i, fan_in in enumerate(self.sizes[:-1]):
            wg, bg = self.groups[2 * i], self.groups[2 * i + 1]
            bound = 1.0 / np.sqrt(fan_in)
            flat[wg.start:wg.stop] = rng.uniform(-bound, bound, wg.size)
            flat[bg.start:bg.stop] = rng.uniform(-bound, bound, bg.size)
        return flat

    def unflatten(self, flat: np.ndarray):
        """Flat vector -> [(W, b), ...] array views, layer by layer."""
        flat = np.asarray(flat)
        if flat.shape != (self.d,):
            raise DimensionError(f"expected {self.d} parameters, got {flat.shape}")
        out = []
        for i in range(self.n_layers):
            wg, bg = self.groups[2 * i], self.groups[2 * i + 1]
            out.append((flat[wg.start:wg.stop].reshape(wg.shape), flat[bg.start:bg.stop]))
        return out

    def flatten(self, layers) -> np.ndarray:
        parts = []
        for w, b in layers:
            parts.append(np.asarray(w).reshape(-1))
            parts.append(np.asarray(b).reshape(-1))
        flat = np.concatenate(parts)
        if flat.shape != (self.d,):
            raise DimensionError(f"layer stack does not flatten to {self.d} parameters")
        return flat

    def param_tensors(self, flat: Tensor):
        """Tape views of a flat parameter tensor, one (W, b) pair per layer."""
        out = []
        for i in range(self.n_layers):
            wg, bg = self.groups[2 * i], self.groups[2 * i + 1]
            w = ad.reshape(ad.segment(flat, wg.start, wg.stop), wg.shape)
            b = ad.segment(flat, bg.start, bg.stop)
            out.append((w, b))
        return out


def forward(model: MlpModel, params, batch) -> Tensor:
    """Logits for a batch; records on the tape of whichever input carries one."""
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=np.float64))
    if x.data.ndim != 2 or x.shape[1] != model.sizes[0]:
        raise DimensionError(f"batch shape {x.shape} does not feed input width {model.sizes[0]}")
    if isinstance(params, Tensor):
        layers = model.param_tensors(params)
    else:
        layers = [(Tensor(w), Tensor(b)) for w, b in model.unflatten(params)]
    for i, (w, b) in enumerate(layers):
        x = ad.add(ad.matmul(x, w), b)
        if i < model.n_layers - 1:
            x = ad.relu(x)
    return x


def forward_np(model: MlpModel, flat: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Plain-numpy forward pass for evaluation paths that need no gradients."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.sizes[0]:
        raise DimensionError(f"batch shape {x.shape} does not feed input width {model.sizes[0]}")
    for i, (w, b) in enumerate(model.unflatten(flat)):
        x = x @ w + b
        if i < model.n_layers - 1:
            x = np.maximum(x, 0.0)
    return x


def smooth_targets(labels: np.ndarray, classes: int, smoothing: float) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise DimensionError("labels must be a flat index vector")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"label outside [0, {classes})")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing {smoothing} outside [0, 1)")
    t = np.full((labels.size, classes), smoothing / classes)
    t[np.arange(labels.size), labels] += 1.0 - smoothing
    return t


def ce_loss(logits: Tensor, labels, smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy against (1-s)*onehot + s/c targets, on the tape."""
    targets = smooth_targets(labels, logits.shape[-1], smoothing)
    logp = ad.log_softmax(logits)
    return ad.mul_const(ad.sum_(ad.mul(logp, targets)), -1.0 / targets.shape[0])


def ce_np(logits: np.ndarray, labels, smoothing: float = 0.0):
    """(mean loss, per-sample losses) without a tape; same arithmetic as ce_loss."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = smooth_targets(labels, logits.shape[-1], smoothing)
    hi = logits.max(axis=-1, keepdims=True)
    logp = logits - (hi + np.log(np.exp(logits - hi).sum(axis=-1, keepdims=True)))
    per = -(targets * logp).sum(axis=-1)
    return float(per.mean()), per


def accuracy_np(logits: np.ndarray, labels) -> float:
    return float((np.argmax(logits, axis=-1) == np.asarray(labels)).mean())


@dataclass
class AdamState:
    """First/second moment buffers plus the usual bias-corrected step rule."""

    lr: float
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, dim: int, lr: float = 1e-4, **kw) -> "AdamState":
        return cls(lr=lr, m=np.zeros(dim), v=np.zeros(dim), **kw)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """One descent step; mutates the state buffers, returns new parameters."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise DimensionError(f"adam shapes {params.shape} vs {grads.shape} vs {state.m.shape}")
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradients; Adam step aborted")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def sgd_step(params, grads, lr, momentum=0.0, weight_decay=0.0, velocity=None):
    """SGD with optional momentum buffer; weight decay adds wd*param to the gradient.

    Returns (new params, velocity); pass the velocity back in on the next call.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise DimensionError(f"sgd shapes {params.shape} vs {grads.shape}")
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradients; SGD step aborted")
    g = grads + weight_decay * params if weight_decay else grads
    if momentum:
        velocity = g if velocity is None else momentum * velocity + g
        step = velocity
    else:
        velocity = None
        step = g
    return params - lr * step, velocity
