"""Two-stage tuning-free training plus the grid-search baseline harness.

Stage 1 minimizes the PAC-Bayes objective over (h, v, b) with one posterior
draw per batch; the first warmup epochs update each group's posterior
log-variance as a single tied scalar. Stage 2 freezes (v, b) and runs
noise-injected Adam on the empirical loss alone, with plateau-triggered LR
decay and the accuracy/LR-floor stopping rule.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path

import numpy as np

from . import bayes, certify, kbound, nn
from .autodiff import NumericError, Tape
from . import autodiff as ad
from .data import Dataset
from .pacloss import PacBayesConfig, optimal_gamma, pac_loss
from .seeding import stream

METRICS_HEADER = ("stage,epoch,train_loss,train_acc,pac_total,kl,gamma,"
                  "k_value,mean_sigma,lr,heldout_loss,heldout_acc")

# Sub-indices of the "data" stream: 0..2 are reserved for dataset generation
# by the CLI; 3 drives the per-epoch shuffles.
SHUFFLE_SUBSTREAM = 3

# The configured lr is the step size at this batch size. Adam moves roughly
# lr per step regardless of batch, so per-epoch progress stays flat across
# batch sizes only if the step size scales with the batch.
REFERENCE_BATCH = 32

# Below this step size stage 1 runs 1.4x longer so the prior and posterior
# variances settle before stage 2 freezes them.
SMALL_LR_CUTOFF = 1e-4
SLOW_LR_STRETCH = 1.4


def scaled_lr(cfg: PacBayesConfig) -> float:
    return cfg.lr * (cfg.batch_size / REFERENCE_BATCH)


def stage1_epoch_budget(cfg: PacBayesConfig) -> int:
    if cfg.lr < SMALL_LR_CUTOFF:
        return int(round(cfg.stage1_epochs * SLOW_LR_STRETCH))
    return cfg.stage1_epochs


@dataclass(frozen=True)
class StopRule:
    plateau_window: int = 20
    lr_decay: float = 0.1
    acc_threshold: float = 0.999
    lr_floor: float = 1e-5

    def __post_init__(self):
        if min(self.plateau_window, self.lr_decay, self.acc_threshold, self.lr_floor) <= 0:
            raise ValueError("all StopRule fields must be positive")

    @classmethod
    def from_config(cls, cfg: PacBayesConfig) -> "StopRule":
        return cls(cfg.plateau_window, cfg.lr_decay, cfg.acc_threshold, cfg.lr_floor)


@dataclass
class RunState:
    model: nn.MlpModel
    post: bayes.PosteriorSpec
    prior: bayes.PriorSpec
    curve: kbound.KCurve | None
    adam_h: nn.AdamState
    adam_v: nn.AdamState
    adam_b: nn.AdamState
    shuffle_rng: np.random.Generator
    noise_rng: np.random.Generator
    stage: str = "init"
    epoch: int = 0
    metrics: list = field(default_factory=list)


def init_run(cfg: PacBayesConfig, sizes) -> RunState:
    model = nn.MlpModel(sizes)
    h0 = model.init_params(stream(cfg.seed, "init"))
    groups = [(g.start, g.stop) for g in model.groups]
    post, prior = bayes.init_specs(h0, cfg.prior_kind, groups)
    prior = bayes.project_prior(prior, cfg.lambda_lo, cfg.lambda_hi)
    lr = scaled_lr(cfg)
    return RunState(
        model=model, post=post, prior=prior, curve=None,
        adam_h=nn.AdamState.zeros(model.d, lr=lr),
        adam_v=nn.AdamState.zeros(model.d, lr=lr),
        adam_b=nn.AdamState.zeros(prior.k, lr=lr),
        shuffle_rng=stream(cfg.seed, "data", SHUFFLE_SUBSTREAM),
        noise_rng=stream(cfg.seed, "posterior-noise"))


def estimate_curve(cfg: PacBayesConfig, model: nn.MlpModel, h0: np.ndarray,
                   train: Dataset) -> kbound.KCurve:
    return kbound.build_curve(
        cfg.prior_kind, cfg.lambda_query_values(), h0, train,
        cfg.prior_samples, cfg.gamma_grid(), cfg.seed, model,
        smoothing=cfg.label_smoothing)


def _batches(m: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(m)
    for s in range(0, m, batch_size):
        yield perm[s:s + batch_size]


def _eval_mean(model, h, ds: Dataset, smoothing: float):
    logits = nn.forward_np(model, h, ds.x)
    loss, _ = nn.ce_np(logits, ds.y, smoothing)
    return loss, nn.accuracy_np(logits, ds.y)


def _row(stage, epoch, model, post, cfg, train, heldout, snap, lr):
    train_loss, train_acc = _eval_mean(model, post.h, train, cfg.label_smoothing)
    row = {
        "stage": stage, "epoch": epoch,
        "train_loss": train_loss, "train_acc": train_acc,
        "pac_total": snap["pac_total"], "kl": snap["kl"], "gamma": snap["gamma"],
        "k_value": snap["k_value"],
        "mean_sigma": float(np.exp(post.v).mean()), "lr": lr,
        "heldout_loss": None, "heldout_acc": None,
        # not a CSV column; kept so rows stay checkable against the identity
        "empirical": snap["empirical"],
    }
    if heldout is not None and heldout.m:
        row["heldout_loss"], row["heldout_acc"] = _eval_mean(
            model, post.h, heldout, cfg.label_smoothing)
    return row


def stage1(state: RunState, train: Dataset, cfg: PacBayesConfig,
           heldout: Dataset | None = None) -> RunState:
    """Minimize the full objective over (h, v, b) for stage1_epochs epochs."""
    if state.curve is None:
        raise ValueError("stage1 needs an estimated or loaded K curve")
    model, m = state.model, train.m
    groups = state.prior.groups
    state.stage = "stage1"
    for epoch in range(1, stage1_epoch_budget(cfg) + 1):
        snap = None
        for idx in _batches(m, cfg.batch_size, state.shuffle_rng):
            xi = state.noise_rng.standard_normal(model.d)
            try:
                bd, grads = pac_loss(model, state.post, state.prior, state.curve,
                                     train.x[idx], train.y[idx], cfg, m, xi=xi)
            except NumericError as exc:
                raise NumericError(f"stage1 epoch {epoch}: {exc}") from exc
            if epoch <= cfg.warmup_epochs:
                gv = grads["v"]
                for s, e in groups:
                    gv[s:e] = gv[s:e].sum()
            h = nn.adam_step(state.adam_h, state.post.h, grads["h"])
            v = nn.adam_step(state.adam_v, state.post.v, grads["v"])
            b = nn.adam_step(state.adam_b, state.prior.b, grads["b"])
            state.post = bayes.PosteriorSpec(h, v)
            state.prior = bayes.project_prior(replace(state.prior, b=b),
                                              cfg.lambda_lo, cfg.lambda_hi)
            if cfg.clip_log_noise:
                state.post, state.prior = bayes.clamp_log_noise(
                    state.post, state.prior, cfg.clip_floor)
            snap = {"pac_total": bd.total, "kl": bd.kl, "gamma": bd.gamma,
                    "k_value": bd.k_value, "empirical": bd.empirical}
        state.epoch = epoch
        if snap is not None:
            state.metrics.append(_row("stage1", epoch, model, state.post, cfg,
                                      train, heldout, snap, state.adam_h.lr))
    return state


def stage2(state: RunState, train: Dataset, cfg: PacBayesConfig,
           rule: StopRule | None = None, heldout: Dataset | None = None) -> RunState:
    """Noise-injected Adam on h alone; (v, b) stay bitwise frozen."""
    rule = rule or StopRule.from_config(cfg)
    model, m = state.model, train.m
    std = np.exp(0.5 * state.post.v)
    k_value = (kbound.eval_curve(state.curve, state.prior.mean_lam())
               if state.curve is not None else 0.0)
    adam = nn.AdamState.zeros(model.d, lr=scaled_lr(cfg))
    state.stage = "stage2"
    best_acc, last_improve, streak = -1.0, 0, 0
    for epoch in range(1, cfg.stage2_max_epochs + 1):
        last_emp = None
        for idx in _batches(m, cfg.batch_size, state.shuffle_rng):
            xi = state.noise_rng.standard_normal(model.d)
            tape = Tape()
            h_leaf = tape.leaf(state.post.h)
            h_tilde = ad.add(h_leaf, std * xi)
            logits = nn.forward(model, h_tilde, train.x[idx])
            loss = nn.ce_loss(logits, train.y[idx], cfg.label_smoothing)
            try:
                grads = ad.backward(tape, loss)
            except NumericError as exc:
                raise NumericError(f"stage2 epoch {epoch}: {exc}") from exc
            h = nn.adam_step(adam, state.post.h, grads[h_leaf.nid].data)
            state.post = replace(state.post, h=h)
            last_emp = loss.item()
        state.epoch = epoch
        _, acc = _eval_mean(model, state.post.h, train, cfg.label_smoothing)
        if last_emp is not None:
            kl = bayes.kl_value(state.post, state.prior)
            gamma = optimal_gamma(kl, k_value, m, cfg.delta, cfg.gamma1,
                                  cfg.gamma2, cfg.gamma_mode)
            complexity = (np.log(1.0 / cfg.delta) + kl) / (gamma * m)
            snap = {"pac_total": last_emp + complexity + gamma * k_value,
                    "kl": kl, "gamma": gamma, "k_value": k_value,
                    "empirical": last_emp}
            state.metrics.append(_row("stage2", epoch, model, state.post, cfg,
                                      train, heldout, snap, adam.lr))
        if acc > best_acc:
            best_acc, last_improve = acc, epoch
        elif epoch - last_improve >= rule.plateau_window:
            adam.lr *= rule.lr_decay
            last_improve = epoch
        streak = streak + 1 if acc >= rule.acc_threshold else 0
        if streak >= rule.plateau_window or adam.lr < rule.lr_floor:
            break
    return state


CHECKPOINT_VERSION = 1


def save_checkpoint(path, state: RunState, seed: int) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "stage": state.stage,
        "sizes": list(state.model.sizes),
        "prior_kind": state.prior.kind,
        "seed": int(seed),
        "h": [float(x) for x in state.post.h],
        "v": [float(x) for x in state.post.v],
        "b": [float(x) for x in state.prior.b],
        "anchor": [float(x) for x in state.prior.anchor],
    }
    with open(path, "w") as f:
        json.dump(doc, f)
        f.write("\n")


def load_checkpoint(path):
    """Returns (model, post, prior, stage, seed)."""
    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    model = nn.MlpModel(doc["sizes"])
    groups = [(g.start, g.stop) for g in model.groups]
    post = bayes.PosteriorSpec(np.array(doc["h"]), np.array(doc["v"]))
    prior = bayes.PriorSpec(np.array(doc["anchor"]), doc["prior_kind"],
                            np.array(doc["b"]), groups)
    return model, post, prior, doc["stage"], doc["seed"]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_metrics(rows, path) -> None:
    cols = METRICS_HEADER.split(",")
    lines = [METRICS_HEADER]
    lines += [",".join(_fmt(row[c]) for c in cols) for row in rows]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _curve_matches(curve: kbound.KCurve, cfg: PacBayesConfig) -> bool:
    return (curve.kind == cfg.prior_kind and curve.seed == cfg.seed
            and curve.gamma1 == cfg.gamma1 and curve.gamma2 == cfg.gamma2
            and curve.grid_size == cfg.gamma_grid_size
            and curve.n_samples == cfg.prior_samples)


def train(cfg: PacBayesConfig, train_data: Dataset, sizes, out_dir,
          heldout: Dataset | None = None,
          kcurve_path=None) -> RunState:
    """Full pipeline: init, estimate/load K, stage 1, certify, stage 2.

    Writes kcurve.json, checkpoint_stage1.json, certificate.json (for the
    stage-1 state, the point the bound is about), checkpoint.json (final
    weights) and metrics.csv into out_dir.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = init_run(cfg, sizes)
    anchor = state.prior.anchor

    cache = out / "kcurve.json"
    curve = None
    if kcurve_path is not None:
        curve = kbound.load_curve(kcurve_path)
        if curve.kind != cfg.prior_kind:
            raise ValueError(f"curve kind {curve.kind!r} does not match prior "
                             f"{cfg.prior_kind!r}")
    elif cache.exists():
        cached = kbound.load_curve(cache)
        if _curve_matches(cached, cfg):
            curve = cached
    if curve is None:
        curve = estimate_curve(cfg, state.model, anchor, train_data)
    kbound.save_curve(curve, cache)
    state.curve = curve

    stage1(state, train_data, cfg, heldout=heldout)
    save_checkpoint(out / "checkpoint_stage1.json", state, cfg.seed)
    cert = certify.evaluate_bound(state.model, state.post, state.prior, curve,
                                  cfg, train_data, heldout=heldout)
    certify.save_certificate(cert, out / "certificate.json")

    stage2(state, train_data, cfg, heldout=heldout)
    save_checkpoint(out / "checkpoint.json", state, cfg.seed)
    write_metrics(state.metrics, out / "metrics.csv")
    with open(out / "pac_config.json", "w") as f:
        json.dump({"sizes": list(sizes), **cfg.__dict__}, f, indent=1)
        f.write("\n")
    return state


def predict(model: nn.MlpModel, h: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Deterministic prediction with the posterior mean weights."""
    return np.argmax(nn.forward_np(model, h, x), axis=-1)


# ---------------------------------------------------------------------------
# Baseline grid

GRID_KEYS = ("optimizer", "lr", "weight_decay", "momentum", "noise")


@dataclass(frozen=True)
class BaselineCell:
    index: int
    optimizer: str
    lr: float
    weight_decay: float
    momentum: float
    noise: float


def expand_grid(grid: dict) -> list:
    """Cartesian product over the five grid axes, scalars allowed."""
    unknown = set(grid) - set(GRID_KEYS)
    if unknown:
        raise ValueError(f"unknown grid keys {sorted(unknown)}")
    axes = []
    for key in GRID_KEYS:
        default = {"optimizer": "adam", "lr": 1e-3, "weight_decay": 0.0,
                   "momentum": 0.0, "noise": 0.0}[key]
        val = grid.get(key, default)
        axes.append(val if isinstance(val, (list, tuple)) else [val])
    cells = []
    for i, (opt, lr, wd, mom, noise) in enumerate(product(*axes)):
        if opt not in ("adam", "sgd"):
            raise ValueError(f"optimizer {opt!r} must be adam or sgd")
        cells.append(BaselineCell(i, str(opt), float(lr), float(wd),
                                  float(mom), float(noise)))
    return cells


def run_baseline_cell(cell: BaselineCell, cfg: PacBayesConfig, sizes,
                      train: Dataset, test: Dataset) -> dict:
    """Plain training run for one grid cell; scored on mean of last 5 test accs."""
    rule = StopRule.from_config(cfg)
    model = nn.MlpModel(sizes)
    h = model.init_params(stream(cfg.seed, "init"))
    shuffle_rng = stream(cfg.seed, "baseline", cell.index, 0)
    noise_rng = stream(cfg.seed, "baseline", cell.index, 1)
    adam = nn.AdamState.zeros(model.d, lr=cell.lr) if cell.optimizer == "adam" else None
    lr, velocity = cell.lr, None
    test_accs = []
    epoch = 0
    best_acc, last_improve, streak = -1.0, 0, 0
    for epoch in range(1, cfg.stage2_max_epochs + 1):
        for idx in _batches(train.m, cfg.batch_size, shuffle_rng):
            tape = Tape()
            h_leaf = tape.leaf(h)
            h_eval = ad.add(h_leaf, cell.noise * noise_rng.standard_normal(model.d)) \
                if cell.noise else h_leaf
            logits = nn.forward(model, h_eval, train.x[idx])
            loss = nn.ce_loss(logits, train.y[idx], cfg.label_smoothing)
            g = ad.backward(tape, loss)[h_leaf.nid].data
            if cell.optimizer == "adam":
                if cell.weight_decay:
                    g = g + cell.weight_decay * h
                adam.lr = lr
                h = nn.adam_step(adam, h, g)
            else:
                h, velocity = nn.sgd_step(h, g, lr, cell.momentum,
                                          cell.weight_decay, velocity)
        _, train_acc = _eval_mean(model, h, train, cfg.label_smoothing)
        _, test_acc = _eval_mean(model, h, test, cfg.label_smoothing)
        test_accs.append(test_acc)
        if train_acc > best_acc:
            best_acc, last_improve = train_acc, epoch
        elif epoch - last_improve >= rule.plateau_window:
            lr *= rule.lr_decay
            last_improve = epoch
        streak = streak + 1 if train_acc >= rule.acc_threshold else 0
        if streak >= rule.plateau_window or lr < rule.lr_floor:
            break
    return {
        "cell": cell.index, "optimizer": cell.optimizer, "lr": cell.lr,
        "weight_decay": cell.weight_decay, "momentum": cell.momentum,
        "noise": cell.noise, "test_acc": float(np.mean(test_accs[-5:])),
        "final_train_acc": best_acc, "epochs": epoch,
    }


def _cell_worker(args):
    cell, cfg, sizes, train, test = args
    return run_baseline_cell(cell, cfg, sizes, train, test)


def train_baseline(grid: dict, cfg: PacBayesConfig, sizes, train: Dataset,
                   test: Dataset, out_dir, threads: int | None = None):
    """Run (or resume) every grid cell; returns (best row, table sorted by acc)."""
    out = Path(out_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    cells = expand_grid(grid)
    if threads is None:
        threads = int(os.environ.get("PACBAYES_THREADS", "1"))
    results, pending = {}, []
    for cell in cells:
        f = out / "cells" / f"cell_{cell.index:03d}.json"
        if f.exists():
            with open(f) as fh:
                results[cell.index] = json.load(fh)
        else:
            pending.append(cell)
    if pending:
        if threads > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                rows = pool.map(_cell_worker,
                                [(c, cfg, sizes, train, test) for c in pending])
        else:
            rows = (run_baseline_cell(c, cfg, sizes, train, test) for c in pending)
        for row in rows:
            results[row["cell"]] = row
            with open(out / "cells" / f"cell_{row['cell']:03d}.json", "w") as fh:
                json.dump(row, fh, indent=1)
                fh.write("\n")
    table = sorted(results.values(), key=lambda r: -r["test_acc"])
    header = "cell,optimizer,lr,weight_decay,momentum,noise,test_acc,final_train_acc,epochs"
    lines = [header] + [",".join(_fmt(r[k]) for k in header.split(","))
                        for r in table]
    with open(out / "table.csv", "w") as f:
        f.write("\n".join(lines) + "\n")
    best = table[0]
    with open(out / "best.json", "w") as f:
        json.dump(best, f, indent=1)
        f.write("\n")
    return best, table
