"""Command line entry points.

Subcommands: estimate-k, train, certify, evaluate, baseline-grid. All of them
read a flat JSON config file; unknown keys are rejected so typos fail loudly.

Exit codes: 0 success, 2 config or input-format error, 3 numeric failure
during training or estimation, 4 missing artifact (checkpoint, curve, file).
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import certify, kbound, nn, trainer
from .autodiff import NumericError
from .bayes import LOG_NOISE_FLOOR
from .data import Dataset, FormatError, gen_blobs, load_csv, load_idx, split
from .pacloss import PacBayesConfig
from .seeding import stream


class ConfigError(ValueError):
    pass


DATASET_KINDS = ("blobs", "csv", "idx")


@dataclass
class RunConfigFile:
    """Flat on-disk run configuration. Every key is optional in the file."""

    seed: int = 0
    prior: str = "layerwise"
    hidden: tuple = (32, 32)
    gamma1: float = 0.5
    gamma2: float = 10.0
    delta: float = 0.1
    lambda_lo: float = float(np.exp(-7.0))
    lambda_hi: float = 1.0
    stage1_epochs: int = 200
    warmup_epochs: int = 50
    prior_samples: int = 10
    lambda_queries: int = 10
    gamma_grid_size: int = 50
    clip_log_noise: bool = False
    clip_floor: float = LOG_NOISE_FLOOR
    lr: float = 1e-4
    batch_size: int = 32
    label_smoothing: float = 0.1
    gamma_mode: str = "paper"
    n_eval: int = 30
    stage2_max_epochs: int = 2000
    plateau_window: int = 20
    lr_decay: float = 0.1
    acc_threshold: float = 0.999
    lr_floor: float = 1e-5
    dataset_kind: str = "blobs"
    blobs_train: int = 1000
    blobs_heldout: int = 1000
    blobs_test: int = 10000
    blobs_classes: int = 2
    blobs_spread: float = 0.35
    blobs_label_noise: float = 0.1
    csv_path: str = ""
    split_train: float = 0.8
    split_heldout: float = 0.1
    split_test: float = 0.1
    stratify: bool = False
    idx_images: str = ""
    idx_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""
    idx_train_count: int = 0
    idx_heldout_count: int = 0

    def __post_init__(self):
        if self.dataset_kind not in DATASET_KINDS:
            raise ConfigError(f"dataset_kind {self.dataset_kind!r} not one of "
                              f"{DATASET_KINDS}")
        self.hidden = tuple(int(w) for w in self.hidden)
        if any(w < 1 for w in self.hidden):
            raise ConfigError(f"hidden widths must be >= 1, got {self.hidden}")

    def pac_config(self) -> PacBayesConfig:
        try:
            return PacBayesConfig(
                gamma1=self.gamma1, gamma2=self.gamma2, delta=self.delta,
                lambda_lo=self.lambda_lo, lambda_hi=self.lambda_hi,
                stage1_epochs=self.stage1_epochs, prior_samples=self.prior_samples,
                lambda_queries=self.lambda_queries,
                gamma_grid_size=self.gamma_grid_size,
                warmup_epochs=self.warmup_epochs,
                clip_log_noise=self.clip_log_noise, clip_floor=self.clip_floor,
                lr=self.lr, batch_size=self.batch_size,
                label_smoothing=self.label_smoothing, seed=self.seed,
                gamma_mode=self.gamma_mode, prior_kind=self.prior,
                n_eval=self.n_eval, stage2_max_epochs=self.stage2_max_epochs,
                plateau_window=self.plateau_window, lr_decay=self.lr_decay,
                acc_threshold=self.acc_threshold, lr_floor=self.lr_floor)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfigFile:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} not found")
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    known = {f.name for f in fields(RunConfigFile)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}; known keys are "
                          f"{sorted(known)}")
    try:
        return RunConfigFile(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def save_config(cfg: RunConfigFile, path) -> None:
    doc = {k: (list(v) if isinstance(v, tuple) else v)
           for k, v in cfg.__dict__.items()}
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def resolve_datasets(cfg: RunConfigFile) -> tuple:
    """Returns (train, heldout, test) per the dataset_kind block.

    Synthetic data draws three independent seeded sets so the bound's m is
    exactly the training set size. CSV and IDX sources are split instead.
    """
    if cfg.dataset_kind == "blobs":
        kw = dict(classes=cfg.blobs_classes, spread=cfg.blobs_spread,
                  label_noise=cfg.blobs_label_noise)
        train = gen_blobs(stream(cfg.seed, "data", 0), m=cfg.blobs_train, **kw)
        heldout = gen_blobs(stream(cfg.seed, "heldout-data"), m=cfg.blobs_heldout, **kw)
        test = gen_blobs(stream(cfg.seed, "test-data"), m=cfg.blobs_test, **kw)
        return train, heldout, test
    if cfg.dataset_kind == "csv":
        if not cfg.csv_path:
            raise ConfigError("dataset_kind csv needs csv_path")
        full = load_csv(cfg.csv_path)
        return split(full, (cfg.split_train, cfg.split_heldout, cfg.split_test),
                     stream(cfg.seed, "data", 2), stratify=cfg.stratify)
    if not (cfg.idx_images and cfg.idx_labels):
        raise ConfigError("dataset_kind idx needs idx_images and idx_labels")
    full = load_idx(cfg.idx_images, cfg.idx_labels)
    n_train = cfg.idx_train_count or full.m
    n_held = cfg.idx_heldout_count
    if n_train + n_held > full.m:
        raise ConfigError(f"idx_train_count + idx_heldout_count = "
                          f"{n_train + n_held} exceeds {full.m} records")
    perm = stream(cfg.seed, "data", 2).permutation(full.m)
    train = full.take(perm[:n_train])
    heldout = full.take(perm[n_train:n_train + n_held])
    if cfg.idx_test_images and cfg.idx_test_labels:
        test = load_idx(cfg.idx_test_images, cfg.idx_test_labels)
    else:
        test = full.take(perm[n_train + n_held:])
    return train, heldout, test


def model_sizes(cfg: RunConfigFile, train: Dataset) -> tuple:
    return (train.x.shape[1], *cfg.hidden, train.classes)


def cmd_estimate_k(args) -> int:
    cfg = load_config(args.config)
    pac = cfg.pac_config()
    train, _, _ = resolve_datasets(cfg)
    model = nn.MlpModel(model_sizes(cfg, train))
    h0 = model.init_params(stream(pac.seed, "init"))
    curve = trainer.estimate_curve(pac, model, h0, train)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    kbound.save_curve(curve, out)
    print(f"K curve ({curve.kind} prior, n={curve.n_samples} draws, "
          f"gamma in [{curve.gamma1}, {curve.gamma2}]) -> {out}")
    for q, k in curve.knots:
        print(f"  lambda={q:.6g}  K={k:.6g}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.prior:
        cfg.prior = args.prior
    pac = cfg.pac_config()
    train, heldout, test = resolve_datasets(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    state = trainer.train(pac, train, model_sizes(cfg, train), out,
                          heldout=heldout if heldout.m else None,
                          kcurve_path=args.kcurve)
    cert = certify.load_certificate(out / "certificate.json")
    print(f"run complete -> {out}")
    for line in certify.summary_lines(cert):
        print("  " + line)
    for name, ds in (("train", train), ("test", test)):
        loss, acc = trainer._eval_mean(state.model, state.post.h, ds,
                                       pac.label_smoothing)
        print(f"  final {name}: loss={loss:.6f} acc={acc:.4f}")
    return 0


def _load_run(run_dir, checkpoint_name):
    run = Path(run_dir)
    cfg_path = run / "config.json"
    ckpt_path = run / checkpoint_name
    if not run.exists() or not cfg_path.exists():
        raise FileNotFoundError(f"{run} is not a run directory (no config.json)")
    if not ckpt_path.exists():
        raise FileNotFoundError(f"run {run} has no {checkpoint_name}")
    cfg = load_config(cfg_path)
    model, post, prior, stage, seed = trainer.load_checkpoint(ckpt_path)
    return run, cfg, model, post, prior


def cmd_certify(args) -> int:
    run, cfg, model, post, prior = _load_run(args.run, "checkpoint_stage1.json")
    pac = cfg.pac_config()
    curve_path = run / "kcurve.json"
    if not curve_path.exists():
        raise FileNotFoundError(f"run {run} has no kcurve.json")
    curve = kbound.load_curve(curve_path)
    train, heldout, _ = resolve_datasets(cfg)
    if args.heldout:
        heldout = load_csv(args.heldout)
    cert = certify.evaluate_bound(model, post, prior, curve, pac, train,
                                  heldout=heldout if heldout.m else None,
                                  n_eval=args.n_eval)
    certify.save_certificate(cert, run / "certificate.json")
    for line in certify.summary_lines(cert):
        print(line)
    return 0


def cmd_evaluate(args) -> int:
    run, cfg, model, post, prior = _load_run(args.run, "checkpoint.json")
    pac = cfg.pac_config()
    spec = args.data
    if spec.startswith("split:"):
        name = spec[len("split:"):]
        pick = {"train": 0, "heldout": 1, "test": 2}
        if name not in pick:
            raise ConfigError(f"unknown split {name!r}; use train, heldout or test")
        ds = resolve_datasets(cfg)[pick[name]]
    else:
        ds = load_csv(spec)
    if not ds.m:
        raise ConfigError(f"dataset {spec!r} is empty")
    loss, acc = trainer._eval_mean(model, post.h, ds, pac.label_smoothing)
    print(f"mean weights: loss={loss:.6f} acc={acc:.4f}  ({ds.m} points)")
    rng = stream(pac.seed, "certify")
    std = np.exp(0.5 * post.v)
    losses, accs = [], []
    for _ in range(pac.n_eval):
        w = post.h + std * rng.standard_normal(model.d)
        logits = nn.forward_np(model, w, ds.x)
        losses.append(nn.ce_np(logits, ds.y, pac.label_smoothing)[0])
        accs.append(nn.accuracy_np(logits, ds.y))
    print(f"posterior ({pac.n_eval} draws): loss={float(np.mean(losses)):.6f} "
          f"acc={float(np.mean(accs)):.4f}")
    return 0


def cmd_baseline_grid(args) -> int:
    cfg = load_config(args.config)
    pac = cfg.pac_config()
    grid_path = Path(args.grid)
    if not grid_path.exists():
        raise FileNotFoundError(f"grid file {grid_path} not found")
    try:
        with open(grid_path) as f:
            grid = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"grid {grid_path} is not valid JSON: {exc}") from exc
    if not isinstance(grid, dict):
        raise ConfigError("grid file must hold a JSON object")
    train, _, test = resolve_datasets(cfg)
    try:
        best, table = trainer.train_baseline(grid, pac,
                                             model_sizes(cfg, train),
                                             train, test, args.out,
                                             threads=args.threads)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print(f"{len(table)} cells -> {Path(args.out) / 'table.csv'}")
    print("best: " + json.dumps(best))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pacbayes",
        description="Tuning-free PAC-Bayes training with numerical certificates")
    sub = p.add_subparsers(dest="command", required=True)

    pk = sub.add_parser("estimate-k", help="estimate the moment-bound curve "
                                           "before training")
    pk.add_argument("--config", required=True)
    pk.add_argument("--out", required=True)
    pk.set_defaults(fn=cmd_estimate_k)

    pt = sub.add_parser("train", help="run the two-stage pipeline")
    pt.add_argument("--config", required=True)
    pt.add_argument("--out", required=True)
    pt.add_argument("--kcurve", default=None,
                    help="reuse an already estimated curve file")
    pt.add_argument("--prior", choices=("scalar", "layerwise"), default=None,
                    help="override the config's prior kind")
    pt.set_defaults(fn=cmd_train)

    pc = sub.add_parser("certify", help="recompute the certificate of a run")
    pc.add_argument("--run", required=True)
    pc.add_argument("--heldout", default=None,
                    help="CSV dataset to check the bound against")
    pc.add_argument("--n-eval", type=int, default=None)
    pc.set_defaults(fn=cmd_certify)

    pe = sub.add_parser("evaluate", help="evaluate final weights on a dataset")
    pe.add_argument("--run", required=True)
    pe.add_argument("--data", required=True,
                    help="CSV path or split:train|split:heldout|split:test")
    pe.set_defaults(fn=cmd_evaluate)

    pb = sub.add_parser("baseline-grid", help="train the tuned-baseline grid")
    pb.add_argument("--config", required=True)
    pb.add_argument("--grid", required=True)
    pb.add_argument("--out", required=True)
    pb.add_argument("--threads", type=int, default=None,
                    help="parallel cells (default: PACBAYES_THREADS or 1)")
    pb.set_defaults(fn=cmd_baseline_grid)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
