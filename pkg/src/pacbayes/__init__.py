"""Tuning-free PAC-Bayes training for small MLPs with numerical certificates.

Train a stochastic network by directly minimizing a PAC-Bayes risk bound
whose Gaussian prior scale is itself trained, pay for that freedom through
an explicitly computed correction term, and walk away with a certificate
that upper-bounds the expected loss of the posterior without a validation
set. No learning-rate or regularization tuning is involved; every knob has
a fixed default.
"""
from .autodiff import DimensionError, NumericError, Tape, Tensor, backward
from .bayes import (LOG_NOISE_FLOOR, PosteriorSpec, PriorSpec, clamp_log_noise,
                    init_specs, kl_layerwise, kl_scalar, kl_value,
                    sample_posterior, sample_prior)
from .certify import (BoundCertificate, CertificateParams, correction_eta,
                      evaluate_bound, lipschitz_constants, load_certificate,
                      save_certificate)
from .data import Dataset, FormatError, gen_blobs, load_csv, load_idx, save_csv, split
from .kbound import (GammaGrid, KCurve, build_curve, empirical_moment,
                     eval_curve, load_curve, save_curve, solve_kmin)
from .nn import AdamState, MlpModel, adam_step, ce_loss, forward, sgd_step
from .pacloss import PacBayesConfig, PacLossBreakdown, optimal_gamma, pac_loss
from .seeding import stream
from .trainer import (RunState, StopRule, load_checkpoint, stage1, stage2,
                      train, train_baseline)

__version__ = "0.1.0"

__all__ = [
    "AdamState", "BoundCertificate", "CertificateParams", "Dataset",
    "DimensionError", "FormatError", "GammaGrid", "KCurve", "LOG_NOISE_FLOOR",
    "MlpModel", "NumericError", "PacBayesConfig", "PacLossBreakdown",
    "PosteriorSpec", "PriorSpec", "RunState", "StopRule", "Tape", "Tensor",
    "adam_step", "backward", "build_curve", "ce_loss", "clamp_log_noise",
    "correction_eta", "empirical_moment", "eval_curve", "evaluate_bound",
    "forward", "gen_blobs", "init_specs", "kl_layerwise", "kl_scalar",
    "kl_value", "lipschitz_constants", "load_certificate", "load_checkpoint",
    "load_csv", "load_curve", "load_idx", "optimal_gamma", "pac_loss",
    "sample_posterior", "sample_prior", "save_certificate", "save_csv",
    "save_curve", "sgd_step", "solve_kmin", "split", "stage1", "stage2",
    "stream", "train", "train_baseline", "__version__",
]
