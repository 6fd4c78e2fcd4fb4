"""Contrastive adversarial training lab for small text encoders.

A self-contained laboratory: a minimal reverse-mode autodiff engine on
float32 numpy arrays, a miniature transformer encoder with an explicit
embedding seam, single-step FGSM/FGM embedding attacks, InfoNCE and
cross-entropy objectives, supervised and unsupervised contrastive-adversarial
training loops, and classification / similarity / robustness evaluation.
"""

from .autodiff import Tape, Tensor, backward, derive_seed, grad_check, rng_from_seed
from .attacks import AttackConfig, fgm_perturb, fgsm_perturb, gen_supervised_adv, gen_unsupervised_adv
from .encoder import EncoderConfig, EncoderParams, classify, embed_tokens, encode_from_embeddings, forward_full, pool
from .metrics import (
    MetricReport,
    accuracy,
    evaluate_classification,
    evaluate_similarity,
    evaluate_under_attack,
    f1_binary,
    mcc,
    spearman,
)
from .objectives import LossConfig, LossReport, cross_entropy, info_nce, scal_total, uscal_total
from .text import Batch, Vocab, build_vocab, encode_batch, tokenize
from .trainer import (
    Checkpoint,
    OptimizerState,
    TrainConfig,
    adamw_step,
    ce_train_step,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    scal_train_step,
    train_loop,
    uscal_train_step,
    views_train_step,
)

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "Batch", "Checkpoint", "EncoderConfig", "EncoderParams",
    "LossConfig", "LossReport", "MetricReport", "OptimizerState", "Tape",
    "Tensor", "TrainConfig", "Vocab", "accuracy", "adamw_step", "backward",
    "build_vocab", "ce_train_step", "classify", "cross_entropy", "derive_seed",
    "embed_tokens", "encode_batch", "encode_from_embeddings",
    "evaluate_classification", "evaluate_similarity", "evaluate_under_attack",
    "f1_binary", "fgm_perturb", "fgsm_perturb", "forward_full",
    "gen_supervised_adv", "gen_unsupervised_adv", "grad_check", "info_nce",
    "load_checkpoint", "lr_at", "mcc", "pool", "rng_from_seed",
    "save_checkpoint", "scal_total", "scal_train_step", "spearman",
    "tokenize", "train_loop", "uscal_total", "uscal_train_step",
    "views_train_step",
]
