"""AdamW optimization, training steps, epoch loop, and checkpoint persistence.

Four step flavors share one seed-derivation convention so degenerate configs
collapse onto their baselines exactly:

* ``scal``:  0.5 * (CE_clean + CE_adv) + alpha * InfoNCE(z, z_adv)
* ``uscal``: InfoNCE(z1, z2) + alpha * InfoNCE(z1, z_adv)
* ``ce``:    plain cross-entropy fine-tuning (the supervised baseline)
* ``views``: dropout-only two-view contrastive training (unsupervised baseline)

The adversarial branch consumes ``clean_embedding + delta`` where delta is a
constant computed by the attack pass; gradients therefore flow from both CE
branches into every shared parameter (embedding table included) while nothing
differentiates through the perturbation's construction.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, TextIO

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, derive_seed
from .attacks import ATTACK_KINDS, AttackConfig, gen_supervised_adv, gen_unsupervised_adv
from .encoder import (
    EncoderConfig,
    EncoderParams,
    classify,
    encode_from_embeddings,
    forward_full,
    pool,
)
from .objectives import (
    LossConfig,
    LossReport,
    NEGATIVE_MODES,
    cross_entropy,
    info_nce,
    info_nce_split,
)
from .text import Batch, Vocab, iter_batches

logger = logging.getLogger(__name__)

TRAIN_MODES = ("scal", "uscal", "ce", "views")
DEV_METRICS = ("accuracy", "f1", "mcc", "spearman")


class NonFiniteLossError(RuntimeError):
    """Raised when a step's total loss is NaN or infinite."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite total loss at step {step}: {value}")
        self.step = step


@dataclass
class TrainConfig:
    mode: str = "scal"
    lr: float = 3e-5
    weight_decay: float = 0.01
    warmup_ratio: float = 0.1
    batch_size: int = 32
    max_epochs: int = 15
    max_steps: int = 0               # 0 = bounded by max_epochs only
    early_stop_patience: int = 3     # evaluations without improvement before stopping
    eval_interval_steps: int = 250
    seed: int = 42
    alpha: float = 0.3
    epsilon: float = 0.3
    temperature: float = 0.05
    attack_kind: str = "fgm"
    negative_mode: str = "adv-keys"
    dev_metric: str = "accuracy"
    grad_clip: float = 0.0           # global-norm clip; 0 disables ("faithful" mode)

    def validate(self) -> None:
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError(f"warmup_ratio must be in [0, 1), got {self.warmup_ratio}")
        if self.eval_interval_steps < 1:
            raise ValueError("eval_interval_steps must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.max_steps < 0 or self.early_stop_patience < 0:
            raise ValueError("max_steps and early_stop_patience must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0")
        if self.attack_kind not in ATTACK_KINDS:
            raise ValueError(f"attack_kind must be one of {ATTACK_KINDS}")
        if self.negative_mode not in NEGATIVE_MODES:
            raise ValueError(f"negative_mode must be one of {NEGATIVE_MODES}")
        if self.dev_metric not in DEV_METRICS:
            raise ValueError(f"dev_metric must be one of {DEV_METRICS}")
        self.loss_config().validate()
        self.attack_config().validate()

    def loss_config(self) -> LossConfig:
        return LossConfig(
            temperature=self.temperature,
            alpha=self.alpha,
            negative_mode=self.negative_mode,
        )

    def attack_config(self) -> AttackConfig:
        return AttackConfig(kind=self.attack_kind, epsilon=self.epsilon)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


class OptimizerState:
    """AdamW moments (kept in float64) and the shared step counter."""

    def __init__(self, params: EncoderParams):
        self.t = 0
        self.m: dict[str, np.ndarray] = {
            name: np.zeros(t.data.shape, dtype=np.float64) for name, t in params.named()
        }
        self.v: dict[str, np.ndarray] = {
            name: np.zeros(t.data.shape, dtype=np.float64) for name, t in params.named()
        }


def adamw_step(
    params: EncoderParams,
    state: OptimizerState,
    lr_t: float,
    weight_decay: float,
) -> bool:
    """One decoupled-weight-decay Adam update from the tensors' ``grad`` fields.

    Missing grads count as zero. If any gradient is non-finite the whole step
    is skipped (parameters and step counter untouched) and a warning is
    logged. Returns whether the step was applied.
    """
    grads: dict[str, np.ndarray] = {}
    for name, t in params.named():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            logger.warning("adamw_step: non-finite gradient in %s; step skipped", name)
            return False
        grads[name] = g
    state.t += 1
    t = state.t
    bc1 = 1.0 - BETA1 ** t
    bc2 = 1.0 - BETA2 ** t
    for name, p in params.named():
        g = grads[name].astype(np.float64)
        m = state.m[name]
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS) + weight_decay * p.data.astype(np.float64)
        p.data = (p.data.astype(np.float64) - lr_t * update).astype(np.float32)
    return True


def lr_at(step: int, total_steps: int, warmup_ratio: float, base_lr: float) -> float:
    """Linear warmup from 0 to base_lr, then linear decay back to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup_steps = int(warmup_ratio * total_steps)
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return base_lr
    return base_lr * (total_steps - step) / (total_steps - warmup_steps)


def clip_gradients(params: EncoderParams, max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for _, t in params.named():
        if t.grad is not None:
            g = t.grad.astype(np.float64)
            total += float((g * g).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        factor = np.float32(max_norm / norm)
        for _, t in params.named():
            if t.grad is not None:
                t.grad = t.grad * factor
    return norm


# ---------------------------------------------------------------------------
# training steps
# ---------------------------------------------------------------------------


def _check_finite_total(total: Tensor, step: int) -> None:
    if not math.isfinite(total.item()):
        raise NonFiniteLossError(step, total.item())


def _finish_step(
    params: EncoderParams,
    total: Tensor,
    opt: OptimizerState,
    tcfg: TrainConfig,
    lr_t: float,
    step: int,
) -> None:
    _check_finite_total(total, step)
    ad.backward(total)
    if tcfg.grad_clip > 0:
        clip_gradients(params, tcfg.grad_clip)
    adamw_step(params, opt, lr_t, tcfg.weight_decay)


def scal_loss_graph(
    batch: Batch,
    params: EncoderParams,
    delta: np.ndarray,
    loss_cfg: LossConfig,
    step_seed: int,
    train_mode: bool,
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Build the supervised total on the active tape from a fixed perturbation.

    Returns (total, ce_clean, ce_adv, contrastive). The adversarial branch
    starts at clean_embedding + delta, so its gradients reach the embedding
    table while nothing differentiates through delta itself.
    """
    clean = forward_full(batch, params, derive_seed(step_seed, "clean"), train_mode)
    ce_clean = cross_entropy(clean.logits, batch.labels)

    adv_input = ad.add(clean.emb, Tensor(delta))
    adv_seed = derive_seed(step_seed, "adv")
    h_adv = encode_from_embeddings(
        adv_input, batch.attn_mask, params, derive_seed(adv_seed, "encode"), train_mode
    )
    ce_adv = cross_entropy(classify(h_adv, params), batch.labels)
    z_adv = pool(h_adv, params)

    if loss_cfg.negative_mode == "adv-keys":
        ct = info_nce(clean.z, z_adv, loss_cfg.temperature, loss_cfg.norm_guard)
    else:
        ct = info_nce_split(
            clean.z, z_adv, clean.z, loss_cfg.temperature, loss_cfg.norm_guard
        )
    total = ad.add(
        ad.scale(ad.add(ce_clean, ce_adv), 0.5), ad.scale(ct, loss_cfg.alpha)
    )
    return total, ce_clean, ce_adv, ct


def scal_train_step(
    batch: Batch,
    params: EncoderParams,
    opt: OptimizerState,
    tcfg: TrainConfig,
    step_seed: int,
    lr_t: float,
    step: int = 0,
) -> LossReport:
    """Supervised contrastive-adversarial step: attack, two CE branches, InfoNCE, update."""
    loss_cfg = tcfg.loss_config()
    adv = gen_supervised_adv(
        batch, params, tcfg.attack_config(), derive_seed(step_seed, "attack"), train_mode=True
    )
    params.zero_grads()
    with ad.Tape():
        total, ce_clean, ce_adv, ct = scal_loss_graph(
            batch, params, adv.delta, loss_cfg, step_seed, train_mode=True
        )
        _finish_step(params, total, opt, tcfg, lr_t, step)
    return LossReport(
        total=total.item(),
        ce_clean=ce_clean.item(),
        ce_adv=ce_adv.item(),
        contrastive=ct.item(),
    )


def uscal_loss_graph(
    batch: Batch,
    params: EncoderParams,
    delta: np.ndarray,
    loss_cfg: LossConfig,
    step_seed: int,
    train_mode: bool,
) -> tuple[Tensor, Tensor, Tensor]:
    """Build the unsupervised total on the active tape. Returns (total, ct_views, ct_adv)."""
    view1 = forward_full(batch, params, derive_seed(step_seed, "view1"), train_mode)
    view2 = forward_full(batch, params, derive_seed(step_seed, "view2"), train_mode)
    ct_views = info_nce(view1.z, view2.z, loss_cfg.temperature, loss_cfg.norm_guard)

    adv_input = ad.add(view1.emb, Tensor(delta))
    adv_seed = derive_seed(step_seed, "adv")
    h_adv = encode_from_embeddings(
        adv_input, batch.attn_mask, params, derive_seed(adv_seed, "encode"), train_mode
    )
    z_adv = pool(h_adv, params)
    if loss_cfg.negative_mode == "adv-keys":
        ct_adv = info_nce(view1.z, z_adv, loss_cfg.temperature, loss_cfg.norm_guard)
    else:
        ct_adv = info_nce_split(
            view1.z, z_adv, view1.z, loss_cfg.temperature, loss_cfg.norm_guard
        )
    total = ad.add(ct_views, ad.scale(ct_adv, loss_cfg.alpha))
    return total, ct_views, ct_adv


def uscal_train_step(
    batch: Batch,
    params: EncoderParams,
    opt: OptimizerState,
    tcfg: TrainConfig,
    step_seed: int,
    lr_t: float,
    step: int = 0,
) -> LossReport:
    """Unsupervised step: two dropout views, contrastive attack, weighted total, update."""
    loss_cfg = tcfg.loss_config()
    adv = gen_unsupervised_adv(
        batch,
        params,
        loss_cfg,
        tcfg.attack_config(),
        seed_view1=derive_seed(step_seed, "view1"),
        seed_view2=derive_seed(step_seed, "view2"),
        train_mode=True,
    )
    params.zero_grads()
    with ad.Tape():
        total, ct_views, ct_adv = uscal_loss_graph(
            batch, params, adv.delta, loss_cfg, step_seed, train_mode=True
        )
        _finish_step(params, total, opt, tcfg, lr_t, step)
    return LossReport(
        total=total.item(), ct_views=ct_views.item(), ct_adv=ct_adv.item()
    )


def ce_train_step(
    batch: Batch,
    params: EncoderParams,
    opt: OptimizerState,
    tcfg: TrainConfig,
    step_seed: int,
    lr_t: float,
    step: int = 0,
) -> LossReport:
    """Plain cross-entropy fine-tuning baseline (same seed path as scal's clean branch)."""
    params.zero_grads()
    with ad.Tape():
        out = forward_full(batch, params, derive_seed(step_seed, "clean"), train_mode=True)
        ce = cross_entropy(out.logits, batch.labels)
        _finish_step(params, ce, opt, tcfg, lr_t, step)
    return LossReport(total=ce.item(), ce_clean=ce.item())


def views_train_step(
    batch: Batch,
    params: EncoderParams,
    opt: OptimizerState,
    tcfg: TrainConfig,
    step_seed: int,
    lr_t: float,
    step: int = 0,
) -> LossReport:
    """Dropout-only two-view contrastive baseline (uscal's alpha=0 degenerate)."""
    loss_cfg = tcfg.loss_config()
    params.zero_grads()
    with ad.Tape():
        view1 = forward_full(batch, params, derive_seed(step_seed, "view1"), train_mode=True)
        view2 = forward_full(batch, params, derive_seed(step_seed, "view2"), train_mode=True)
        ct = info_nce(view1.z, view2.z, loss_cfg.temperature, loss_cfg.norm_guard)
        _finish_step(params, ct, opt, tcfg, lr_t, step)
    return LossReport(total=ct.item(), ct_views=ct.item())


_STEP_FNS: dict[str, Callable] = {
    "scal": scal_train_step,
    "uscal": uscal_train_step,
    "ce": ce_train_step,
    "views": views_train_step,
}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CALCKPT1"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointConfigError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: EncoderConfig
    tensors: dict[str, np.ndarray]
    step: int = 0
    dev_metric_name: str = "accuracy"
    dev_metric_value: float = 0.0
    rng_seed: int = 0
    optimizer: Optional[dict] = None     # {"t": int, "m": {...}, "v": {...}}
    version: int = CHECKPOINT_VERSION

    @classmethod
    def from_params(
        cls,
        params: EncoderParams,
        step: int = 0,
        dev_metric_name: str = "accuracy",
        dev_metric_value: float = 0.0,
        rng_seed: int = 0,
        optimizer: Optional[OptimizerState] = None,
    ) -> "Checkpoint":
        opt = None
        if optimizer is not None:
            opt = {
                "t": optimizer.t,
                "m": {k: v.astype(np.float32) for k, v in optimizer.m.items()},
                "v": {k: v.astype(np.float32) for k, v in optimizer.v.items()},
            }
        return cls(
            config=params.config,
            tensors=params.copy_values(),
            step=step,
            dev_metric_name=dev_metric_name,
            dev_metric_value=dev_metric_value,
            rng_seed=rng_seed,
            optimizer=opt,
        )

    def build_params(self) -> EncoderParams:
        params = EncoderParams.init_random(self.config, seed=0)
        params.load_values(self.tensors)
        return params

    def build_optimizer(self, params: EncoderParams) -> OptimizerState:
        state = OptimizerState(params)
        if self.optimizer is not None:
            state.t = int(self.optimizer["t"])
            for k in state.m:
                state.m[k] = self.optimizer["m"][k].astype(np.float64)
                state.v[k] = self.optimizer["v"][k].astype(np.float64)
        return state


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """Binary layout: magic, u32 header length, text header, float32 LE payloads."""
    directory: list[tuple[str, np.ndarray]] = list(ckpt.tensors.items())
    if ckpt.optimizer is not None:
        for k, arr in ckpt.optimizer["m"].items():
            directory.append((f"opt.m.{k}", arr))
        for k, arr in ckpt.optimizer["v"].items():
            directory.append((f"opt.v.{k}", arr))

    lines = [
        f"version={ckpt.version}",
        f"step={ckpt.step}",
        f"dev_metric_name={ckpt.dev_metric_name}",
        f"dev_metric_value={ckpt.dev_metric_value!r}",
        f"rng_seed={ckpt.rng_seed}",
        f"optimizer_t={ckpt.optimizer['t'] if ckpt.optimizer is not None else -1}",
        "[config]",
    ]
    for k, v in ckpt.config.to_dict().items():
        lines.append(f"{k}={v!r}")
    lines.append("[tensors]")
    for name, arr in directory:
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"{name} {arr.ndim} {dims}")
    header = ("\n".join(lines) + "\n").encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for _, arr in directory:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str, expected_config: Optional[EncoderConfig] = None) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 4:
        raise CheckpointTruncatedError(f"{path}: file too short for a checkpoint")
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(
            f"{path}: bad magic {blob[:len(CHECKPOINT_MAGIC)]!r}, expected {CHECKPOINT_MAGIC!r}"
        )
    (header_len,) = struct.unpack_from("<I", blob, len(CHECKPOINT_MAGIC))
    header_start = len(CHECKPOINT_MAGIC) + 4
    if len(blob) < header_start + header_len:
        raise CheckpointTruncatedError(f"{path}: header truncated")
    header = blob[header_start : header_start + header_len].decode("utf-8")

    meta: dict[str, str] = {}
    config_kv: dict[str, str] = {}
    directory: list[tuple[str, tuple[int, ...]]] = []
    section = "meta"
    for line in header.splitlines():
        if not line:
            continue
        if line == "[config]":
            section = "config"
            continue
        if line == "[tensors]":
            section = "tensors"
            continue
        if section == "tensors":
            parts = line.split()
            name, rank = parts[0], int(parts[1])
            dims = tuple(int(d) for d in parts[2 : 2 + rank])
            directory.append((name, dims))
        else:
            key, _, value = line.partition("=")
            (meta if section == "meta" else config_kv)[key] = value

    version = int(meta.get("version", "-1"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, expected {CHECKPOINT_VERSION}"
        )
    config = EncoderConfig.from_dict({k: eval_literal(v) for k, v in config_kv.items()})

    expected_shapes = EncoderParams.tensor_shapes(config)
    for name, dims in directory:
        base = name
        if name.startswith("opt.m.") or name.startswith("opt.v."):
            base = name[6:]
        want = expected_shapes.get(base)
        if want is None:
            raise CheckpointShapeError(f"{path}: unexpected tensor {name!r} in directory")
        if dims != want:
            raise CheckpointShapeError(
                f"{path}: tensor {name} has shape {dims}, config expects {want}"
            )

    offset = header_start + header_len
    tensors: dict[str, np.ndarray] = {}
    opt_m: dict[str, np.ndarray] = {}
    opt_v: dict[str, np.ndarray] = {}
    for name, dims in directory:
        count = int(np.prod(dims)) if dims else 1
        nbytes = count * 4
        if offset + nbytes > len(blob):
            raise CheckpointTruncatedError(f"{path}: payload for {name} truncated")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(dims)
        offset += nbytes
        if name.startswith("opt.m."):
            opt_m[name[6:]] = arr.copy()
        elif name.startswith("opt.v."):
            opt_v[name[6:]] = arr.copy()
        else:
            tensors[name] = arr.copy()

    missing = set(expected_shapes) - set(tensors)
    if missing:
        raise CheckpointShapeError(f"{path}: missing tensors {sorted(missing)}")

    optimizer = None
    opt_t = int(meta.get("optimizer_t", "-1"))
    if opt_t >= 0:
        optimizer = {"t": opt_t, "m": opt_m, "v": opt_v}

    ckpt = Checkpoint(
        config=config,
        tensors=tensors,
        step=int(meta.get("step", "0")),
        dev_metric_name=meta.get("dev_metric_name", "accuracy"),
        dev_metric_value=float(eval_literal(meta.get("dev_metric_value", "0.0"))),
        rng_seed=int(meta.get("rng_seed", "0")),
        optimizer=optimizer,
    )
    if expected_config is not None and config != expected_config:
        raise CheckpointConfigError(
            f"{path}: embedded config {config.to_dict()} does not match expected "
            f"{expected_config.to_dict()}"
        )
    return ckpt


def eval_literal(text: str):
    """Parse a repr()'d int/float/string scalar from a checkpoint header."""
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text.strip("'\"")


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class RunLog:
    """Optional sinks for per-step and per-evaluation lines (tab-separated)."""

    steps: Optional[TextIO] = None
    evals: Optional[TextIO] = None

    def log_step(self, step: int, lr: float, report: LossReport) -> None:
        if self.steps is None:
            return

        def fmt(x: Optional[float]) -> str:
            return "-" if x is None else f"{x:.6f}"

        self.steps.write(
            "\t".join(
                [
                    str(step),
                    f"{lr:.8g}",
                    fmt(report.total),
                    fmt(report.ce_clean),
                    fmt(report.ce_adv),
                    fmt(report.contrastive),
                    fmt(report.ct_views),
                    fmt(report.ct_adv),
                ]
            )
            + "\n"
        )

    def log_eval(self, step: int, metric: str, value: float) -> None:
        if self.evals is None:
            return
        self.evals.write(f"{step}\t{metric}\t{value:.6f}\n")


@dataclass
class TrainResult:
    best: Checkpoint
    history: list[tuple[int, str, float]] = field(default_factory=list)
    steps_run: int = 0
    reports: list[LossReport] = field(default_factory=list)


def planned_total_steps(n_examples: int, tcfg: TrainConfig) -> int:
    per_epoch = math.ceil(n_examples / tcfg.batch_size)
    total = per_epoch * tcfg.max_epochs
    if tcfg.max_steps > 0:
        total = min(total, tcfg.max_steps)
    return total


def train_loop(
    train_rows: Sequence,
    vocab: Vocab,
    params: EncoderParams,
    tcfg: TrainConfig,
    eval_fn: Callable[[EncoderParams], float],
    log: Optional[RunLog] = None,
    keep_reports: bool = False,
) -> TrainResult:
    """Epoch loop with periodic dev evaluation, early stopping, best tracking.

    ``eval_fn`` scores the current parameters on the dev set (higher is
    better). The best-scoring snapshot is kept; training stops after
    ``early_stop_patience`` was exceeded by consecutive non-improving
    evaluations, after ``max_steps``, or after ``max_epochs``.
    """
    tcfg.validate()
    if not train_rows:
        raise ValueError("train_loop: empty training set")
    step_fn = _STEP_FNS[tcfg.mode]
    total_steps = planned_total_steps(len(train_rows), tcfg)
    opt = OptimizerState(params)

    best_value = -math.inf
    best_ckpt: Optional[Checkpoint] = None
    history: list[tuple[int, str, float]] = []
    reports: list[LossReport] = []
    since_best = 0
    step = 0
    stop = False

    def evaluate(at_step: int) -> None:
        nonlocal best_value, best_ckpt, since_best, stop
        value = eval_fn(params)
        history.append((at_step, tcfg.dev_metric, value))
        if log:
            log.log_eval(at_step, tcfg.dev_metric, value)
        improved = value > best_value
        if improved:
            best_value = value
            best_ckpt = Checkpoint.from_params(
                params,
                step=at_step,
                dev_metric_name=tcfg.dev_metric,
                dev_metric_value=value,
                rng_seed=tcfg.seed,
            )
            since_best = 0
        else:
            since_best += 1
            if since_best > tcfg.early_stop_patience:
                stop = True

    for epoch in range(tcfg.max_epochs):
        for batch in iter_batches(
            train_rows,
            vocab,
            params.config.max_len,
            tcfg.batch_size,
            tcfg.seed,
            epoch,
            shuffle=True,
        ):
            lr_t = lr_at(step, total_steps, tcfg.warmup_ratio, tcfg.lr)
            step_seed = derive_seed(tcfg.seed, "step", step)
            report = step_fn(batch, params, opt, tcfg, step_seed, lr_t, step=step)
            if keep_reports:
                reports.append(report)
            if log:
                log.log_step(step, lr_t, report)
            step += 1
            if step % tcfg.eval_interval_steps == 0:
                evaluate(step)
            if stop or step >= total_steps:
                break
        if stop or step >= total_steps:
            break

    if not history:
        evaluate(step)
    if best_ckpt is None:
        best_ckpt = Checkpoint.from_params(
            params,
            step=step,
            dev_metric_name=tcfg.dev_metric,
            dev_metric_value=best_value if math.isfinite(best_value) else 0.0,
            rng_seed=tcfg.seed,
        )
    return TrainResult(best=best_ckpt, history=history, steps_run=step, reports=reports)
