"""Miniature transformer text encoder with an explicit embedding seam.

The forward pass is split in two on purpose: ``embed_tokens`` produces the
token+position embeddings (the point where adversarial perturbations are
injected and where their driving gradients are read), and
``encode_from_embeddings`` runs the transformer stack from any embedding
matrix. The [CLS]-position hidden vector ``h`` is the sentence
representation; a dense+tanh pooler maps it to the contrastive space ``z``
and an affine head produces classification logits.

All branches of a training step (clean, adversarial, both dropout views)
share one ``EncoderParams`` object, so one optimizer update is seen by all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, derive_seed, rng_from_seed
from .text import Batch

_NEG_MASK = -1e9


@dataclass
class EncoderConfig:
    vocab_size: int
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 256
    dropout: float = 0.1
    max_len: int = 32
    num_classes: int = 0  # 0 = no classifier head (unsupervised use)

    def validate(self) -> None:
        if self.vocab_size < 5:
            raise ValueError("vocab_size must cover the 4 reserved ids plus content")
        for name in ("hidden", "layers", "heads", "ffn_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hidden % self.heads != 0:
            raise ValueError(
                f"hidden ({self.hidden}) must be divisible by heads ({self.heads})"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.num_classes < 0:
            raise ValueError("num_classes must be >= 0")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "hidden": self.hidden,
            "layers": self.layers,
            "heads": self.heads,
            "ffn_dim": self.ffn_dim,
            "dropout": self.dropout,
            "max_len": self.max_len,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        cfg = cls(
            vocab_size=int(d["vocab_size"]),
            hidden=int(d["hidden"]),
            layers=int(d["layers"]),
            heads=int(d["heads"]),
            ffn_dim=int(d["ffn_dim"]),
            dropout=float(d["dropout"]),
            max_len=int(d["max_len"]),
            num_classes=int(d["num_classes"]),
        )
        cfg.validate()
        return cfg


class EncoderParams:
    """All learnable weights, addressable by name in a stable order."""

    def __init__(self, config: EncoderConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    @staticmethod
    def tensor_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
        h, f = config.hidden, config.ffn_dim
        shapes: dict[str, tuple[int, ...]] = {
            "tok_emb": (config.vocab_size, h),
            "pos_emb": (config.max_len, h),
            "emb_ln_g": (h,),
            "emb_ln_b": (h,),
        }
        for i in range(config.layers):
            p = f"layer{i}."
            shapes[p + "wq"] = (h, h)
            shapes[p + "bq"] = (h,)
            shapes[p + "wk"] = (h, h)
            shapes[p + "bk"] = (h,)
            shapes[p + "wv"] = (h, h)
            shapes[p + "bv"] = (h,)
            shapes[p + "wo"] = (h, h)
            shapes[p + "bo"] = (h,)
            shapes[p + "ln1_g"] = (h,)
            shapes[p + "ln1_b"] = (h,)
            shapes[p + "w1"] = (h, f)
            shapes[p + "b1"] = (f,)
            shapes[p + "w2"] = (f, h)
            shapes[p + "b2"] = (h,)
            shapes[p + "ln2_g"] = (h,)
            shapes[p + "ln2_b"] = (h,)
        shapes["pooler_w"] = (h, h)
        shapes["pooler_b"] = (h,)
        if config.num_classes > 0:
            shapes["cls_w"] = (h, config.num_classes)
            shapes["cls_b"] = (config.num_classes,)
        return shapes

    @classmethod
    def init_random(cls, config: EncoderConfig, seed: int) -> "EncoderParams":
        """Gaussian(0, 0.02) weights, unit layer-norm gains, zero biases."""
        config.validate()
        tensors: dict[str, Tensor] = {}
        for name, shape in cls.tensor_shapes(config).items():
            rng = rng_from_seed(derive_seed(seed, "init", name))
            if name.endswith(("_g",)):
                data = np.ones(shape, dtype=np.float32)
            elif name.endswith(("_b", "bq", "bk", "bv", "bo", "b1", "b2", "pooler_b", "cls_b")):
                data = np.zeros(shape, dtype=np.float32)
            else:
                data = (rng.standard_normal(shape) * 0.02).astype(np.float32)
            tensors[name] = Tensor(data, requires_grad=True)
        return cls(config, tensors)

    def named(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads_snapshot(self) -> dict[str, Optional[np.ndarray]]:
        return {name: t.grad for name, t in self.tensors.items()}

    def restore_grads(self, snapshot: dict[str, Optional[np.ndarray]]) -> None:
        for name, t in self.tensors.items():
            t.grad = snapshot[name]

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.tensors.values())

    def checksum(self) -> float:
        return float(sum(float(np.abs(t.data).sum(dtype=np.float64)) for t in self.tensors.values()))

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, t in self.tensors.items():
            arr = values[name]
            if arr.shape != t.data.shape:
                raise ValueError(
                    f"parameter {name}: shape {arr.shape} does not match {t.data.shape}"
                )
            t.data = np.ascontiguousarray(arr, dtype=np.float32)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map over the last axis of a 2-D or 3-D activation."""
    if x.ndim == 2:
        return ad.add_bias(ad.matmul(x, w), b)
    lead = x.shape[:-1]
    flat = ad.reshape(x, (-1, x.shape[-1]))
    out = ad.add_bias(ad.matmul(flat, w), b)
    return ad.reshape(out, lead + (w.shape[1],))


def embed_tokens(
    batch: Batch, params: EncoderParams, dropout_seed: int, train_mode: bool
) -> Tensor:
    """Token + position embeddings, layer-normed and dropped out: B x L x H.

    This tensor is the attack seam; after a backward pass its ``grad`` holds
    the loss gradient that drives adversarial perturbations.
    """
    cfg = params.config
    ids = batch.token_ids
    if ids.shape[1] > cfg.max_len:
        raise ValueError(
            f"sequence length {ids.shape[1]} exceeds max_len {cfg.max_len}"
        )
    if ids.max() >= cfg.vocab_size:
        raise ValueError(
            f"token id {int(ids.max())} out of range for vocab_size {cfg.vocab_size}"
        )
    tok = ad.embedding_lookup(params["tok_emb"], ids)
    pos = ad.slice_rows(params["pos_emb"], ids.shape[1])
    x = ad.add_bias(tok, pos)
    x = ad.layer_norm(x, params["emb_ln_g"], params["emb_ln_b"])
    x = ad.dropout_apply(x, cfg.dropout, derive_seed(dropout_seed, "emb"), train_mode)
    return x


def _attention_mask_bias(attn_mask: np.ndarray, heads: int) -> Tensor:
    """Additive mask (B x heads x L x L): 0 on real keys, -1e9 on padding."""
    b, l = attn_mask.shape
    bias = np.where(attn_mask[:, None, None, :] > 0, 0.0, _NEG_MASK).astype(np.float32)
    return Tensor(np.broadcast_to(bias, (b, heads, l, l)).copy())


def encode_from_embeddings(
    emb: Tensor,
    attn_mask: np.ndarray,
    params: EncoderParams,
    dropout_seed: int,
    train_mode: bool,
) -> Tensor:
    """Run the transformer stack and return the [CLS]-position vectors (B x H)."""
    cfg = params.config
    b, l, h = emb.shape
    if h != cfg.hidden:
        raise ValueError(f"embedding width {h} does not match hidden {cfg.hidden}")
    heads = cfg.heads
    dh = h // heads
    inv_sqrt = 1.0 / math.sqrt(dh)
    mask_bias = _attention_mask_bias(attn_mask, heads)

    x = emb
    for i in range(cfg.layers):
        p = f"layer{i}."
        lseed = derive_seed(dropout_seed, "layer", i)

        def split_heads(t: Tensor) -> Tensor:
            return ad.transpose(ad.reshape(t, (b, l, heads, dh)), (0, 2, 1, 3))

        q = split_heads(_linear(x, params[p + "wq"], params[p + "bq"]))
        k = split_heads(_linear(x, params[p + "wk"], params[p + "bk"]))
        v = split_heads(_linear(x, params[p + "wv"], params[p + "bv"]))

        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), inv_sqrt)
        scores = ad.add(scores, mask_bias)
        probs = ad.softmax_rows(scores)
        probs = ad.dropout_apply(
            probs, cfg.dropout, derive_seed(lseed, "attn_probs"), train_mode
        )
        ctx = ad.matmul(probs, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, l, h))
        attn_out = _linear(ctx, params[p + "wo"], params[p + "bo"])
        attn_out = ad.dropout_apply(
            attn_out, cfg.dropout, derive_seed(lseed, "attn_out"), train_mode
        )
        x = ad.layer_norm(ad.add(x, attn_out), params[p + "ln1_g"], params[p + "ln1_b"])

        ffn = _linear(ad.relu(_linear(x, params[p + "w1"], params[p + "b1"])),
                      params[p + "w2"], params[p + "b2"])
        ffn = ad.dropout_apply(ffn, cfg.dropout, derive_seed(lseed, "ffn"), train_mode)
        x = ad.layer_norm(ad.add(x, ffn), params[p + "ln2_g"], params[p + "ln2_b"])

    # [CLS] sits at position 0 of every sequence
    return ad.select_row(ad.transpose(x, (1, 0, 2)), 0)


def pool(h: Tensor, params: EncoderParams) -> Tensor:
    """Dense + tanh projection into the contrastive space (B x H)."""
    return ad.tanh(_linear(h, params["pooler_w"], params["pooler_b"]))


def classify(h: Tensor, params: EncoderParams) -> Tensor:
    """Affine logits (B x C); softmax lives in the loss."""
    if params.config.num_classes < 2:
        raise ValueError(
            "classify: encoder was configured without a classifier head "
            f"(num_classes={params.config.num_classes})"
        )
    return _linear(h, params["cls_w"], params["cls_b"])


@dataclass
class ForwardOut:
    emb: Tensor
    h: Tensor
    z: Tensor
    logits: Optional[Tensor]


def forward_full(
    batch: Batch, params: EncoderParams, seed: int, train_mode: bool
) -> ForwardOut:
    """Compose embed -> encode -> pool (-> classify) under one seed namespace."""
    emb = embed_tokens(batch, params, derive_seed(seed, "embed"), train_mode)
    h = encode_from_embeddings(
        emb, batch.attn_mask, params, derive_seed(seed, "encode"), train_mode
    )
    z = pool(h, params)
    logits = classify(h, params) if params.config.num_classes >= 2 else None
    return ForwardOut(emb, h, z, logits)
