"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Values are stored as contiguous float32 arrays; reductions (sums, means,
norms, matmul inner products) accumulate in float64 before rounding back to
storage precision, which keeps finite-difference gradient checks tight on
deep graphs. Operations record onto an explicit tape (define-by-run) only
while a ``Tape`` context is active and at least one input requires grad;
outside a tape everything is plain numpy, which is what evaluation paths use.

Single-threaded by design: one tape per worker, rebuilt every step.
"""

from __future__ import annotations

import zlib
from typing import Callable, Optional, Sequence

import numpy as np

_F32 = np.float32
_F64 = np.float64

# Elementwise op outputs are checked for NaN/Inf when this is on. Tests turn
# it on; training leaves it off and relies on the per-step finiteness gates.
DEBUG_CHECK_FINITE = False

# Storage dtype stack. Normal operation stores float32; grad_check's numeric
# oracle pushes float64 so finite differences see an effectively exact forward.
_STORAGE: list = [_F32]


def _st():
    return _STORAGE[-1]


class _float64_forward:
    """Context in which newly created tensors and op outputs keep float64."""

    def __enter__(self):
        _STORAGE.append(_F64)
        return self

    def __exit__(self, exc_type, exc, tb):
        _STORAGE.pop()


_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def derive_seed(base: int, *parts: int | str) -> int:
    """Stable 64-bit seed derived from a base seed and a namespace path.

    Strings are folded through crc32 so the derivation does not depend on
    Python's salted hash. Used to give every dropout site, branch, and step
    its own reproducible random stream.
    """
    h = _splitmix64(base & _MASK64)
    for part in parts:
        if isinstance(part, str):
            part = zlib.crc32(part.encode("utf-8"))
        h = _splitmix64(h ^ (part & _MASK64))
    return h


def rng_from_seed(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox) keyed by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=seed & _MASK64))


class Tensor:
    """Dense float32 value, optionally carrying a gradient of the same shape.

    Scalar outputs of reductions keep their unrounded float64 value in
    ``f64``; scalar arithmetic propagates it so loss values (and the numeric
    side of gradient checks) are not limited by float32 rounding.
    """

    __slots__ = ("data", "requires_grad", "grad", "f64")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=_st())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.f64: Optional[float] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar tensor, got shape {self.data.shape}")
        if self.f64 is not None:
            return self.f64
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all real work happens in the module-level ops.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs: tuple[Tensor, ...] = inputs
        self.output: Tensor = output
        # backward: out_grad (f32 ndarray) -> tuple of grads aligned with inputs
        # (None for inputs that need no grad).
        self.backward: Callable = backward


class Tape:
    """Ordered record of operations; inputs of every node precede it.

    Use as a context manager: ops executed inside record themselves when any
    input requires grad. ``backward(root)`` then walks the record once in
    reverse. Tapes are throwaway objects, rebuilt each training step.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack.pop()
        assert popped is self, "tape contexts must nest properly"


_tape_stack: list[Tape] = []


def _active_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


def _finite_guard(out: np.ndarray) -> None:
    if DEBUG_CHECK_FINITE and not np.all(np.isfinite(out)):
        raise FloatingPointError("operation produced a non-finite value")


def _record(inputs: tuple[Tensor, ...], out_data: np.ndarray, backward) -> Tensor:
    _finite_guard(out_data)
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.nodes.append(_Node(inputs, out, backward))
    return out


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every requires-grad tensor reachable on the tape.

    Gradients sum across fan-out; tensors recorded on the tape but not on any
    path to ``root`` receive zero grad. Existing ``grad`` fields of tape
    tensors are overwritten, not accumulated into.
    """
    if root.data.size != 1:
        raise ValueError(f"backward() needs a scalar root, got shape {root.data.shape}")
    tape = _active_tape()
    if tape is None:
        raise RuntimeError("backward() requires an active Tape context")

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    touched: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        touched[id(node.output)] = node.output
        for t in node.inputs:
            touched[id(t)] = t
        g_out = grads.get(id(node.output))
        if g_out is None:
            continue
        in_grads = node.backward(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            g = np.asarray(g, dtype=_F32)
            if g.shape != t.data.shape:
                g = g.reshape(t.data.shape)
            acc = grads.get(id(t))
            if acc is None:
                grads[id(t)] = g.copy() if g.base is not None or g is t.data else g
            else:
                acc += g

    for key, t in touched.items():
        if t.requires_grad:
            g = grads.get(key)
            t.grad = g if g is not None else np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# elementwise and linear ops
# ---------------------------------------------------------------------------


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def _shadow_of(t: Tensor) -> Optional[float]:
    if t.f64 is not None:
        return t.f64
    if t.data.size == 1:
        return float(t.data.reshape(()))
    return None


def _combine_shadows(out: Tensor, op, *ins: Tensor) -> Tensor:
    if out.data.size == 1 and any(t.f64 is not None for t in ins):
        vals = [_shadow_of(t) for t in ins]
        if all(v is not None for v in vals):
            out.f64 = float(op(*vals))
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    out = _record((a, b), a.data + b.data, lambda g: (g, g))
    return _combine_shadows(out, lambda x, y: x + y, a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    out = _record((a, b), a.data - b.data, lambda g: (g, -g))
    return _combine_shadows(out, lambda x, y: x - y, a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    a_d, b_d = a.data, b.data
    out = _record((a, b), a_d * b_d, lambda g: (g * b_d, g * a_d))
    return _combine_shadows(out, lambda x, y: x * y, a, b)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = _record((a,), a.data * _F32(c), lambda g: (g * _F32(c),))
    return _combine_shadows(out, lambda x: x * c, a)


def _matmul_grad_a(g: np.ndarray, b_d: np.ndarray) -> np.ndarray:
    return _f64_matmul(g, np.swapaxes(b_d, -1, -2))


def _matmul_grad_b(a_d: np.ndarray, g: np.ndarray) -> np.ndarray:
    return _f64_matmul(np.swapaxes(a_d, -1, -2), g)


def _f64_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.matmul(a.astype(_F64), b.astype(_F64)).astype(_st())


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with float64 inner accumulation.

    Either both operands share identical leading (batch) dimensions, or ``b``
    is a plain 2-D matrix applied to the last axis of ``a``. No other
    broadcasting.
    """
    a_d, b_d = a.data, b.data
    if a_d.ndim < 2 or b_d.ndim < 2:
        raise ValueError(f"matmul: operands must be >=2-D, got {a_d.shape} vs {b_d.shape}")
    if a_d.shape[-1] != b_d.shape[-2]:
        raise ValueError(f"matmul: inner dims differ, {a_d.shape} vs {b_d.shape}")
    if b_d.ndim == 2 and a_d.ndim > 2:
        out = _f64_matmul(a_d, b_d)

        def bwd(g):
            ga = _matmul_grad_a(g, b_d)
            k, m = b_d.shape
            gb = _f64_matmul(a_d.reshape(-1, k).T, g.reshape(-1, m))
            return ga, gb

        return _record((a, b), out, bwd)
    if a_d.shape[:-2] != b_d.shape[:-2]:
        raise ValueError(f"matmul: batch dims differ, {a_d.shape} vs {b_d.shape}")
    out = _f64_matmul(a_d, b_d)
    return _record((a, b), out, lambda g: (_matmul_grad_a(g, b_d), _matmul_grad_b(a_d, g)))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _record((a,), out, lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if shape.count(-1) > 1:
        raise ValueError(f"reshape: at most one inferred dimension, got {shape}")
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        if known == 0 or a.data.size % known != 0:
            raise ValueError(f"reshape: cannot view {a.data.shape} as {shape}")
        shape = tuple(a.data.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ValueError(f"reshape: cannot view {a.data.shape} as {shape}")
    old = a.data.shape
    return _record((a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0; trailing dimensions must agree."""
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat_rows: need at least one tensor")
    trailing = tensors[0].data.shape[1:]
    for t in tensors[1:]:
        if t.data.shape[1:] != trailing:
            raise ValueError(
                f"concat_rows: shape mismatch {tensors[0].data.shape} vs {t.data.shape}"
            )
    sizes = [t.data.shape[0] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=0)

    def bwd(g):
        pieces, start = [], 0
        for n in sizes:
            pieces.append(g[start : start + n])
            start += n
        return tuple(pieces)

    return _record(tensors, out, bwd)


def select_row(a: Tensor, index: int) -> Tensor:
    """Row ``index`` along axis 0; gradient scatters back into that row."""
    if not 0 <= index < a.data.shape[0]:
        raise ValueError(f"select_row: index {index} out of range for shape {a.data.shape}")
    shape = a.data.shape

    def bwd(g):
        full = np.zeros(shape, dtype=_F32)
        full[index] = g
        return (full,)

    return _record((a,), a.data[index].copy(), bwd)


def slice_rows(a: Tensor, n: int) -> Tensor:
    """First ``n`` rows along axis 0."""
    if not 0 < n <= a.data.shape[0]:
        raise ValueError(f"slice_rows: cannot take {n} rows from shape {a.data.shape}")
    shape = a.data.shape

    def bwd(g):
        full = np.zeros(shape, dtype=_F32)
        full[:n] = g
        return (full,)

    return _record((a,), a.data[:n].copy(), bwd)


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add ``b`` across the trailing axes of ``a`` (b.shape must suffix a.shape)."""
    a_d, b_d = a.data, b.data
    if a_d.shape[a_d.ndim - b_d.ndim :] != b_d.shape:
        raise ValueError(f"add_bias: {b_d.shape} is not a suffix of {a_d.shape}")
    lead = tuple(range(a_d.ndim - b_d.ndim))

    def bwd(g):
        gb = g if not lead else g.sum(axis=lead, dtype=_F64).astype(_F32)
        return g, gb

    return _record((a, b), a_d + b_d, bwd)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer ids; gradient scatter-adds."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError(
            f"embedding_lookup: id out of range [0, {table.data.shape[0]}) in input"
        )
    t_shape = table.data.shape

    def bwd(g):
        full = np.zeros(t_shape, dtype=_F32)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, t_shape[-1]))
        return (full,)

    return _record((table,), table.data[ids], bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    acc = float(a.data.sum(dtype=_F64))
    out = _record(
        (a,), np.asarray(acc, dtype=_st()), lambda g: (np.full(shape, g.reshape(()), dtype=_F32),)
    )
    out.f64 = acc
    return out


def mean_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    n = a.data.size
    acc = float(a.data.sum(dtype=_F64) / n)
    out = _record(
        (a,),
        np.asarray(acc, dtype=_st()),
        lambda g: (np.full(shape, g.reshape(()) / _F32(n), dtype=_F32),),
    )
    out.f64 = acc
    return out


def sum_last(a: Tensor) -> Tensor:
    """Sum over the last axis."""
    shape = a.data.shape
    out = a.data.sum(axis=-1, dtype=_F64).astype(_st())
    return _record((a,), out, lambda g: (np.broadcast_to(g[..., None], shape).astype(_F32),))


# ---------------------------------------------------------------------------
# nonlinearities and normalizations
# ---------------------------------------------------------------------------


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record((a,), out, lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    pos = (a.data > 0).astype(_F32)
    return _record((a,), out, lambda g: (g * pos,))


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by per-row max subtraction."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted, dtype=_F64)
    out = (e / e.sum(axis=-1, keepdims=True)).astype(_st())

    def bwd(g):
        dot = np.sum(g.astype(_F64) * out, axis=-1, keepdims=True)
        return ((out.astype(_F64) * (g - dot)).astype(_F32),)

    return _record((a,), out, bwd)


def log_softmax_rows(a: Tensor) -> Tensor:
    x = a.data.astype(_F64)
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out64 = shifted - lse
    out = out64.astype(_st())
    soft = np.exp(out64)

    def bwd(g):
        s = np.sum(g, axis=-1, keepdims=True, dtype=_F64)
        return ((g - soft * s).astype(_F32),)

    return _record((a,), out, bwd)


def logsumexp_rows(a: Tensor) -> Tensor:
    x = a.data.astype(_F64)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    out64 = (m + np.log(e.sum(axis=-1, keepdims=True)))[..., 0]
    soft = (e / e.sum(axis=-1, keepdims=True)).astype(_F32)
    return _record((a,), out64.astype(_st()), lambda g: ((soft * g[..., None]).astype(_F32),))


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    h = a.data.shape[-1]
    if gamma.data.shape != (h,) or beta.data.shape != (h,):
        raise ValueError(
            f"layer_norm: gamma/beta must have shape ({h},), got {gamma.data.shape} and {beta.data.shape}"
        )
    x = a.data.astype(_F64)
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    out = (xhat * gamma.data.astype(_F64) + beta.data.astype(_F64)).astype(_st())
    g_d = gamma.data.astype(_F64)

    def bwd(g):
        g64 = g.astype(_F64)
        gxhat = g64 * g_d
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        ga = ((gxhat - m1 - xhat * m2) * inv).astype(_F32)
        lead = tuple(range(g64.ndim - 1))
        ggamma = (g64 * xhat).sum(axis=lead).astype(_F32)
        gbeta = g64.sum(axis=lead).astype(_F32)
        return ga, ggamma, gbeta

    return _record((a, gamma, beta), out, bwd)


def dropout_apply(a: Tensor, rate: float, seed: int, train_mode: bool) -> Tensor:
    """Zero elements with probability ``rate`` and rescale survivors by 1/(1-rate).

    The mask comes from a counter-based generator keyed by ``seed`` alone, so
    the same seed always produces the same mask for a given shape; rebuilding
    a graph replays dropout bit-identically. Identity in eval mode or at rate 0.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout_apply: rate must be in [0, 1), got {rate}")
    if not train_mode or rate == 0.0:
        return _record((a,), a.data.copy(), lambda g: (g,))
    keep = rng_from_seed(seed).random(a.data.shape) >= rate
    scale_ = _F32(1.0 / (1.0 - rate))
    mask = keep.astype(_F32) * scale_
    return _record((a,), a.data * mask, lambda g: (g * mask,))


def l2_normalize_rows(a: Tensor, guard: float = 1e-12) -> Tensor:
    """Scale each last-axis row to unit L2 norm; rows at or below ``guard`` pass through."""
    x = a.data.astype(_F64)
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    safe = norms > guard
    inv = np.where(safe, 1.0 / np.where(safe, norms, 1.0), 1.0)
    y = x * inv
    out = y.astype(_st())

    def bwd(g):
        g64 = g.astype(_F64)
        dot = (g64 * y).sum(axis=-1, keepdims=True)
        ga = np.where(safe, (g64 - y * dot) * inv, g64)
        return (ga.astype(_F32),)

    return _record((a,), out, bwd)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-3,
    sample: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max relative error between analytic and centered-difference gradients.

    ``f`` must build a scalar from ``x`` deterministically (fix dropout
    seeds); determinism is enforced by evaluating twice and rejecting on
    mismatch. The numeric side perturbs coordinates in 32-bit storage but
    evaluates the forward pass with float64 storage, so centered differences
    are limited by truncation error rather than rounding. Relative error is
    |analytic - numeric| / max(1, |a|, |n|). Set ``sample`` to check a random
    subset of coordinates.
    """
    probe1 = _eval_scalar64(f, x)
    probe2 = _eval_scalar64(f, x)
    if probe1 != probe2:
        raise ValueError("grad_check: f is not deterministic (double evaluation mismatch)")

    with Tape():
        out = f(x)
        if out.data.size != 1:
            raise ValueError("grad_check: f must produce a scalar")
        backward(out)
    analytic = x.grad.reshape(-1).astype(_F64) if x.grad is not None else np.zeros(x.size)

    flat = x.data.reshape(-1)
    idx = np.arange(flat.size)
    if sample is not None and sample < flat.size:
        idx = (rng or np.random.default_rng(0)).choice(flat.size, size=sample, replace=False)

    worst = 0.0
    for i in idx:
        orig = flat[i]
        hi, lo = _F32(orig + h), _F32(orig - h)
        flat[i] = hi
        f_plus = _eval_scalar64(f, x)
        flat[i] = lo
        f_minus = _eval_scalar64(f, x)
        flat[i] = orig
        # divide by the realized (rounded) step, not the nominal 2h
        numeric = (f_plus - f_minus) / (float(hi) - float(lo))
        a = analytic[i]
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst


def _eval_scalar64(f: Callable[[Tensor], Tensor], x: Tensor) -> float:
    """Evaluate ``f(x)`` with float64 forward storage; restores x afterwards."""
    saved = x.data
    x.data = saved.astype(_F64)
    try:
        with _float64_forward():
            out = f(x)
    finally:
        x.data = saved
    if out.data.size != 1:
        raise ValueError("grad_check: f must produce a scalar")
    return out.item()
