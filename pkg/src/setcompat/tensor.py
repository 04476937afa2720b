"""Dense tensors with reverse-mode differentiation on a gradient tape.

The operation set is exactly what the relational scorer needs: matrix
products, bias broadcast, layer normalization, ReLU, inverted dropout,
row gathering for pair construction, block mean pooling, and a
numerically stable softmax cross-entropy head. Values are contiguous
numpy arrays in float32 (training default) or float64 (gradient
checking).

Recording model: ops record onto the thread-local tape opened by a
``with Tape() as tape:`` block. Without an open tape the same functions
run as plain forward math, which is what inference uses. A tape is a
single-threaded context; tensors that are not being recorded are
immutable values and safe to share across threads.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Union

import numpy as np

from .errors import EngineError

ArrayLike = Union[np.ndarray, float, int, list, tuple]

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeMismatchError(EngineError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class TapeUsageError(EngineError, RuntimeError):
    """The tape was used outside its contract (reuse, nesting, bad loss)."""


class Tensor:
    """A dense array value. ``data`` is always C-contiguous float32/float64."""

    __slots__ = ("data",)

    def __init__(self, data: ArrayLike, dtype=None):
        # asarray with order="C" keeps 0-d scalars 0-d (ascontiguousarray would not)
        arr = np.asarray(data, dtype=dtype, order="C")
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


_ACTIVE = threading.local()


def _active_tape() -> Optional["Tape"]:
    return getattr(_ACTIVE, "tape", None)


class Tape:
    """Ordered record of primitive ops; replayed once, in exact reverse order.

    Records hold strong references to their operand tensors: gradients
    are keyed by tensor identity, which must stay unique for the tape's
    whole life.
    """

    def __init__(self):
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._outputs: set[int] = set()
        self._watched: list[Tensor] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise TapeUsageError("tapes do not nest; close the active tape first")
        if self._consumed:
            raise TapeUsageError("tape already consumed by backward()")
        _ACTIVE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.tape = None
        return False

    def watch(self, t: Tensor) -> None:
        """Register a leaf whose gradient backward() must report."""
        self._watched.append(t)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        if self._consumed:
            raise TapeUsageError("cannot record onto a consumed tape")
        self._ops.append((out, inputs, backward_fn))
        self._outputs.add(id(out))


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
    tape = _active_tape()
    if tape is not None:
        tape._record(out, inputs, backward_fn)


def _acc(grads: dict, tid: int, g: np.ndarray) -> None:
    # Gradients accumulate additively when a tensor feeds multiple consumers.
    prev = grads.get(tid)
    grads[tid] = g if prev is None else prev + g


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Replay the tape in reverse and return grads for watched tensors.

    ``loss`` must be a scalar produced while the tape was active. The
    tape is consumed: a second backward (or further recording) raises.
    Watched tensors that the loss does not depend on get zero gradients.
    """
    if tape._consumed:
        raise TapeUsageError("tape already consumed by backward()")
    if loss.data.shape != ():
        raise TapeUsageError(f"loss must be scalar, got shape {loss.data.shape}")
    if id(loss) not in tape._outputs:
        raise TapeUsageError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for out, _inputs, fn in reversed(tape._ops):
        g = grads.get(id(out))
        if g is None:
            continue
        fn(g, grads)
    result = {}
    for t in tape._watched:
        g = grads.get(id(t))
        result[id(t)] = np.zeros_like(t.data) if g is None else g
    tape._consumed = True
    tape._ops.clear()
    tape._outputs.clear()
    return result


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"matmul: incompatible shapes {a.shape} x {b.shape}"
        )
    out = Tensor(a.data @ b.data)
    ia, ib = id(a), id(b)
    A, B = a.data, b.data

    def bwd(g, grads):
        _acc(grads, ia, g @ B.T)
        _acc(grads, ib, A.T @ g)

    _record(out, (a, b), bwd)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"add: shapes differ {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    ia, ib = id(a), id(b)

    def bwd(g, grads):
        _acc(grads, ia, g)
        _acc(grads, ib, g)

    _record(out, (a, b), bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mul: shapes differ {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    ia, ib = id(a), id(b)
    A, B = a.data, b.data

    def bwd(g, grads):
        _acc(grads, ia, g * B)
        _acc(grads, ib, g * A)

    _record(out, (a, b), bwd)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant (no gradient for the constant)."""
    out = Tensor(x.data * c)
    ix = id(x)

    def bwd(g, grads):
        _acc(grads, ix, g * c)

    _record(out, (x,), bwd)
    return out


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = Tensor(x.data.sum())
    ix = id(x)
    shape, dtype = x.data.shape, x.data.dtype

    def bwd(g, grads):
        _acc(grads, ix, np.full(shape, g, dtype=dtype))

    _record(out, (x,), bwd)
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-d bias vector to every row of an (n, d) tensor."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"add_bias: shapes {x.shape} and {b.shape}")
    out = Tensor(x.data + b.data)
    ix, ib = id(x), id(b)

    def bwd(g, grads):
        _acc(grads, ix, g)
        _acc(grads, ib, g.sum(axis=0))

    _record(out, (x, b), bwd)
    return out


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """Column-wise concatenation of two (n, p) and (n, q) tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeMismatchError(f"concat_cols: shapes {a.shape} and {b.shape}")
    out = Tensor(np.concatenate([a.data, b.data], axis=1))
    ia, ib = id(a), id(b)
    p = a.shape[1]

    def bwd(g, grads):
        _acc(grads, ia, np.ascontiguousarray(g[:, :p]))
        _acc(grads, ib, np.ascontiguousarray(g[:, p:]))

    _record(out, (a, b), bwd)
    return out


def gather_pairs(v: Tensor, left: np.ndarray, right: np.ndarray) -> Tensor:
    """Build pair rows [v[i] || v[j]] for index arrays ``left``/``right``.

    Backward scatter-adds both halves back onto the source rows, which
    is what makes gradients correct when a row appears in many pairs.
    """
    if v.data.ndim != 2:
        raise ShapeMismatchError(f"gather_pairs: need rank-2 input, got {v.shape}")
    out = Tensor(np.concatenate([v.data[left], v.data[right]], axis=1))
    iv = id(v)
    p = v.shape[1]
    shape, dtype = v.data.shape, v.data.dtype

    def bwd(g, grads):
        dv = np.zeros(shape, dtype=dtype)
        np.add.at(dv, left, g[:, :p])
        np.add.at(dv, right, g[:, p:])
        _acc(grads, iv, dv)

    _record(out, (v,), bwd)
    return out


def mean_pool_rows(x: Tensor, block: int) -> Tensor:
    """Mean over consecutive row blocks: (b*block, d) -> (b, d)."""
    n, d = x.shape
    if block < 1 or n % block != 0:
        raise ShapeMismatchError(f"mean_pool_rows: {n} rows not divisible by {block}")
    out = Tensor(x.data.reshape(n // block, block, d).mean(axis=1))
    ix = id(x)

    def bwd(g, grads):
        _acc(grads, ix, np.repeat(g / block, block, axis=0))

    _record(out, (x,), bwd)
    return out


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); gradient is 0 at x == 0."""
    out = Tensor(np.maximum(x.data, 0))
    ix = id(x)
    gate = x.data > 0

    def bwd(g, grads):
        _acc(grads, ix, g * gate)

    _record(out, (x,), bwd)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift.

    y = (x - mean) / sqrt(var + eps) * gain + bias, with the biased
    variance over the last axis. ``eps`` keeps the zero-variance case
    finite.
    """
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatchError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match last axis {d}"
        )
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = Tensor(xhat * gain.data + bias.data)
    ix, igain, ibias = id(x), id(gain), id(bias)
    gain_data = gain.data
    lead_axes = tuple(range(x.data.ndim - 1))

    def bwd(g, grads):
        _acc(grads, igain, (g * xhat).sum(axis=lead_axes))
        _acc(grads, ibias, g.sum(axis=lead_axes))
        dxhat = g * gain_data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        _acc(grads, ix, dx)

    _record(out, (x, gain, bias), bwd)
    return out


def dropout(
    x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool
) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors.

    Training mode scales kept elements by 1/(1-rate) so inference is the
    identity. The mask is drawn from ``rng`` and saved for backward.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        out = Tensor(x.data.copy())
        ix = id(x)

        def bwd_id(g, grads):
            _acc(grads, ix, g)

        _record(out, (x,), bwd_id)
        return out
    if rng is None:
        raise ValueError("dropout: training mode needs a random generator")
    keep = rng.random(x.data.shape) >= rate
    factor = 1.0 / (1.0 - rate)
    mask = keep.astype(x.dtype) * np.asarray(factor, dtype=x.dtype)
    out = Tensor(x.data * mask)
    ix = id(x)

    def bwd(g, grads):
        _acc(grads, ix, g * mask)

    _record(out, (x,), bwd)
    return out


def _softmax_ce_rows(z: np.ndarray, labels: np.ndarray):
    # Log-space formulation: never overflows and loss stays finite for
    # any finite logits, even fully saturated ones.
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + m
    log_probs = z - lse
    probs = np.exp(log_probs)
    rows = np.arange(z.shape[0])
    losses = -log_probs[rows, labels]
    return losses, probs


def softmax_cross_entropy_rows(logits: Tensor, labels: np.ndarray):
    """Summed cross-entropy over (b, 2) logit rows.

    Returns (loss, probs) where loss is a scalar tensor holding the sum
    of per-row cross-entropies and probs is the (b, 2) softmax array.
    """
    if logits.data.ndim != 2 or logits.shape[1] != 2:
        raise ShapeMismatchError(f"softmax_cross_entropy_rows: need (b, 2), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    losses, probs = _softmax_ce_rows(logits.data, labels)
    out = Tensor(np.asarray(losses.sum(), dtype=logits.dtype))
    ilogits = id(logits)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(labels)), labels] = 1.0

    def bwd(g, grads):
        _acc(grads, ilogits, g * (probs - onehot))

    _record(out, (logits,), bwd)
    return out, probs


def softmax_cross_entropy(logits: Tensor, label: int):
    """Stable two-class softmax + negative log likelihood of ``label``.

    Returns (loss, probs): loss is a scalar tensor, probs the length-2
    softmax array. Backward sends (probs - onehot(label)) upstream.
    """
    if logits.shape != (2,):
        raise ShapeMismatchError(f"softmax_cross_entropy: need shape (2,), got {logits.shape}")
    if label not in (0, 1):
        raise ValueError(f"softmax_cross_entropy: label must be 0 or 1, got {label}")
    losses, probs2d = _softmax_ce_rows(logits.data[None, :], np.asarray([label]))
    probs = probs2d[0]
    out = Tensor(np.asarray(losses[0], dtype=logits.dtype))
    ilogits = id(logits)
    onehot = np.zeros(2, dtype=logits.dtype)
    onehot[label] = 1.0

    def bwd(g, grads):
        _acc(grads, ilogits, g * (probs - onehot))

    _record(out, (logits,), bwd)
    return out, probs
