"""Small deterministic reverse-mode autodiff over dense numpy arrays.

Operations record themselves on the innermost active :class:`Tape`. With no
tape active they only compute values, which is how inference runs.
"""
from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "GradError", "ShapeError", "MaskError",
    "tensor", "matmul", "add", "sub", "mul", "scale", "concat_rows", "slice_rows",
    "transpose", "reshape", "softmax_rows_masked", "layernorm", "gelu",
    "mean_pool_rows", "cosine", "gather_rows", "cross_entropy_logits",
    "bce_logits", "sum_all", "mean_all", "grad_check", "zero_grad",
]


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes))


class MaskError(ValueError):
    """Raised when a softmax row has no admissible entry."""


class GradError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        # float arrays keep their precision (float64 is the verification mode);
        # everything else defaults to float32
        if dtype is None and (not isinstance(data, (np.ndarray, np.generic))
                              or arr.dtype not in (np.float32, np.float64)):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        label = f"{self.name}: " if self.name else ""
        return f"Tensor({label}shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_item(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# tape

_state = threading.local()


def _stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def _active_tape() -> "Tape | None":
    s = _stack()
    return s[-1] if s else None


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; call :meth:`backward` once on a scalar output.
    ``rng`` is the generator any stochastic op inside the tape should draw from.
    """

    def __init__(self, seed: int | None = None):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.rng_seed = seed
        self.rng = np.random.default_rng(seed)
        self._done = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        if self._done:
            raise GradError("tape already consumed by backward(); start a new Tape")
        self.records.append((out, inputs, backward))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None,
                 on_record: Callable[[Tensor], None] | None = None) -> None:
        """Propagate from ``loss`` through the records in exact reverse order.

        ``on_record`` (debugging) is called with each visited record's output.
        """
        if self._done:
            raise GradError("backward() called twice on the same tape")
        if grad is None:
            if loss.data.size != 1:
                raise GradError(f"backward() without a seed gradient needs a scalar, got {loss.shape}")
            grad = np.ones_like(loss.data)
        self._done = True
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        touched: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, fn in reversed(self.records):
            g = grads.get(id(out))
            if g is None:
                continue
            if on_record is not None:
                on_record(out)
            in_grads = fn(g)
            for x, gx in zip(inputs, in_grads):
                if gx is None or not x.requires_grad:
                    continue
                k = id(x)
                if k in grads:
                    grads[k] = grads[k] + gx
                else:
                    grads[k] = gx
                    touched[k] = x
        for k, t in touched.items():
            if not t.requires_grad:
                continue
            g = grads[k].astype(t.dtype, copy=False)
            t.grad = g if t.grad is None else t.grad + g


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(x.requires_grad for x in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # shared weight: fold batch axes into one GEMM
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _emit(out, (a, b), backward)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(a.data * b.data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(x.data * x.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def concat_rows(parts: Sequence[Tensor], axis: int = -2) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat_rows", ())
    ref = list(parts[0].shape)
    ax = axis % len(ref)
    for p in parts[1:]:
        s = list(p.shape)
        if len(s) != len(ref) or s[:ax] + s[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError("concat_rows", parts[0].shape, p.shape)
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(parts)))

    return _emit(np.concatenate([p.data for p in parts], axis=ax), parts, backward)


def slice_rows(x: Tensor, start: int, stop: int, axis: int = -2) -> Tensor:
    ax = axis % x.ndim
    n = x.shape[ax]
    if not (0 <= start <= stop <= n):
        raise ShapeError("slice_rows", x.shape, (start, stop))
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _emit(x.data[idx], (x,), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return _emit(out, (x,), lambda g: (g.reshape(x.shape),))


def softmax_rows_masked(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, excluding entries where ``mask`` is False.

    Excluded entries come out as exact zeros. A row with nothing admissible
    raises :class:`MaskError` rather than producing NaN.
    """
    z = x.data
    if mask is None:
        shifted = z - z.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.asarray(mask, dtype=bool)
        try:
            m = np.broadcast_to(mask, z.shape)
        except ValueError:
            raise ShapeError("softmax_rows_masked", z.shape, mask.shape) from None
        row_ok = mask.any(axis=-1)
        if not row_ok.all():
            bad = tuple(int(i) for i in np.argwhere(~row_ok)[0])
            raise MaskError(f"softmax_rows_masked: row {bad} is fully masked")
        neg = np.where(m, z, -np.inf)
        e = np.exp(neg - neg.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit(p, (x,), backward)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layernorm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = ggain = gbias = None
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _emit(out, (x, gain, bias), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    z = x.data
    c = z.dtype.type(_GELU_C)
    k = z.dtype.type(0.044715)
    u = c * (z + k * (z * z * z))
    th = np.tanh(u)
    out = 0.5 * z * (1 + th)

    def backward(g):
        du = c * (1 + 3 * k * z * z)
        return (g * (0.5 * (1 + th) + 0.5 * z * (1 - th * th) * du),)

    return _emit(out, (x,), backward)


def mean_pool_rows(x: Tensor) -> Tensor:
    n = x.shape[-2]

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, -2) / x.dtype.type(n), x.shape).copy(),)

    return _emit(x.data.mean(axis=-2), (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    return _emit(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _emit(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                 lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity along the last axis; output drops that axis."""
    if a.shape != b.shape:
        raise ShapeError("cosine", a.shape, b.shape)
    na = np.sqrt((a.data * a.data).sum(axis=-1))
    nb = np.sqrt((b.data * b.data).sum(axis=-1))
    for which, n in (("first", na), ("second", nb)):
        if np.any(n == 0):
            idx = tuple(int(i) for i in np.argwhere(n == 0)[0])
            raise GradError(f"cosine: zero-norm vector in {which} argument at index {idx}")
    dot = (a.data * b.data).sum(axis=-1)
    c = dot / (na * nb)

    def backward(g):
        ge = g[..., None]
        ga = gb = None
        if a.requires_grad:
            ga = ge * (b.data / (na * nb)[..., None] - c[..., None] * a.data / (na * na)[..., None])
        if b.requires_grad:
            gb = ge * (a.data / (na * nb)[..., None] - c[..., None] * b.data / (nb * nb)[..., None])
        return ga, gb

    return _emit(c, (a, b), backward)


def gather_rows(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("gather_rows", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: id out of range [0, {table.shape[0]})")

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _emit(table.data[ids], (table,), backward)


def cross_entropy_logits(logits: Tensor, targets, valid=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over positions where ``valid``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError("cross_entropy_logits", logits.shape, targets.shape)
    v = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"cross_entropy_logits: target id outside vocabulary of size {v}")
    valid = np.ones(targets.shape, bool) if valid is None else np.asarray(valid, bool)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("cross_entropy_logits: no valid target positions")
    z = logits.data
    zs = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=-1, keepdims=True))
    logp = zs - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * valid).sum() / n

    def backward(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None],
                          np.take_along_axis(p, targets[..., None], axis=-1) - 1, axis=-1)
        return (p * (valid[..., None] * (g / n)).astype(z.dtype),)

    return _emit(np.asarray(loss, dtype=z.dtype), (logits,), backward)


def bce_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 labels, logit-stable."""
    y = np.asarray(labels, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ShapeError("bce_logits", logits.shape, y.shape)
    if y.size == 0:
        raise ValueError("bce_logits: empty batch")
    z = logits.data
    n = z.size
    loss = (np.maximum(z, 0) - y * z + np.log1p(np.exp(-np.abs(z)))).mean()

    def backward(g):
        sig = 0.5 * (1 + np.tanh(0.5 * z))
        return ((sig - y) * (g / n),)

    return _emit(np.asarray(loss, dtype=z.dtype), (logits,), backward)


# ---------------------------------------------------------------------------
# verification

def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` maps the input tensors to a scalar tensor. Every input should be
    float64; the relative error per entry is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    with Tape() as tape:
        out = fn(*inputs)
    tape.backward(out)
    worst = 0.0
    for i, x in enumerate(inputs):
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        an = analytic.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(fn(*inputs).data)
            flat[j] = orig - eps
            fm = float(fn(*inputs).data)
            flat[j] = orig
            num = (fp - fm) / (2 * eps)
            a = float(an[j])
            if not (math.isfinite(a) and math.isfinite(num)):
                raise GradError(f"non-finite gradient at input {i} entry {j}: analytic={a}, numeric={num}")
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
