"""Dense float64 tensors with a reverse-mode autodiff tape.

Ops are recorded only while a :class:`Tape` is active and at least one
input requires a gradient. Outside a tape every op is a plain numpy
computation, which is what evaluation and export use.

Subgradient convention: ``relu`` and ``leaky_relu`` take the left branch at
exactly zero (derivative 0 and ``slope`` respectively).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, NonFiniteError, ParameterError, UsageError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "matmul",
    "conv1d_causal",
    "add",
    "sub",
    "mul",
    "relu",
    "leaky_relu",
    "sigmoid",
    "exp",
    "softmax",
    "sum",
    "mean",
    "concat",
    "transpose",
    "reshape",
    "dropout",
    "gradient_check",
    "check_parameter_gradients",
    "deterministic",
]

_TAPES: list["Tape"] = []


class Tensor:
    """A dense real-valued array, optionally tracked for gradients."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None
        self._index = -1

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t._tape = None
        t._index = -1
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Record:
    __slots__ = ("out", "parents", "backward", "name")

    def __init__(self, out, parents, backward, name):
        self.out = out
        self.parents = parents
        self.backward = backward
        self.name = name


class Tape:
    """Ordered record of differentiable ops executed while active.

    Use as a context manager; :meth:`backward` consumes the tape, and a
    second call raises :class:`UsageError` until :meth:`reset`.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        for rec in self.records:
            rec.out._tape = None
        self.records = []
        self.consumed = False

    def _record(self, out, parents, backward_fn, name) -> None:
        if self.consumed:
            raise UsageError("tape already consumed by backward(); call reset() first")
        out._tape = self
        out._index = len(self.records)
        out.requires_grad = True
        self.records.append(_Record(out, parents, backward_fn, name))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise UsageError("backward() called twice on the same tape without reset()")
        if loss.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise UsageError("loss was not produced by ops recorded on this tape")

        grads = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records[: loss._index + 1]):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            parent_grads = rec.backward(g)
            for parent, pg in zip(rec.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._tape is self:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
                else:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
        self.consumed = True


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on."""
    if loss._tape is None:
        raise UsageError("loss has no recorded history; run the forward pass inside a Tape")
    loss._tape.backward(loss)


@contextlib.contextmanager
def deterministic():
    """Pin BLAS to one thread so reductions run in a fixed order."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _result(data: np.ndarray, parents, backward_fn, name: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{name} produced non-finite values")
    out = Tensor._wrap(data)
    if _TAPES and any(p.requires_grad for p in parents):
        _TAPES[-1]._record(out, parents, backward_fn, name)
    return out


def _broadcast_shape(a: tuple, b: tuple, name: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"{name}: shapes {a} and {b} do not broadcast") from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), back, "mul")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    active = x.data > 0

    def back(g):
        return (g * active,)

    return _result(np.where(active, x.data, 0.0), (x,), back, "relu")


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = _as_tensor(x)
    active = x.data > 0
    local = np.where(active, 1.0, slope)

    def back(g):
        return (g * local,)

    return _result(x.data * local, (x,), back, "leaky_relu")


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    z = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def back(g):
        return (g * s * (1.0 - s),)

    return _result(s, (x,), back, "sigmoid")


def exp(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)

    def back(g):
        return (g * y,)

    return _result(y, (x,), back, "exp")


# -- linear algebra -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs 2-D or batched operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), back, "matmul")


def conv1d_causal(x, w, dilation: int = 1) -> Tensor:
    """Dilated causal 1-D convolution.

    Args:
        x: input of shape ``(C_in, L)`` or ``(B, C_in, L)``.
        w: kernel of shape ``(C_out, C_in, K)``; tap ``K-1`` sees the current step.
        dilation: spacing between taps.

    The input is left-padded with ``(K-1)*dilation`` zeros so the output keeps
    length ``L`` and position ``t`` only sees inputs at positions ``<= t``.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if isinstance(dilation, bool) or int(dilation) != dilation or dilation < 1:
        raise ParameterError(f"dilation must be a positive integer, got {dilation!r}")
    dilation = int(dilation)
    if w.ndim != 3 or w.shape[2] < 1:
        raise DimensionError(f"kernel must have shape (C_out, C_in, K>=1), got {w.shape}")
    if x.ndim not in (2, 3) or x.shape[-2] != w.shape[1]:
        raise DimensionError(f"input {x.shape} does not match kernel {w.shape}")

    c_out, c_in, k = w.shape
    length = x.shape[-1]
    pad = (k - 1) * dilation
    batched = x.ndim == 3
    xb = x.data if batched else x.data[None]
    n_batch = xb.shape[0]
    xp = np.pad(xb, [(0, 0), (0, 0), (pad, 0)])
    # im2col: rows ordered (channel, tap), columns ordered (batch, step)
    cols = np.stack([xp[:, :, j * dilation : j * dilation + length] for j in range(k)], axis=2)
    cols = cols.transpose(1, 2, 0, 3).reshape(c_in * k, n_batch * length)
    w2 = w.data.reshape(c_out, c_in * k)
    out = (w2 @ cols).reshape(c_out, n_batch, length).transpose(1, 0, 2)
    if not batched:
        out = out[0]
    out = np.ascontiguousarray(out)

    def back(g):
        g2 = (g if batched else g[None]).transpose(1, 0, 2).reshape(c_out, n_batch * length)
        gw = (g2 @ cols.T).reshape(w.shape)
        gcols = (w2.T @ g2).reshape(c_in, k, n_batch, length)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, j * dilation : j * dilation + length] += gcols[:, j].transpose(1, 0, 2)
        gx = gxp[:, :, pad:]
        return (gx if batched else gx[0]), gw

    return _result(out, (x, w), back, "conv1d_causal")


# -- normalisation / reductions ------------------------------------------------


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Numerically stable softmax along ``axis``.

    ``mask`` (boolean, broadcastable to ``x``) restricts the support: masked-out
    entries get probability exactly 0 and receive no gradient.
    """
    x = _as_tensor(x)
    if x.ndim == 0 or x.shape[axis] < 1:
        raise DimensionError(f"softmax needs a non-empty axis, got shape {x.shape}")
    if mask is None:
        z = x.data - x.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise ParameterError("softmax mask leaves an empty support")
        masked = np.where(mask, x.data, -np.inf)
        z = np.where(mask, x.data - masked.max(axis=axis, keepdims=True), 0.0)
        e = np.where(mask, np.exp(z), 0.0)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), back, "softmax")


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    _check_axis(x, axis)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    _check_axis(x, axis)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def _check_axis(x: Tensor, axis) -> None:
    if axis is None:
        return
    for a in axis if isinstance(axis, tuple) else (axis,):
        if not -x.ndim <= a < x.ndim:
            raise DimensionError(f"axis {a} out of range for shape {x.shape}")


# -- shape ops ----------------------------------------------------------------


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except (ValueError, np.exceptions.AxisError) as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(tensors), back, "concat")


def transpose(x, axes=None) -> Tensor:
    """Permute axes; by default swap the last two."""
    x = _as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            return x
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for shape {x.shape}")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))

    def back(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(x.data, axes), (x,), back, "transpose")


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {exc}") from None

    def back(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), back, "reshape")


def getitem(x, index) -> Tensor:
    x = _as_tensor(x)
    out = np.array(x.data[index])

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _result(out, (x,), back, "getitem")


def dropout(x, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; the identity in eval mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def back(g):
        return (g * keep,)

    return _result(x.data * keep, (x,), back, "dropout")


# -- verification --------------------------------------------------------------


def _analytic_grad(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    with Tape() as tape:
        y = f(x)
    if y.size != 1:
        raise UsageError("gradient_check needs a scalar-valued function")
    if y._tape is tape:
        tape.backward(y)
    grad = np.zeros_like(x.data) if x.grad is None else x.grad
    tape.reset()
    return grad


def gradient_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between the taped gradient and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    ``f`` must be deterministic (dropout off).
    """
    base = np.array(_as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(base, requires_grad=True)
    analytic = _analytic_grad(f, leaf)

    numeric = np.empty_like(base)
    probe = base.copy()
    for i in range(base.size):
        orig = probe.flat[i]
        probe.flat[i] = orig + h
        up = f(Tensor(probe)).item()
        probe.flat[i] = orig - h
        down = f(Tensor(probe)).item()
        probe.flat[i] = orig
        numeric.flat[i] = (up - down) / (2.0 * h)

    if base.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def check_parameter_gradients(loss_fn: Callable[[], Tensor], params: dict, h: float = 1e-5) -> dict:
    """Run :func:`gradient_check` semantics over a dict of named leaf tensors.

    ``loss_fn`` closes over ``params`` and is re-evaluated after perturbing each
    coordinate in place. Returns ``{name: max relative error}``.
    """
    for p in params.values():
        p.grad = None
        p.requires_grad = True
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    tape.reset()

    errors = {}
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        numeric = np.empty_like(p.data)
        for i in range(p.data.size):
            orig = p.data.flat[i]
            p.data.flat[i] = orig + h
            up = loss_fn().item()
            p.data.flat[i] = orig - h
            down = loss_fn().item()
            p.data.flat[i] = orig
            numeric.flat[i] = (up - down) / (2.0 * h)
        errors[name] = float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))
        p.grad = None
    return errors
