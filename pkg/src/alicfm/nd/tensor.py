"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations on :class:`Tensor` objects are recorded on every active
:class:`Tape` that is tracking one of their inputs.  The adjoint rules are
themselves written with tensor operations, so a backward pass executed while
an outer tape is recording is differentiable again::

    with Tape() as outer:
        outer.watch(t)
        with Tape() as inner:
            inner.watch(t)
            y = f(t).sum()
        (dy,) = inner.gradient(y, [t])
        s = dy.sum()
    (d2y,) = outer.gradient(s, [t])

A gradient target has to be computed while its tape is active.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

_active_tapes: list["Tape"] = []


class Tensor:
    """A float64 array that can take part in recorded computations."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __rmatmul__ = lambda self, other: matmul(other, self)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)
    __getitem__ = lambda self, key: getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of primitive operations for reverse-mode differentiation.

    Tensors created with ``requires_grad=True`` are tracked automatically;
    anything else must be registered with :meth:`watch`.  Gradients can be
    requested any number of times while the recorded tensors are alive.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tracked: dict[int, Tensor] = {}
        self._recording = False

    def __enter__(self) -> "Tape":
        self._recording = True
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        self._recording = False
        _active_tapes.remove(self)

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if not isinstance(t, Tensor):
                raise TypeError("only Tensor objects can be watched")
            self._tracked[id(t)] = t

    def is_tracking(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def _maybe_record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        hit = False
        for x in inputs:
            if x.requires_grad and id(x) not in self._tracked:
                self._tracked[id(x)] = x
            if id(x) in self._tracked:
                hit = True
        if hit:
            self._tracked[id(out)] = out
            self.nodes.append(_Node(out, inputs, vjp))

    def gradient(
        self,
        target: Tensor,
        sources: Sequence[Tensor],
        output_grad=None,
    ) -> list[Tensor]:
        """Adjoints of ``target`` with respect to each of ``sources``.

        ``target`` must hold a single value unless ``output_grad`` supplies
        the seed adjoint.  Sources the target does not depend on receive
        zeros.  Operations performed here are recorded on any other tape that
        is still active, which is how higher derivatives are obtained.
        """
        if output_grad is None:
            if target.size != 1:
                raise ValueError(
                    f"gradient target must be a scalar, got shape {target.shape}; "
                    "pass output_grad for non-scalar targets"
                )
            seed = Tensor(np.ones_like(target.data))
        else:
            seed = as_tensor(output_grad)
            if seed.shape != target.shape:
                raise ValueError(f"output_grad shape {seed.shape} != target shape {target.shape}")

        adjoint: dict[int, Tensor] = {id(target): seed}
        was_recording = self._recording
        self._recording = False
        try:
            for node in reversed(self.nodes):
                g = adjoint.get(id(node.out))
                if g is None:
                    continue
                input_grads = node.vjp(g)
                for x, gx in zip(node.inputs, input_grads):
                    if gx is None or id(x) not in self._tracked:
                        continue
                    prev = adjoint.get(id(x))
                    adjoint[id(x)] = gx if prev is None else add(prev, gx)
        finally:
            self._recording = was_recording
        return [
            adjoint[id(s)] if id(s) in adjoint else Tensor(np.zeros_like(s.data))
            for s in sources
        ]


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Plain ndarray gradients of a scalar ``loss`` for each parameter."""
    return [g.data for g in tape.gradient(loss, params)]


def _record(out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    for tape in _active_tapes:
        if tape._recording:
            tape._maybe_record(out, inputs, vjp)
    return out


# ---------------------------------------------------------------------------
# shape helpers


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    out = Tensor(_sum_to_shape(x.data, shape))
    return _record(out, (x,), lambda g: (broadcast_to(g, x.shape),))


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    out = Tensor(np.broadcast_to(x.data, shape).copy())
    return _record(out, (x,), lambda g: (sum_to(g, x.shape),))


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (sum_to(g, a.shape), sum_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (sum_to(g, a.shape), sum_to(neg(g), b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(Tensor(-a.data), (a,), lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record(
        out, (a, b), lambda g: (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape))
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)

    def vjp(g):
        ga = sum_to(div(g, b), a.shape)
        gb = sum_to(neg(div(mul(g, out), b)), b.shape)
        return ga, gb

    return _record(out, (a, b), vjp)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(p, Tensor):
        raise TypeError("only constant exponents are supported")
    out = Tensor(a.data**p)
    if p == 0:
        return _record(out, (a,), lambda g: (None,))
    return _record(out, (a,), lambda g: (mul(g, mul(p, power(a, p - 1))),))


def square(a) -> Tensor:
    return mul(a, a)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _record(Tensor(a.data.T.copy()), (a,), lambda g: (transpose(g),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (reshape(g, a.shape),))


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = reshape(g, np.expand_dims(g.data, axis).shape)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * a.ndim)
        return (broadcast_to(g, a.shape),)

    return _record(out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# elementwise functions


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    return _record(out, (a,), lambda g: (mul(g, out),))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(Tensor(np.log(a.data)), (a,), lambda g: (div(g, a),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _record(Tensor(np.sin(a.data)), (a,), lambda g: (mul(g, cos(a)),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _record(Tensor(np.cos(a.data)), (a,), lambda g: (neg(mul(g, sin(a))),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.tanh(a.data))
    return _record(out, (a,), lambda g: (mul(g, sub(1.0, mul(out, out))),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    out = Tensor(np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)))
    return _record(out, (a,), lambda g: (mul(g, mul(out, sub(1.0, out))),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _record(Tensor(a.data * mask), (a,), lambda g: (mul(g, mask),))


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    neg_mask = (a.data <= 0).astype(np.float64)
    out = Tensor(np.where(a.data > 0, a.data, alpha * np.expm1(np.minimum(a.data, 0.0))))
    # derivative: 1 on the positive side, out + alpha on the negative side
    return _record(
        out, (a,), lambda g: (mul(g, add(mul(add(out, alpha), neg_mask), 1.0 - neg_mask)),)
    )


SELU_SCALE = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772


def selu(a) -> Tensor:
    a = as_tensor(a)
    neg_mask = (a.data <= 0).astype(np.float64)
    out = Tensor(
        SELU_SCALE
        * np.where(a.data > 0, a.data, SELU_ALPHA * np.expm1(np.minimum(a.data, 0.0)))
    )
    pos_slope = SELU_SCALE * (1.0 - neg_mask)
    return _record(
        out,
        (a,),
        lambda g: (mul(g, add(mul(add(out, SELU_SCALE * SELU_ALPHA), neg_mask), pos_slope)),),
    )


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    mask = ((a.data >= lo) & (a.data <= hi)).astype(np.float64)
    out = Tensor(np.clip(a.data, lo, hi))
    return _record(out, (a,), lambda g: (mul(g, mask),))


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` holds, else from ``b`` (cond is constant)."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = Tensor(np.where(cond, a.data, b.data))
    m = cond.astype(np.float64)
    return _record(
        out, (a, b), lambda g: (sum_to(mul(g, m), a.shape), sum_to(mul(g, 1.0 - m), b.shape))
    )


# ---------------------------------------------------------------------------
# indexing and joining


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data[key])
    return _record(out, (a,), lambda g: (_scatter(g, a.shape, key),))


def _scatter(g: Tensor, shape: tuple[int, ...], key) -> Tensor:
    buf = np.zeros(shape)
    np.add.at(buf, key, g.data)
    return _record(Tensor(buf), (g,), lambda gg: (getitem(gg, key),))


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def vjp(g):
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            key = [slice(None)] * out.ndim
            key[ax] = slice(int(lo), int(hi))
            grads.append(getitem(g, tuple(key)))
        return tuple(grads)

    return _record(out, parts, vjp)
