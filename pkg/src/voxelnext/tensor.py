"""Dense tensors with a recorded reverse-mode differentiation graph.

Every differentiable operation builds its output through :func:`make_node`,
which stores the parent tensors together with a closure mapping the upstream
gradient to one gradient per parent. Nodes carry a global creation sequence
number; :meth:`Tensor.backward` walks reachable nodes in decreasing sequence
order, which is a valid reverse topological order and makes gradient
accumulation over fan-in deterministic.
"""

from __future__ import annotations

import contextlib
import itertools
import os
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, StructuralError

_default_dtype = np.dtype(np.float32)
_grad_enabled = True
_sequence = itertools.count(1)
_debug = os.environ.get("VOXELNEXT_DEBUG", "") not in ("", "0")


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported element type {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default element type (``float64`` for gradient checks)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-D array with an optional gradient slot.

    ``data`` is always a C-contiguous numpy array; ``grad`` is either ``None``
    or an array of identical shape and dtype.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = _default_dtype if not _is_float_array(data) else np.asarray(data).dtype
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = 0

    # -- introspection -------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- differentiation -----------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``self`` must be a scalar unless an explicit upstream ``grad`` is given.
        The graph is released afterwards.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise StructuralError(f"seed gradient shape {grad.shape} != {self.shape}")

        nodes = _collect(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in nodes:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise StructuralError(
                        f"gradient shape {pg.shape} does not match tensor shape {parent.shape}"
                    )
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in nodes:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _raise_item(shape):
    raise ContractError(f"item() needs a single-element tensor, got shape {shape}")


def _is_float_array(data) -> bool:
    return isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value), dtype=dtype or _default_dtype)


def parameter(data, name: str | None = None) -> Tensor:
    """A leaf tensor that requires gradients."""
    return Tensor(data, requires_grad=True, dtype=_default_dtype, name=name)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward(g)`` must return a tuple with one entry per parent: an array of
    the parent's shape or ``None``.
    """
    out = Tensor.__new__(Tensor)
    out.data = data if data.flags.c_contiguous else np.ascontiguousarray(data)
    out.grad = None
    out.name = None
    out._parents = ()
    out._backward = None
    out._seq = 0
    if _debug and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite value produced by a tensor op")
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
        out._seq = next(_sequence)
    return out


def _collect(root: Tensor) -> list[Tensor]:
    """Reachable nodes sorted by decreasing creation sequence (leaves last)."""
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen[id(node)] = node
        for parent in node._parents:
            if parent._backward is not None and parent._seq >= node._seq:
                raise StructuralError("cycle detected in the recorded graph")
            stack.append(parent)
    leaves = [n for n in seen.values() if n._backward is None]
    inner = sorted((n for n in seen.values() if n._backward is not None), key=lambda n: -n._seq)
    return inner + leaves


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementary ops ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return make_node(a.data**exponent, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = range(a.ndim) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_node(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a.dtype)
    b = as_tensor(b)
    return as_tensor(a, b.dtype), b


# -- gradient checking -------------------------------------------------------


@dataclass
class GradCheckReport:
    """Analytic-vs-numeric comparison for every input of a checked op."""

    max_rel_error: list[float]
    tolerance: float
    excluded: list[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.max_rel_error)

    def __str__(self) -> str:
        errs = ", ".join(f"{e:.2e}" for e in self.max_rel_error)
        return f"grad_check {'pass' if self.passed else 'FAIL'} (tol {self.tolerance:g}): [{errs}]"


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    tolerance: float = 1e-4,
    reduction: Callable[[Tensor], Tensor] | None = None,
    h: float = 1e-5,
    denominator_floor: float = 1e-6,
    check: Sequence[bool] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` against central differences.

    Runs in float64. ``fn`` receives one Tensor per entry of ``inputs``; if its
    output is not a scalar, ``reduction`` must map it to one. Entries whose
    ``max(|analytic|, |numeric|)`` falls below ``denominator_floor`` are
    excluded from the relative error.
    """
    with precision(np.float64):
        arrays = [np.array(x, dtype=np.float64) for x in inputs]
        check = [True] * len(arrays) if check is None else list(check)

        def evaluate(values, record):
            ts = [Tensor(v, requires_grad=record and c) for v, c in zip(values, check)]
            out = fn(*ts)
            if out.size != 1:
                if reduction is None:
                    raise ContractError(
                        f"op output has shape {out.shape}; supply a reduction to check it"
                    )
                out = reduction(out)
            if out.size != 1:
                raise ContractError("reduction did not produce a scalar")
            return ts, out

        ts, out = evaluate(arrays, True)
        out.backward()
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]

        errors, excluded = [], []
        for idx, (arr, do) in enumerate(zip(arrays, check)):
            if not do:
                errors.append(0.0)
                excluded.append(0)
                continue
            numeric = np.zeros_like(arr)
            flat = arr.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                plus = evaluate(arrays, False)[1].item()
                flat[j] = orig - h
                minus = evaluate(arrays, False)[1].item()
                flat[j] = orig
                numeric.reshape(-1)[j] = (plus - minus) / (2 * h)
            denom = np.maximum(np.abs(analytic[idx]), np.abs(numeric))
            keep = denom >= denominator_floor
            excluded.append(int((~keep).sum()))
            rel = np.abs(analytic[idx] - numeric)[keep] / denom[keep]
            errors.append(float(rel.max()) if rel.size else 0.0)
        return GradCheckReport(errors, tolerance, excluded)
