"""Dense float64 tensors with reverse-mode automatic differentiation.

Backward rules are themselves written in terms of the differentiable
operations below, so the tensors returned by :func:`grad` carry their own
differentiation records and can be differentiated once more
(reverse-over-reverse). That second pass is what lets a training loss
penalize the gradient of an energy with respect to its input while still
being optimized with respect to the parameters.

Broadcasting is deliberately restricted: elementwise operations accept two
operands of identical shape, or one scalar (rank-0) operand with one tensor
operand. Anything else raises ValueError. All values are float64.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Node", "Graph", "tensor", "grad",
    "add", "sub", "mul", "scale", "add_rows", "matmul",
    "tanh", "sigmoid", "softplus", "silu",
    "tsum", "sum_axis", "mean", "sq_l2", "max_axis",
    "expand", "reshape", "transpose", "concat", "slice_axis", "pad_slice",
]

_serial = itertools.count()


class Node:
    """Differentiation record: op name, parent tensors, backward rule.

    ``bwd(cot, need)`` returns one cotangent per parent; entries whose
    ``need`` flag is False may be returned as None and are never read.
    """

    __slots__ = ("op", "parents", "bwd")

    def __init__(self, op: str, parents: tuple["Tensor", ...],
                 bwd: Callable[["Tensor", tuple[bool, ...]], tuple]):
        self.op = op
        self.parents = parents
        self.bwd = bwd


class Tensor:
    """Immutable dense float64 array, optionally carrying a :class:`Node`.

    A Tensor built without a node never produces gradients through itself
    (constant/leaf semantics); it can still receive a gradient when passed
    to :func:`grad` as a target.
    """

    __slots__ = ("data", "node", "serial")

    def __init__(self, data, node: Node | None = None, _checked: bool = False):
        if node is None and not _checked:
            arr = np.array(data, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError("tensor data must be finite")
        else:
            arr = np.asarray(data)
        arr.flags.writeable = False
        self.data = arr
        self.node = node
        self.serial = next(_serial)

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
        return float(self.data)

    def __repr__(self) -> str:
        tag = self.node.op if self.node is not None else "leaf"
        return f"Tensor(shape={self.shape}, op={tag})"

    # Operator sugar; floats/ints promote to rank-0 constants.
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data) -> Tensor:
    """Create a constant/leaf tensor from finite host data."""
    return Tensor(data)


def _wrap(arr: np.ndarray, node: Node) -> Tensor:
    return Tensor(arr, node, _checked=True)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.array(x, dtype=np.float64), None, _checked=True)


def _pair_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if a.ndim == 0 or b.ndim == 0:
        return
    raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are neither equal "
                     "nor scalar-with-tensor")


def _reduce_to(g: Tensor, parent: Tensor) -> Tensor:
    # Cotangent of a scalar operand broadcast against a tensor operand.
    if g.shape == parent.shape:
        return g
    return tsum(g)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _pair_shapes(a, b, "add")

    def bwd(g, need):
        return (_reduce_to(g, a) if need[0] else None,
                _reduce_to(g, b) if need[1] else None)

    return _wrap(a.data + b.data, Node("add", (a, b), bwd))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _pair_shapes(a, b, "sub")

    def bwd(g, need):
        return (_reduce_to(g, a) if need[0] else None,
                _reduce_to(scale(g, -1.0), b) if need[1] else None)

    return _wrap(a.data - b.data, Node("sub", (a, b), bwd))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _pair_shapes(a, b, "mul")

    def bwd(g, need):
        return (_reduce_to(mul(g, b), a) if need[0] else None,
                _reduce_to(mul(g, a), b) if need[1] else None)

    return _wrap(a.data * b.data, Node("mul", (a, b), bwd))


def scale(a, c: float) -> Tensor:
    """Multiply by a python float constant (no gradient path through c)."""
    a = _as_tensor(a)
    c = float(c)

    def bwd(g, need):
        return (scale(g, c),)

    return _wrap(a.data * c, Node("scale", (a,), bwd))


def add_rows(m, v) -> Tensor:
    """Add a length-C vector to every row of an [R, C] matrix.

    The explicit-op counterpart of row broadcasting, which the elementwise
    ops deliberately reject.
    """
    m, v = _as_tensor(m), _as_tensor(v)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ValueError(f"add_rows: need [R,C] + [C], got {m.shape} + {v.shape}")

    def bwd(g, need):
        return (g if need[0] else None,
                sum_axis(g, 0) if need[1] else None)

    return _wrap(m.data + v.data[None, :], Node("add_rows", (m, v), bwd))


# ---------------------------------------------------------------------------
# smooth nonlinearities

def tanh(a) -> Tensor:
    a = _as_tensor(a)

    # The rule rebuilds tanh(a) instead of capturing the output tensor:
    # an out -> node -> bwd -> out cycle would defeat refcount collection
    # and let solve/train loops hoard dead graphs until a full GC pass.
    def bwd(g, need):
        t = tanh(a)
        return (mul(g, sub(1.0, mul(t, t))),)

    return _wrap(np.tanh(a.data), Node("tanh", (a,), bwd))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)

    # tanh form is overflow-free on both tails; recomputed in bwd for the
    # same no-cycle reason as tanh above.
    def bwd(g, need):
        s = sigmoid(a)
        return (mul(g, mul(s, sub(1.0, s))),)

    return _wrap(0.5 * (1.0 + np.tanh(0.5 * a.data)), Node("sigmoid", (a,), bwd))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    out_arr = np.logaddexp(0.0, a.data)

    def bwd(g, need):
        return (mul(g, sigmoid(a)),)

    return _wrap(out_arr, Node("softplus", (a,), bwd))


def silu(a) -> Tensor:
    """x * sigmoid(x), composed from primitives so it differentiates twice."""
    a = _as_tensor(a)
    return mul(a, sigmoid(a))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul: rank-2 operands required, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def bwd(g, need):
        return (matmul(g, transpose(b)) if need[0] else None,
                matmul(transpose(a), g) if need[1] else None)

    return _wrap(a.data @ b.data, Node("matmul", (a, b), bwd))


# ---------------------------------------------------------------------------
# reductions

def tsum(a) -> Tensor:
    """Sum of all entries, rank-0 result."""
    a = _as_tensor(a)
    shape = a.shape

    def bwd(g, need):
        ones = Tensor(np.ones(shape), None, _checked=True)
        return (mul(g, ones),)

    return _wrap(np.array(np.sum(a.data)), Node("sum", (a,), bwd))


def mean(a) -> Tensor:
    a = _as_tensor(a)
    if a.size == 0:
        raise ValueError("mean of an empty tensor")
    return scale(tsum(a), 1.0 / a.size)


def sq_l2(a) -> Tensor:
    """Sum of squared entries, rank-0 result."""
    a = _as_tensor(a)
    return tsum(mul(a, a))


def sum_axis(a, axis: int) -> Tensor:
    a = _as_tensor(a)
    axis = _norm_axis(axis, a.ndim, "sum_axis")
    n = a.shape[axis]

    def bwd(g, need):
        return (expand(g, axis, n),)

    return _wrap(np.sum(a.data, axis=axis), Node("sum_axis", (a,), bwd))


def max_axis(a, axis: int) -> Tensor:
    """Maximum along one axis; ties route gradient to the lowest index."""
    a = _as_tensor(a)
    axis = _norm_axis(axis, a.ndim, "max_axis")
    n = a.shape[axis]
    cache: dict[str, Tensor] = {}

    def bwd(g, need):
        if "mask" not in cache:
            idx = np.argmax(a.data, axis=axis)
            sel = np.arange(n).reshape((1,) * axis + (n,) + (1,) * (a.ndim - axis - 1))
            cache["mask"] = Tensor((sel == np.expand_dims(idx, axis)).astype(np.float64),
                                   None, _checked=True)
        return (mul(expand(g, axis, n), cache["mask"]),)

    return _wrap(np.max(a.data, axis=axis), Node("max_axis", (a,), bwd))


# ---------------------------------------------------------------------------
# shape manipulation

def _norm_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


def expand(a, axis: int, n: int) -> Tensor:
    """Insert a new axis of length n at position axis by repetition."""
    a = _as_tensor(a)
    if not 0 <= axis <= a.ndim:
        raise ValueError(f"expand: axis {axis} out of range for rank {a.ndim}")
    if n < 1:
        raise ValueError("expand: n must be positive")

    def bwd(g, need):
        return (sum_axis(g, axis),)

    arr = np.repeat(np.expand_dims(a.data, axis), n, axis=axis)
    return _wrap(arr, Node("expand", (a,), bwd))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ValueError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape

    def bwd(g, need):
        return (reshape(g, old),)

    return _wrap(np.reshape(a.data, shape), Node("reshape", (a,), bwd))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ValueError(f"transpose: {axes} is not a permutation of rank {a.ndim}")
    inv = tuple(int(i) for i in np.argsort(axes))

    def bwd(g, need):
        return (transpose(g, inv),)

    return _wrap(np.transpose(a.data, axes), Node("transpose", (a,), bwd))


def concat(parts: Sequence, axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat: need at least one tensor")
    axis = _norm_axis(axis, parts[0].ndim, "concat")
    for p in parts[1:]:
        if p.ndim != parts[0].ndim:
            raise ValueError("concat: rank mismatch")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def bwd(g, need):
        return tuple(
            slice_axis(g, axis, int(offsets[i]), int(offsets[i + 1])) if need[i] else None
            for i in range(len(parts)))

    arr = np.concatenate([p.data for p in parts], axis=axis)
    return _wrap(arr, Node("concat", tuple(parts), bwd))


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    a = _as_tensor(a)
    axis = _norm_axis(axis, a.ndim, "slice_axis")
    if not 0 <= start < stop <= a.shape[axis]:
        raise ValueError(f"slice_axis: [{start}, {stop}) invalid for length {a.shape[axis]}")
    parent_len = a.shape[axis]

    def bwd(g, need):
        return (pad_slice(g, axis, start, parent_len),)

    sl = tuple(slice(None) if d != axis else slice(start, stop) for d in range(a.ndim))
    return _wrap(np.ascontiguousarray(a.data[sl]), Node("slice_axis", (a,), bwd))


def pad_slice(a, axis: int, start: int, total: int) -> Tensor:
    """Embed a into zeros of length `total` along `axis`, offset `start`."""
    a = _as_tensor(a)
    axis = _norm_axis(axis, a.ndim, "pad_slice")
    stop = start + a.shape[axis]
    if not 0 <= start < stop <= total:
        raise ValueError(f"pad_slice: [{start}, {stop}) invalid for length {total}")

    def bwd(g, need):
        return (slice_axis(g, axis, start, stop),)

    shape = list(a.shape)
    shape[axis] = total
    arr = np.zeros(shape)
    sl = tuple(slice(None) if d != axis else slice(start, stop) for d in range(a.ndim))
    arr[sl] = a.data
    return _wrap(arr, Node("pad_slice", (a,), bwd))


# ---------------------------------------------------------------------------
# differentiation

@dataclass
class Graph:
    """Topologically ordered record of the nodes feeding one output."""

    output: Tensor
    nodes: list[Tensor]

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        return cls(output, _toposort(output))


def _toposort(output: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(output, 0)]
    seen.add(output.serial)
    while stack:
        t, i = stack[-1]
        parents = t.node.parents if t.node is not None else ()
        if i < len(parents):
            stack[-1] = (t, i + 1)
            p = parents[i]
            if p.serial not in seen:
                seen.add(p.serial)
                stack.append((p, 0))
        else:
            order.append(t)
            stack.pop()
    return order


def grad(output: Tensor, wrt: Sequence[Tensor]) -> list[Tensor]:
    """Reverse-mode gradients of a scalar output with respect to `wrt`.

    The returned tensors carry differentiation records, so a second grad
    call over (a scalar function of) them is valid. Targets that the output
    does not depend on receive zero tensors. Forward values are never
    mutated.
    """
    if not isinstance(output, Tensor):
        raise ValueError("grad: output must be a Tensor")
    if output.ndim != 0:
        raise ValueError(f"grad: output must be rank-0, got shape {output.shape}")
    wrt = list(wrt)
    for w in wrt:
        if not isinstance(w, Tensor):
            raise ValueError("grad: wrt entries must be Tensors")

    order = _toposort(output)
    wrt_serials = {w.serial for w in wrt}

    # A node needs a cotangent only if some wrt target is reachable from it.
    leads: dict[int, bool] = {}
    for t in order:  # parents precede consumers
        hit = t.serial in wrt_serials
        if not hit and t.node is not None:
            hit = any(leads[p.serial] for p in t.node.parents)
        leads[t.serial] = hit

    cot: dict[int, Tensor] = {}
    if leads[output.serial]:
        cot[output.serial] = Tensor(np.array(1.0), None, _checked=True)
        for t in reversed(order):
            g = cot.get(t.serial)
            if g is None or t.node is None:
                continue
            parents = t.node.parents
            need = tuple(leads[p.serial] for p in parents)
            if not any(need):
                continue
            contribs = t.node.bwd(g, need)
            for p, c, n in zip(parents, contribs, need):
                if not n or c is None:
                    continue
                prev = cot.get(p.serial)
                cot[p.serial] = c if prev is None else add(prev, c)

    return [cot.get(w.serial,
                    Tensor(np.zeros(w.shape), None, _checked=True))
            for w in wrt]
