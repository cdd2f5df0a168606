"""Dense float64 tensors with a reverse-mode automatic differentiation tape.

Every value flowing through the networks in this package is a :class:`Tensor`
wrapping a rank-1..4 ``numpy.ndarray`` in row-major N,C,H,W order.  Operations
that participate in differentiation record an :class:`OpRecord` on their
output; :func:`backward` replays the records in reverse topological order and
accumulates gradients into the ``grad`` buffers of the leaf tensors.

Only same-shape (or tensor-scalar) arithmetic is supported; general
broadcasting is deliberately out of scope.  All math is float64.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DimensionError, NumericError

MAX_RANK = 4

Scalar = Union[int, float]

_finite_checks = False


def set_finite_checks(enabled: bool) -> bool:
    """Globally enable/disable NaN/Inf validation of op outputs and gradients.

    Off by default.  Returns the previous setting so callers can restore it.
    """
    global _finite_checks
    previous = _finite_checks
    _finite_checks = bool(enabled)
    return previous


def finite_checks_enabled() -> bool:
    return _finite_checks


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    """A dense float64 array with optional gradient tracking.

    Parameters
    ----------
    data:
        Array-like of rank 1..4.  Scalars are stored with shape ``(1,)``.
    requires_grad:
        When true, this tensor is a differentiation leaf: a zero-filled
        ``grad`` buffer of the same shape is allocated immediately and
        :func:`backward` accumulates into it.

    Tensors produced by operations inherit ``requires_grad`` from their
    inputs but keep ``grad=None``; only leaves retain gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "_record")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds maximum {MAX_RANK}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = (
            np.zeros_like(arr) if self.requires_grad else None
        )
        self._record: Optional[OpRecord] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        """Reset the gradient buffer to zeros (no-op unless a leaf)."""
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        """A new leaf tensor sharing no graph history (data is copied)."""
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    # -- operator sugar (same-shape tensor or python scalar operands) --

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other, like=self))

    def __rsub__(self, other):
        return add(-self, other)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class OpRecord:
    """One recorded operation: kind, inputs, output and its backward rule.

    ``backward_fn`` receives the gradient w.r.t. the output array and must
    return one freshly allocated gradient array (or ``None``) per input.
    """

    __slots__ = ("kind", "inputs", "output", "backward_fn")

    def __init__(
        self,
        kind: str,
        inputs: Tuple[Tensor, ...],
        output: Tensor,
        backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    ):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Topologically ordered op records reachable from one output tensor.

    Invariants: every record's inputs were produced by earlier records or
    are leaves, and a backward sweep visits each record exactly once in
    reverse order.
    """

    def __init__(self, records: list[OpRecord]):
        self.records = records

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        """Collect the records below ``root`` in topological order.

        Iterative postorder walk; safe for graphs far deeper than the
        Python recursion limit.
        """
        records: list[OpRecord] = []
        done: set[int] = set()
        expanded: set[int] = set()
        stack = [root]
        while stack:
            t = stack[-1]
            rec = t._record
            if rec is None or id(rec) in done:
                stack.pop()
                continue
            if id(rec) in expanded:
                done.add(id(rec))
                records.append(rec)
                stack.pop()
                continue
            expanded.add(id(rec))
            for parent in rec.inputs:
                prec = parent._record
                if prec is not None and id(prec) not in done:
                    stack.append(parent)
        return cls(records)


def make_op(
    kind: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Wrap ``out_data`` in a tensor, recording the op if any input needs grad.

    This is the single entry point through which every differentiable
    operation in the package joins the tape.
    """
    if _finite_checks:
        _check_finite(out_data, f"output of {kind}")
    out = Tensor(out_data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._record = OpRecord(kind, tuple(inputs), out, backward_fn)
    return out


def backward(loss: Tensor, graph: Optional[Graph] = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    ``loss`` must hold exactly one element.  Leaves not reachable from the
    loss keep their (zero-initialised) gradients.  Calling backward twice
    without :meth:`Tensor.zero_grad` accumulates, matching the contract
    that gradients add up over calls.
    """
    if loss.data.size != 1:
        raise DimensionError(
            f"backward() needs a scalar loss, got shape {loss.shape}"
        )
    if graph is None:
        graph = Graph.trace(loss)
    seed = np.ones_like(loss.data)
    if loss._record is None:
        if loss.requires_grad:
            loss.grad += seed
        return
    grads: dict[int, np.ndarray] = {id(loss): seed}
    for rec in reversed(graph.records):
        gout = grads.pop(id(rec.output), None)
        if gout is None:
            continue
        in_grads = rec.backward_fn(gout)
        for t, g in zip(rec.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            if _finite_checks:
                _check_finite(g, f"gradient from {rec.kind}")
            if t._record is None:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g
            else:
                key = id(t)
                if key in grads:
                    grads[key] += g
                else:
                    grads[key] = g


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0 and like is not None:
        arr = np.full_like(like.data, float(arr))
    return Tensor(arr)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum of two same-shape tensors (or tensor + scalar)."""
    b = _as_tensor(b, like=a)
    _binary_shapes(a, b, "add")

    def bwd(g):
        return g.copy(), g.copy()

    return make_op("add", (a, b), a.data + b.data, bwd)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product of two same-shape tensors (or tensor * scalar)."""
    if not isinstance(b, Tensor):
        scale = float(b)

        def bwd_scalar(g):
            return (g * scale,)

        return make_op("mul_scalar", (a,), a.data * scale, bwd_scalar)
    _binary_shapes(a, b, "mul")
    a_data, b_data = a.data, b.data

    def bwd(g):
        return g * b_data, g * a_data

    return make_op("mul", (a, b), a_data * b_data, bwd)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements, returned as a shape-(1,) scalar tensor."""
    shape = x.shape

    def bwd(g):
        return (np.full(shape, g.reshape(-1)[0]),)

    return make_op("sum", (x,), np.array([x.data.sum()]), bwd)


def tensor_mean(x: Tensor) -> Tensor:
    """Arithmetic mean of all elements as a scalar tensor."""
    n = x.size
    shape = x.shape

    def bwd(g):
        return (np.full(shape, g.reshape(-1)[0] / n),)

    return make_op("mean", (x,), np.array([x.data.mean()]), bwd)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """View with a new shape (same element count, rank <= 4)."""
    old = x.shape
    out_data = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(old).copy(),)

    return make_op("reshape", (x,), out_data, bwd)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate N,C,H,W tensors along the channel axis."""
    first = tensors[0]
    for t in tensors[1:]:
        if t.ndim != 4 or first.ndim != 4:
            raise DimensionError("concat_channels expects rank-4 tensors")
        if t.shape[0] != first.shape[0] or t.shape[2:] != first.shape[2:]:
            raise DimensionError(
                f"concat_channels: incompatible shapes {first.shape} vs {t.shape}"
            )
    sizes = [t.shape[1] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=1)

    def bwd(g):
        pieces = []
        start = 0
        for c in sizes:
            pieces.append(g[:, start : start + c].copy())
            start += c
        return pieces

    return make_op("concat_channels", tuple(tensors), out_data, bwd)
