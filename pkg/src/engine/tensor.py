"""
Tensor Engine - engine/tensor.py

RESPONSIBILITIES:
-----------------
Dense float64 tensors that record a differentiation graph as operations
are applied, and the reverse-mode sweep over that graph.

CRITICAL RULES:
--------------
- float64 everywhere; product(shape) == data.size
- Every op output is checked for NaN/Inf and raises NumericalError
- Node ids are drawn from a monotone counter, so sorting by id is a
  topological order (an op's inputs always exist before it does)
- Op outputs are never mutated after creation; only leaf parameters are
  updated in place by the optimizer, between graphs

ARCHITECTURE:
------------
    Tensor (leaf, requires_grad)
        |
    ops.* -> apply_op(op, forward, backward, *inputs) -> Tensor + Node
        |
    Graph.trace(loss) -> nodes sorted by id
        |
    backward(loss) -> grads accumulated in reverse order onto leaves
"""

import contextvars
import itertools
import logging
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Optional, Union

import numpy as np

from utils.validation import NumericalError, ShapeError, ValidationError, require_finite

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "phaseprof_grad_enabled", default=True
)
_node_ids = itertools.count()


# ============================================================================
# GRAPH RECORDING STATE
# ============================================================================

@contextmanager
def no_grad() -> Iterator[None]:
    """
    Disable graph recording inside the block.

    Context-local, so concurrent inference threads do not interfere with a
    training thread that records graphs.
    """
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


# ============================================================================
# TENSOR
# ============================================================================

@dataclass(eq=False)
class Node:
    """One recorded op application."""
    id: int
    op: str
    inputs: tuple["Tensor", ...]
    forward: Callable[..., np.ndarray]
    backward: Callable[..., tuple[Optional[np.ndarray], ...]]


class Tensor:
    """
    Dense N-dimensional float64 array with optional gradient tracking.

    Example:
        >>> x = Tensor([1.0, 2.0], requires_grad=True)
        >>> loss = (x * x).sum()
        >>> backward(loss)
        >>> x.grad
        array([2., 4.])
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(data, dtype=np.float64)
        if any(dim <= 0 for dim in array.shape):
            raise ShapeError("dimension sizes must be positive", field=name or "tensor", value=array.shape)
        if not np.all(np.isfinite(array)):
            raise NumericalError("tensor", "input data holds NaN/Inf")
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = array
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._node = None
        return out

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError("item() requires a single-element tensor", value=self.shape)
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # ------------------------------------------------------------------
    # Operator sugar (implemented in engine.ops)
    # ------------------------------------------------------------------

    def __add__(self, other: Any) -> "Tensor":
        from engine import ops
        return ops.broadcast_add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        from engine import ops
        return ops.sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        from engine import ops
        return ops.sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        from engine import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: float) -> "Tensor":
        from engine import ops
        return ops.mul(self, 1.0 / float(other))

    def __neg__(self) -> "Tensor":
        from engine import ops
        return ops.neg(self)

    def __pow__(self, exponent: float) -> "Tensor":
        from engine import ops
        return ops.power(self, exponent)

    def __getitem__(self, index: Any) -> "Tensor":
        from engine import ops
        return ops.index(self, index)

    def sum(self, axis: Optional[Union[int, tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        from engine import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        from engine import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: Any) -> "Tensor":
        from engine import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def permute(self, *axes: int) -> "Tensor":
        from engine import ops
        return ops.permute(self, axes)


def as_tensor(value: Union["Tensor", ArrayLike]) -> Tensor:
    """Wrap constants so ops can treat every operand as a Tensor."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def apply_op(
    op: str,
    forward: Callable[..., np.ndarray],
    backward: Callable[..., tuple[Optional[np.ndarray], ...]],
    *inputs: Tensor,
) -> Tensor:
    """
    Run ``forward`` on the input arrays and record a graph node.

    ``backward(grad_out, *input_arrays, out=out_array)`` must return one
    gradient (or None) per input.

    Raises:
        NumericalError: if the forward result holds NaN/Inf
    """
    out_data = np.asarray(forward(*(t.data for t in inputs)), dtype=np.float64)
    require_finite(op, out_data)

    out = Tensor._wrap(out_data)
    if _grad_enabled.get() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(
            id=next(_node_ids),
            op=op,
            inputs=tuple(inputs),
            forward=forward,
            backward=backward,
        )
    return out


# ============================================================================
# GRAPH
# ============================================================================

@dataclass
class Graph:
    """
    Recorded ops reachable from a root tensor, in topological order.

    ``outputs`` maps node id to the tensor the node produced; the graph
    holds those references for as long as it lives.
    """
    nodes: list[Node] = field(default_factory=list)
    outputs: dict[int, Tensor] = field(default_factory=dict)
    leaves: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        graph = cls()
        seen: set[int] = set()
        stack = [root]
        while stack:
            tensor = stack.pop()
            if id(tensor) in seen:
                continue
            seen.add(id(tensor))
            node = tensor._node
            if node is None:
                if tensor.requires_grad:
                    graph.leaves.append(tensor)
                continue
            graph.nodes.append(node)
            graph.outputs[node.id] = tensor
            stack.extend(node.inputs)
        graph.nodes.sort(key=lambda n: n.id)
        return graph

    def __len__(self) -> int:
        return len(self.nodes)

    def op_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for node in self.nodes:
            counts[node.op] = counts.get(node.op, 0) + 1
        return counts

    def replay(self) -> bool:
        """Re-run every recorded forward; True iff all outputs match bitwise."""
        for node in self.nodes:
            recomputed = np.asarray(node.forward(*(t.data for t in node.inputs)), dtype=np.float64)
            recorded = self.outputs[node.id].data
            if recomputed.shape != recorded.shape or recomputed.tobytes() != recorded.tobytes():
                logger.warning(f"Replay mismatch at node {node.id} ({node.op})")
                return False
        return True


def backward(loss: Tensor, graph: Optional[Graph] = None) -> Graph:
    """
    Reverse-mode sweep from a scalar loss.

    Gradients are accumulated onto ``.grad`` of every leaf tensor with
    ``requires_grad``. Parameters the loss does not depend on are left
    untouched (callers treat a missing grad as zero).

    Returns:
        The traced graph (reusable for replay checks)

    Raises:
        ShapeError: if loss is not a single element
        ValidationError: if loss was not produced by a recorded op
        NumericalError: if a gradient becomes non-finite
    """
    if loss.size != 1:
        raise ShapeError("loss must be a scalar", field="loss", value=loss.shape)
    if graph is None:
        if loss._node is None and not loss.requires_grad:
            raise ValidationError("loss is not connected to any tensor requiring gradients", field="loss")
        graph = Graph.trace(loss)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        out = graph.outputs[node.id]
        grad_out = grads.pop(id(out), None)
        if grad_out is None:
            continue
        input_grads = node.backward(grad_out, *(t.data for t in node.inputs), out=out.data)
        for tensor, grad in zip(node.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            if not np.all(np.isfinite(grad)):
                raise NumericalError(f"{node.op}.backward", "non-finite gradient")
            key = id(tensor)
            grads[key] = grads[key] + grad if key in grads else grad

    for leaf in graph.leaves:
        grad = grads.get(id(leaf))
        if grad is None:
            continue
        leaf.grad = grad.copy() if leaf.grad is None else leaf.grad + grad
    return graph
