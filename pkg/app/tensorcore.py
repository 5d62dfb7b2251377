# app/tensorcore.py

"""
Reverse-mode differentiation over dense float64 tensors.

Every operation appends one record to the ComputeGraph it runs on, so the
append order is already a topological order. A reverse sweep from a scalar
root walks the records backwards once and leaves ``grad`` populated on the
nodes flagged with ``retain`` (attention probabilities, hidden states) and on
trainable leaves.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import log_softmax

from app.config import TENSOR_DEBUG
from app.errors import TensorError

logger = logging.getLogger(__name__)

Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
Index = Union[int, slice, Tuple[Union[int, slice], ...]]


class DiffTensor:
    """Dense tensor node with an optional retained gradient"""

    __slots__ = ("values", "grad", "retain_flag", "requires_grad", "node_id", "graph")

    def __init__(self, values: np.ndarray, graph: "ComputeGraph", node_id: int, requires_grad: bool = False):
        self.values = values
        self.grad: Optional[np.ndarray] = None
        self.retain_flag = False
        self.requires_grad = requires_grad
        self.node_id = node_id
        self.graph = graph

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)

    def item(self) -> float:
        if self.size != 1:
            raise TensorError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def __repr__(self):
        return f"DiffTensor(id={self.node_id}, shape={self.shape}, retain={self.retain_flag})"


@dataclass(frozen=True)
class OpRecord:
    """One appended operation: which nodes went in, which came out"""
    kind: str
    inputs: Tuple[int, ...]
    output: int
    backward: Backward


class ComputeGraph:
    """Append-only operation log; one graph per forward pass"""

    def __init__(self, record: bool = True, debug: bool = TENSOR_DEBUG):
        self.record = record
        self.debug = debug
        self.tensors: List[DiffTensor] = []
        self.nodes: List[OpRecord] = []

    def __len__(self) -> int:
        return len(self.tensors)

    def _new(self, values: np.ndarray, requires_grad: bool) -> DiffTensor:
        values = np.asarray(values, dtype=np.float64)
        if self.debug and not np.all(np.isfinite(values)):
            raise TensorError(f"non-finite values produced at node {len(self.tensors)}")
        tensor = DiffTensor(values, self, len(self.tensors), requires_grad and self.record)
        self.tensors.append(tensor)
        return tensor

    def leaf(self, values, requires_grad: bool = False, copy: bool = True) -> DiffTensor:
        """Register input data. Trainable leaves keep their gradient after a sweep."""
        values = np.array(values, dtype=np.float64) if copy else np.asarray(values, dtype=np.float64)
        tensor = self._new(values, requires_grad)
        tensor.retain_flag = tensor.requires_grad
        return tensor

    def constant(self, values, copy: bool = True) -> DiffTensor:
        return self.leaf(values, requires_grad=False, copy=copy)

    def apply(self, kind: str, inputs: Sequence[DiffTensor], values: np.ndarray, backward: Backward) -> DiffTensor:
        for tensor in inputs:
            if tensor.graph is not self:
                raise TensorError(f"{kind}: operand belongs to a different graph")
        needs_grad = self.record and any(t.requires_grad for t in inputs)
        out = self._new(values, needs_grad)
        if needs_grad:
            self.nodes.append(OpRecord(kind, tuple(t.node_id for t in inputs), out.node_id, backward))
        return out


def retain(tensor: DiffTensor) -> DiffTensor:
    """Flag an interior node so its gradient survives the reverse sweep"""
    tensor.retain_flag = True
    tensor.requires_grad = tensor.graph.record
    return tensor


def reverse_sweep(graph: ComputeGraph, root: DiffTensor) -> None:
    """Populate ``grad`` on retained nodes with d(root)/d(node)"""
    if not graph.tensors:
        return
    if root.graph is not graph:
        raise TensorError("root belongs to a different graph")
    if root.size != 1:
        raise TensorError(f"reverse sweep needs a scalar root, got shape {root.shape}")

    adjoint: List[Optional[np.ndarray]] = [None] * len(graph.tensors)
    adjoint[root.node_id] = np.ones_like(root.values)

    for record in reversed(graph.nodes):
        upstream = adjoint[record.output]
        if upstream is None:
            continue
        for node_id, grad in zip(record.inputs, record.backward(upstream)):
            if grad is None or not graph.tensors[node_id].requires_grad:
                continue
            current = adjoint[node_id]
            adjoint[node_id] = grad if current is None else current + grad

    for tensor in graph.tensors:
        if not tensor.retain_flag:
            continue
        grad = adjoint[tensor.node_id]
        tensor.grad = np.zeros_like(tensor.values) if grad is None else np.array(grad, dtype=np.float64)
        if graph.debug and not np.all(np.isfinite(tensor.grad)):
            raise TensorError(f"non-finite gradient at node {tensor.node_id}")


# --- helpers -----------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _lift(graph: ComputeGraph, value) -> DiffTensor:
    return value if isinstance(value, DiffTensor) else graph.constant(value)


# --- elementwise ---------------------------------------------------------------

def add(a: DiffTensor, b) -> DiffTensor:
    b = _lift(a.graph, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return a.graph.apply("add", (a, b), a.values + b.values, backward)


def sub(a: DiffTensor, b) -> DiffTensor:
    b = _lift(a.graph, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return a.graph.apply("sub", (a, b), a.values - b.values, backward)


def mul(a: DiffTensor, b) -> DiffTensor:
    b = _lift(a.graph, b)

    def backward(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return a.graph.apply("mul", (a, b), a.values * b.values, backward)


def scale(a: DiffTensor, factor: float) -> DiffTensor:
    factor = float(factor)
    return a.graph.apply("scale", (a,), a.values * factor, lambda g: (g * factor,))


def tanh(a: DiffTensor) -> DiffTensor:
    out = np.tanh(a.values)
    return a.graph.apply("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def exp(a: DiffTensor) -> DiffTensor:
    out = np.exp(a.values)
    return a.graph.apply("exp", (a,), out, lambda g: (g * out,))


def relu(a: DiffTensor) -> DiffTensor:
    positive = a.values > 0
    return a.graph.apply("relu", (a,), np.where(positive, a.values, 0.0), lambda g: (g * positive,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: DiffTensor) -> DiffTensor:
    """tanh-approximated GELU (smooth everywhere, keeps finite differences honest)"""
    x = a.values
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return a.graph.apply("gelu", (a,), out, backward)


# --- shape -----------------------------------------------------------------

def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise TensorError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.values, -1, -2)
        gb = np.swapaxes(a.values, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return a.graph.apply("matmul", (a, b), a.values @ b.values, backward)


def transpose(a: DiffTensor, axes: Sequence[int]) -> DiffTensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return a.graph.apply("transpose", (a,), np.transpose(a.values, axes).copy(),
                         lambda g: (np.transpose(g, inverse),))


def reshape(a: DiffTensor, shape: Sequence[int]) -> DiffTensor:
    original = a.shape
    return a.graph.apply("reshape", (a,), a.values.reshape(tuple(shape)).copy(),
                         lambda g: (g.reshape(original),))


def concat(tensors: Sequence[DiffTensor], axis: int = 0) -> DiffTensor:
    if not tensors:
        raise TensorError("concat of an empty sequence")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return tensors[0].graph.apply("concat", tuple(tensors),
                                  np.concatenate([t.values for t in tensors], axis=axis), backward)


def take(a: DiffTensor, index: Index) -> DiffTensor:
    """Basic (slice/int) indexing"""

    def backward(g):
        full = np.zeros_like(a.values)
        full[index] = g
        return (full,)

    return a.graph.apply("take", (a,), np.array(a.values[index], dtype=np.float64), backward)


def embedding(weight: DiffTensor, ids: Sequence[int]) -> DiffTensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise TensorError(f"token id outside table of {weight.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(weight.values)
        np.add.at(full, ids, g)
        return (full,)

    return weight.graph.apply("embedding", (weight,), weight.values[ids], backward)


# --- reductions ---------------------------------------------------------------

def sum_all(a: DiffTensor) -> DiffTensor:
    return a.graph.apply("sum", (a,), np.array(a.values.sum()), lambda g: (np.full(a.shape, float(g)),))


def pick(a: DiffTensor, index: Tuple[int, ...]) -> DiffTensor:
    """Single element as a scalar node"""

    def backward(g):
        full = np.zeros_like(a.values)
        full[index] = float(g)
        return (full,)

    return a.graph.apply("pick", (a,), np.array(a.values[index]), backward)


# --- normalisation ---------------------------------------------------------------

def softmax_rows(x: DiffTensor, mask: Optional[np.ndarray] = None) -> DiffTensor:
    """Softmax over the last axis; masked-out entries get probability 0"""
    if x.shape[-1] == 0:
        raise TensorError("softmax over an empty last dimension")
    z = x.values
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not np.all(mask.any(axis=-1)):
            raise TensorError("softmax mask leaves a row without any admissible entry")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return x.graph.apply("softmax", (x,), s, backward)


def layer_norm(x: DiffTensor, gain: DiffTensor, bias: DiffTensor, eps: float) -> DiffTensor:
    mu = x.values.mean(axis=-1, keepdims=True)
    centred = x.values - mu
    inv = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv

    def backward(g):
        gx_hat = g * gain.values
        gx = inv * (gx_hat
                    - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return x.graph.apply("layer_norm", (x, gain, bias), xhat * gain.values + bias.values, backward)


# --- losses ---------------------------------------------------------------

def cross_entropy_next_token(logits: DiffTensor, target: int) -> DiffTensor:
    """-log softmax(logits)[target] for a single next-token distribution"""
    if logits.values.ndim != 1:
        raise TensorError(f"expected logits of shape [V], got {logits.shape}")
    vocab = logits.shape[0]
    if not 0 <= int(target) < vocab:
        raise TensorError(f"target {target} outside vocabulary of size {vocab}")
    target = int(target)
    log_probs = log_softmax(logits.values, axis=-1)

    def backward(g):
        grad = np.exp(log_probs)
        grad[target] -= 1.0
        return (grad * float(g),)

    return logits.graph.apply("cross_entropy", (logits,), np.array(-log_probs[target]), backward)


def cross_entropy_rows(logits: DiffTensor, targets: Sequence[int]) -> DiffTensor:
    """Mean next-token cross entropy over the rows of [T, V] logits"""
    targets = np.asarray(targets, dtype=np.int64)
    rows, vocab = logits.shape
    if targets.shape != (rows,):
        raise TensorError(f"expected {rows} targets, got {targets.shape}")
    if rows == 0:
        raise TensorError("cross entropy over zero rows")
    if targets.min() < 0 or targets.max() >= vocab:
        raise TensorError(f"target outside vocabulary of size {vocab}")
    log_probs = log_softmax(logits.values, axis=-1)
    picked = log_probs[np.arange(rows), targets]

    def backward(g):
        grad = np.exp(log_probs)
        grad[np.arange(rows), targets] -= 1.0
        return (grad * (float(g) / rows),)

    return logits.graph.apply("cross_entropy_rows", (logits,), np.array(-picked.mean()), backward)
