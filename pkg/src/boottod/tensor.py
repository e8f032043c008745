"""
Tensor Arithmetic with Reverse-Mode Differentiation

Dense float64 arrays that record the differentiable operations applied to them.
Calling backward() on a scalar replays the recorded operations in reverse
execution order and accumulates gradients on every grad-enabled leaf.
"""

import itertools
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import BackwardError, DimensionError, NumericalError, TargetIndexError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64

_sequence = itertools.count()
_local = threading.local()

Scalar = Union[int, float]


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Run ops without recording them (per thread)"""
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


@dataclass(eq=False)
class Node:
    """One executed differentiable operation"""
    op: str
    inputs: Tuple["Tensor", ...]
    output: "Tensor"
    backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]
    seq: int
    consumed: bool = False


class Tensor:
    """Row-major float array with optional gradient tracking"""

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        self.data = np.array(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # Operators
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("division is only defined by a Python scalar")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_finite(op: str, data: np.ndarray):
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values (shape {data.shape})")


def _record(op: str, data: np.ndarray, inputs: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap a forward result and put it on the tape when any input needs gradients"""
    _check_finite(op, data)
    out = Tensor(data, dtype=data.dtype)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), out, backward_fn, next(_sequence))
    return out


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    """Ordered record of the operations a scalar depends on"""
    records: List[Node] = field(default_factory=list)

    @classmethod
    def collect(cls, root: Tensor) -> "Tape":
        seen = set()
        nodes: List[Node] = []
        stack = [root._node] if root._node is not None else []
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            if node.consumed:
                raise BackwardError(
                    f"graph already consumed by a previous backward pass (op '{node.op}')"
                )
            seen.add(id(node))
            nodes.append(node)
            for parent in node.inputs:
                if parent._node is not None and id(parent._node) not in seen:
                    stack.append(parent._node)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def replay_backward(self, root: Tensor, seed: np.ndarray) -> Dict[Tensor, np.ndarray]:
        pending: Dict[int, np.ndarray] = {id(root): seed}
        leaf_grads: Dict[int, np.ndarray] = {}
        leaves: Dict[int, Tensor] = {}

        for node in reversed(self.records):
            out_grad = pending.pop(id(node.output), None)
            node.consumed = True
            backward_fn, node.backward_fn = node.backward_fn, None
            if out_grad is None:
                continue
            input_grads = backward_fn(out_grad)
            for parent, grad in zip(node.inputs, input_grads):
                if grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if parent._node is None:
                    leaves[key] = parent
                    leaf_grads[key] = grad if key not in leaf_grads else leaf_grads[key] + grad
                else:
                    pending[key] = grad if key not in pending else pending[key] + grad

        return {leaves[key]: leaf_grads[key] for key in leaf_grads}


def backward(loss: Tensor, leaves: Optional[Iterable[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
    """
    Differentiate a scalar loss.

    Returns a map from every grad-enabled leaf to its gradient. Leaves passed in
    `leaves` that the loss does not depend on get a zero gradient. Gradients are
    also accumulated onto each leaf's `.grad`.
    """
    if loss.data.size != 1:
        raise BackwardError(f"backward() needs a scalar loss, got shape {loss.shape}")

    seed = np.ones_like(loss.data)
    if loss._node is None:
        if not loss.requires_grad:
            raise BackwardError("loss is not on the tape (no input requires gradients)")
        grads = {loss: seed}
    else:
        grads = Tape.collect(loss).replay_backward(loss, seed)

    for leaf in leaves or ():
        if leaf not in grads:
            grads[leaf] = np.zeros_like(leaf.data)

    for leaf, grad in grads.items():
        grad = grad.reshape(leaf.shape)
        grads[leaf] = grad
        leaf.grad = grad if leaf.grad is None else leaf.grad + grad
    return grads


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

def _operands(op: str, a, b) -> Tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _operands("add", a, b)

    def _backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _record("add", a.data + b.data, (a, b), _backward)


def sub(a, b) -> Tensor:
    a, b = _operands("sub", a, b)

    def _backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _record("sub", a.data - b.data, (a, b), _backward)


def mul(a, b) -> Tensor:
    a, b = _operands("mul", a, b)

    def _backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _record("mul", a.data * b.data, (a, b), _backward)


def scale(x: Tensor, factor: Scalar) -> Tensor:
    factor = float(factor)
    return _record("scale", x.data * factor, (x,), lambda g: (g * factor,))


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    return _record("relu", np.where(positive, x.data, 0.0), (x,), lambda g: (g * positive,))


def gelu(x: Tensor) -> Tensor:
    c = np.sqrt(2.0 / np.pi)
    inner = c * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(inner)
    out = 0.5 * x.data * (1.0 + t)

    def _backward(g):
        sech2 = 1.0 - t ** 2
        local = 0.5 * (1.0 + t) + 0.5 * x.data * sech2 * c * (1.0 + 3 * 0.044715 * x.data ** 2)
        return (g * local,)

    return _record("gelu", out, (x,), _backward)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator] = None, train: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or p == 0"""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs a random generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _record("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def _detach_enabled() -> bool:
    return getattr(_local, "detach_enabled", True)


@contextmanager
def _through_stop_gradient():
    """Let stop_gradient pass gradients (per thread); used to explain grad-check mismatches"""
    previous = _detach_enabled()
    _local.detach_enabled = False
    try:
        yield
    finally:
        _local.detach_enabled = previous


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity that contributes no gradient to anything upstream"""
    if not _detach_enabled():
        return _record("stop_gradient", x.data.copy(), (x,), lambda g: (g,))
    return Tensor(x.data.copy(), requires_grad=False, dtype=x.data.dtype)


def masked_fill(x: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """Replace entries where `keep` is False by a constant"""
    keep = np.asarray(keep, dtype=bool)
    try:
        np.broadcast_shapes(keep.shape, x.shape)
    except ValueError:
        raise DimensionError(f"masked_fill: mask shape {keep.shape} does not fit {x.shape}")
    keep = np.broadcast_to(keep, x.shape)
    return _record("masked_fill", np.where(keep, x.data, value), (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# Linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (k, n) or batched (..., m, k) @ (..., k, n)"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions differ in {a.shape} and {b.shape}")

    def _backward(g):
        grad_a = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            grad_b = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            grad_b = np.swapaxes(a.data, -1, -2) @ g
        return grad_a, grad_b

    return _record("matmul", a.data @ b.data, (a, b), _backward)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    if bias.ndim != 1 or x.shape[-1:] != bias.shape:
        raise DimensionError(f"add_bias: bias {bias.shape} does not match last dim of {x.shape}")

    def _backward(g):
        return g, g.reshape(-1, bias.shape[0]).sum(axis=0)

    return _record("add_bias", x.data + bias.data, (x, bias), _backward)


def add_positions(x: Tensor, table: Tensor) -> Tensor:
    """(..., L, d) plus an L x d table shared across the leading axes"""
    if table.ndim != 2 or x.ndim < 2 or x.shape[-2:] != table.shape:
        raise DimensionError(f"add_positions: table {table.shape} does not match trailing dims of {x.shape}")

    def _backward(g):
        return g, g.reshape((-1,) + table.shape).sum(axis=0)

    return _record("add_positions", x.data + table.data, (x, table), _backward)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = x.shape
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(original),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def take(x: Tensor, index) -> Tensor:
    """Basic or fancy indexing with scatter-add backward"""
    out = x.data[index]

    def _backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _record("take", np.array(out), (x,), _backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise TargetIndexError(f"embedding: id out of range for table of {table.shape[0]} rows")

    def _backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _record("embedding", table.data[ids], (table,), _backward)


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    def _backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", np.asarray(x.data.sum(axis=axis)), (x,), _backward)


def tensor_mean(x: Tensor, axis=None) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tensor_sum(x, axis), 1.0 / float(count))


# ---------------------------------------------------------------------------
# Normalization and attention helpers
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last dim of {x.shape}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = centered * inv_std

    def _backward(g):
        d_normed = g * gain.data
        grad_x = inv_std * (
            d_normed
            - d_normed.mean(axis=-1, keepdims=True)
            - normed * (d_normed * normed).mean(axis=-1, keepdims=True)
        )
        grad_gain = (g * normed).reshape(-1, d).sum(axis=0)
        grad_bias = g.reshape(-1, d).sum(axis=0)
        return grad_x, grad_gain, grad_bias

    return _record("layer_norm", normed * gain.data + bias.data, (x, gain, bias), _backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis"""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=-1, keepdims=True)

    def _backward(g):
        return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)

    return _record("softmax", probs, (x,), _backward)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True))
    safe = np.maximum(norm, eps)
    out = x.data / safe

    def _backward(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / safe,)

    return _record("l2_normalize", out, (x,), _backward)


# ---------------------------------------------------------------------------
# Distances and losses
# ---------------------------------------------------------------------------

def l2_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance over the last axis; subgradient 0 where a == b"""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"l2_distance: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    dist = np.sqrt((diff ** 2).sum(axis=-1))

    def _backward(g):
        safe = np.where(dist > 0, dist, 1.0)
        unit = np.where((dist > 0)[..., None], diff / safe[..., None], 0.0)
        grad = np.asarray(g)[..., None] * unit
        return grad, -grad

    return _record("l2_distance", np.asarray(dist), (a, b), _backward)


def squared_distance(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"squared_distance: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data

    def _backward(g):
        grad = 2.0 * np.asarray(g)[..., None] * diff
        return grad, -grad

    return _record("squared_distance", np.asarray((diff ** 2).sum(axis=-1)), (a, b), _backward)


def softmax_cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean over rows of -log softmax(logits)[target]"""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be n x V, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n, vocab = logits.shape
    if targets.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: {targets.shape[0]} targets for {n} rows")
    if n and (targets.min() < 0 or targets.max() >= vocab):
        raise TargetIndexError(f"softmax_cross_entropy: target index out of range [0, {vocab})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(log_norm - shifted[rows, targets])

    def _backward(g):
        probs = np.exp(shifted - log_norm[:, None])
        probs[rows, targets] -= 1.0
        return (probs * (float(g) / n),)

    return _record("softmax_cross_entropy", np.asarray(loss), (logits,), _backward)


def binary_cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean per-label binary cross-entropy, stable for large |logit|"""
    targets = np.asarray(targets, dtype=logits.data.dtype)
    if targets.shape != logits.shape:
        raise DimensionError(f"binary_cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    x = logits.data
    loss = np.mean(np.maximum(x, 0.0) - x * targets + np.log1p(np.exp(-np.abs(x))))

    def _backward(g):
        probs = 1.0 / (1.0 + np.exp(-x))
        return ((probs - targets) * (float(g) / x.size),)

    return _record("binary_cross_entropy", np.asarray(loss), (logits,), _backward)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

def _analytic_gradient(f: Callable[[Tensor], Tensor], base: np.ndarray) -> np.ndarray:
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if out.data.size != 1:
        raise BackwardError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    if not out.requires_grad:
        return np.zeros_like(base)
    return backward(out, leaves=[leaf])[leaf]


def _max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if not analytic.size:
        return 0.0
    scale_ = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / scale_).max())


@dataclass
class GradCheckResult:
    """
    detached_mismatch is set when analytic and numeric gradients disagree only
    because part of f runs through stop_gradient: with gradients let through
    those paths the two agree again.
    """
    analytic: np.ndarray
    numeric: np.ndarray
    coords: np.ndarray
    max_relative_error: float
    detached_mismatch: bool = False


def compare_gradients(f: Callable[[Tensor], Tensor], x, h: float = 1e-5,
                      max_coords: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None,
                      tolerance: float = 1e-4) -> GradCheckResult:
    """Central differences against backward() for a scalar-valued f"""
    base = np.array(as_tensor(x).data, dtype=np.float64)
    _check_finite("grad_check input", base)

    analytic = _analytic_gradient(f, base)

    flat = np.arange(base.size)
    if max_coords is not None and max_coords < base.size:
        rng = rng or np.random.default_rng(0)
        flat = np.sort(rng.choice(base.size, size=max_coords, replace=False))

    numeric = np.zeros(len(flat))
    with no_grad():
        for slot, coord in enumerate(flat):
            shifted = base.copy().reshape(-1)
            shifted[coord] += h
            upper = f(Tensor(shifted.reshape(base.shape))).item()
            shifted[coord] -= 2 * h
            lower = f(Tensor(shifted.reshape(base.shape))).item()
            numeric[slot] = (upper - lower) / (2 * h)

    error = _max_relative_error(analytic.reshape(-1)[flat], numeric)
    detached = False
    if error > tolerance:
        with _through_stop_gradient():
            through = _analytic_gradient(f, base)
        detached = _max_relative_error(through.reshape(-1)[flat], numeric) <= tolerance
        if detached:
            logger.info(f"grad_check mismatch {error:.3g} is explained by stop_gradient paths (expected)")
    return GradCheckResult(
        analytic=analytic,
        numeric=numeric,
        coords=flat,
        max_relative_error=error,
        detached_mismatch=detached,
    )


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5,
               max_coords: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between analytic and central-difference gradients"""
    return compare_gradients(f, x, h, max_coords, rng).max_relative_error
