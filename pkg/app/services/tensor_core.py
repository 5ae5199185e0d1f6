"""
Tensor Core Service - dense float64 tensors with reverse-mode autodiff.

Every operation records its parents and a backward closure on the result;
`backward(loss)` walks the graph once in reverse topological order and
accumulates gradients into the leaf tensors. Adam and Adadelta optimizers
update leaf tensors in place.
"""
from __future__ import annotations

import logging
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import truncnorm

from services.errors import NumericalError

logger = logging.getLogger(__name__)

DTYPE = np.float64
MASK_VALUE = -1e9
LAYER_NORM_EPS = 1e-12
INIT_STD = 0.02

_grad_mode = threading.local()


def grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad():
    """Build no graph inside the block (thread-local, safe for concurrent inference)."""
    previous = grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Tensor:
    """
    Dense row-major float64 array that remembers how it was computed.

    Leaf tensors created with requires_grad=True are parameters; their
    `grad` is filled by `backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: Tuple["Tensor", ...] = (),
        backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
    ):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> List["Tensor"]:
        return backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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
        return index_select(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis, keepdims)


@dataclass
class ComputeGraph:
    """Nodes reachable from a root, parents before children."""

    nodes: List[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputeGraph":
        order: List[Tensor] = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def backward(self, root: Tensor) -> List[Tensor]:
        grads = {id(root): np.ones_like(root.data)}
        leaves = []
        for node in reversed(self.nodes):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node.is_leaf:
                node.grad = grad if node.grad is None else node.grad + grad
                leaves.append(node)
                continue
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
        return leaves


def backward(loss: Tensor) -> List[Tensor]:
    """
    Back-propagate from a scalar loss.

    Args:
        loss: Scalar tensor at the end of the graph

    Returns:
        Leaf tensors that received a gradient
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return []
    return ComputeGraph.from_root(loss).backward(loss)


# ---------------------------------------------------------------------------
# construction helpers
# ---------------------------------------------------------------------------

def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = True) -> Tensor:
    return Tensor(np.ones(shape, dtype=DTYPE), requires_grad=requires_grad)


def truncated_normal(shape, rng: np.random.Generator, std: float = INIT_STD) -> Tensor:
    """Parameter drawn from N(0, std²) truncated at ±2 std."""
    values = truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)
    return Tensor(np.asarray(values, dtype=DTYPE).reshape(shape), requires_grad=True)


def _result(data: np.ndarray, op: str, parents: Tuple[Tensor, ...], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")
    track = grad_enabled() and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, requires_grad=False, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=parents, backward=backward_fn)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data, "add", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data, "sub", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data, "mul", (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, batched over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def _backward(g):
        grad_a = g @ np.swapaxes(b.data, -1, -2)
        grad_b = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _result(a.data @ b.data, "matmul", (a, b), _backward)


def reshape(t: Tensor, shape) -> Tensor:
    original = t.shape
    return _result(t.data.reshape(shape), "reshape", (t,), lambda g: (g.reshape(original),))


def transpose(t: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(t.ndim))[::-1]
    inverse = tuple(np.argsort(axes))
    return _result(t.data.transpose(axes), "transpose", (t,), lambda g: (g.transpose(inverse),))


def swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(t, tuple(axes))


def index_select(t: Tensor, index) -> Tensor:
    """Basic or fancy indexing; gradients scatter-add back."""

    def _backward(g):
        grad = np.zeros_like(t.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _result(t.data[index], "index", (t,), _backward)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: result shape is ids.shape + (table.shape[1],)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row id out of range for table with {table.shape[0]} rows")

    def _backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _result(table.data[ids], "gather", (table,), _backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), "concat", tuple(tensors), _backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def _backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=axis), "stack", tuple(tensors), _backward)


def tensor_sum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, t.shape).copy(),)

    return _result(np.sum(t.data, axis=axis, keepdims=keepdims), "sum", (t,), _backward)


def tensor_mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = t.size if axis is None else np.prod([t.shape[a] for a in np.atleast_1d(axis)])
    return mul(tensor_sum(t, axis, keepdims), 1.0 / float(count))


def tanh(t: Tensor) -> Tensor:
    y = np.tanh(t.data)
    return _result(y, "tanh", (t,), lambda g: (g * (1.0 - y * y),))


def sigmoid(t: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * t.data))
    return _result(y, "sigmoid", (t,), lambda g: (g * y * (1.0 - y),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(t: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = t.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    y = 0.5 * x * (1.0 + th)

    def _backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner),)

    return _result(y, "gelu", (t,), _backward)


# ---------------------------------------------------------------------------
# attention building blocks
# ---------------------------------------------------------------------------

def _stable_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(t: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Softmax over the last axis, stabilised by row-max subtraction.

    Args:
        t: Scores
        mask: Optional additive constant (0 keep, MASK_VALUE drop), broadcastable to t
    """
    z = t.data if mask is None else t.data + mask
    s = _stable_softmax(z)

    def _backward(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return _result(s, "softmax", (t,), _backward)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax(q·kᵀ/√d_k)·v over the last two axes."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    scores = mul(matmul(q, swap_last(k)), 1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax_rows(scores, mask), v)


def layer_norm(t: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Per-row standardisation over the last axis followed by gain/bias."""
    width = t.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ValueError(f"layer_norm gain/bias must have shape ({width},)")
    x = t.data
    centered = x - x.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std

    def _backward(g):
        g_hat = g * gain.data
        grad_x = inv_std * (
            g_hat
            - g_hat.mean(axis=-1, keepdims=True)
            - x_hat * np.mean(g_hat * x_hat, axis=-1, keepdims=True)
        )
        return grad_x, _unbroadcast(g * x_hat, gain.shape), _unbroadcast(g, bias.shape)

    return _result(x_hat * gain.data + bias.data, "layer_norm", (t, gain, bias), _backward)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _row_weights(n_rows: int, weights) -> np.ndarray:
    if weights is None:
        return np.full(n_rows, 1.0 / n_rows)
    weights = np.asarray(weights, dtype=DTYPE).reshape(-1)
    if weights.shape[0] != n_rows:
        raise ValueError("one weight per row expected")
    return weights


def cross_entropy(logits: Tensor, target, weights=None) -> Tensor:
    """
    Categorical cross-entropy −Σ target·log softmax(logits), per row.

    Args:
        logits: (n,) or (rows, n)
        target: Probability vector(s) matching logits
        weights: Optional per-row weights; default is the mean over rows

    Returns:
        Scalar tensor
    """
    target = np.asarray(target, dtype=DTYPE)
    if target.shape != logits.shape:
        raise ValueError(f"target shape {target.shape} != logits shape {logits.shape}")
    if np.any(target < 0) or not np.allclose(target.sum(axis=-1), 1.0, atol=1e-9):
        raise ValueError("target is not a probability distribution")
    z = logits.data.reshape(-1, logits.shape[-1])
    t = target.reshape(z.shape)
    shifted = z - z.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_p = shifted - log_norm
    w = _row_weights(z.shape[0], weights)
    loss = np.sum(w * -np.sum(t * log_p, axis=-1))

    def _backward(g):
        grad = (np.exp(log_p) - t) * w[:, None] * g
        return (grad.reshape(logits.shape),)

    return _result(np.asarray(loss), "cross_entropy", (logits,), _backward)


def binary_cross_entropy_with_logits(logits: Tensor, labels, weights=None) -> Tensor:
    """Mean-over-columns logistic loss per row, then row mean (or weighted sum)."""
    labels = np.asarray(labels, dtype=DTYPE)
    if labels.shape != logits.shape:
        raise ValueError(f"labels shape {labels.shape} != logits shape {logits.shape}")
    x = logits.data.reshape(logits.shape[0] if logits.ndim > 1 else 1, -1)
    y = labels.reshape(x.shape)
    per_elem = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    w = _row_weights(x.shape[0], weights)
    width = x.shape[1]
    loss = np.sum(w * per_elem.mean(axis=-1))

    def _backward(g):
        prob = 0.5 * (1.0 + np.tanh(0.5 * x))
        grad = (prob - y) * (w[:, None] / width) * g
        return (grad.reshape(logits.shape),)

    return _result(np.asarray(loss), "bce_logits", (logits,), _backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
    atol: float = 0.0,
) -> float:
    """
    Compare analytic gradients with central differences.

    Args:
        f: Builds the scalar loss from the current parameter values
        params: Leaf tensors to perturb
        h: Finite-difference step
        max_coords: Check at most this many random coordinates per tensor (None = all)
        seed: Coordinate sampling seed
        atol: Coordinates where both gradients are below this are skipped

    Returns:
        Max over checked coordinates of |analytic − cd| / max(|analytic|, |cd|, 1e-8)
    """
    for p in params:
        p.zero_grad()
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, grad in zip(params, analytic):
        coords = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            coords = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        flat = p.data.reshape(-1)
        for i in coords:
            original = flat[i]
            flat[i] = original + h
            plus = f().item()
            flat[i] = original - h
            minus = f().item()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * h)
            exact = grad.reshape(-1)[i]
            if max(abs(exact), abs(numeric)) < atol:
                continue
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
            worst = max(worst, error)
    for p in params:
        p.zero_grad()
    return worst


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Adam moments plus hyperparameters; weight decay is decoupled."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


@dataclass
class AdadeltaState:
    lr: float = 1.0
    rho: float = 0.95
    eps: float = 1e-6
    weight_decay: float = 0.0
    step: int = 0
    square_avg: List[np.ndarray] = field(default_factory=list)
    acc_delta: List[np.ndarray] = field(default_factory=list)


def _checked_grads(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]]) -> List[np.ndarray]:
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    checked = []
    for p, g in zip(params, grads):
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=DTYPE)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        checked.append(g)
    return checked


def _init_slots(slots: List[np.ndarray], params: Sequence[Tensor]) -> None:
    if not slots:
        slots.extend(np.zeros_like(p.data) for p in params)
    elif any(s.shape != p.shape for s, p in zip(slots, params)) or len(slots) != len(params):
        raise ValueError("optimizer state does not match parameter shapes")


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied in place."""
    grads = _checked_grads(params, grads)
    _init_slots(state.m, params)
    _init_slots(state.v, params)
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        p.data -= state.lr * (update + state.weight_decay * p.data)
    return state


def adadelta_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdadeltaState) -> AdadeltaState:
    grads = _checked_grads(params, grads)
    _init_slots(state.square_avg, params)
    _init_slots(state.acc_delta, params)
    state.step += 1
    for p, g, sq, acc in zip(params, grads, state.square_avg, state.acc_delta):
        sq *= state.rho
        sq += (1.0 - state.rho) * g * g
        delta = np.sqrt(acc + state.eps) / np.sqrt(sq + state.eps) * g
        acc *= state.rho
        acc += (1.0 - state.rho) * delta * delta
        p.data -= state.lr * (delta + state.weight_decay * p.data)
    return state


def make_optimizer(name: str, lr: float, weight_decay: float, beta1: float = 0.9, beta2: float = 0.999):
    if name == "adam":
        return AdamState(lr=lr, beta1=beta1, beta2=beta2, weight_decay=weight_decay)
    if name == "adadelta":
        return AdadeltaState(lr=lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer: {name}")


def optimizer_step(params: Sequence[Tensor], state) -> None:
    """Apply the optimizer held in `state` using each parameter's accumulated grad."""
    grads = [p.grad for p in params]
    if isinstance(state, AdamState):
        adam_step(params, grads, state)
    else:
        adadelta_step(params, grads, state)
    for p in params:
        p.zero_grad()


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
