"""
Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation records its parents and a vector-Jacobian product on the
output node. `Tensor.backward()` gathers the recorded ancestors into a
`Tape` ordered by creation and replays the products in reverse, so each
node is visited exactly once and gradient accumulation order is a pure
function of the order in which the graph was built.
"""
import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from conformer_r.errors import DimensionError, NumericError

# Vector-Jacobian product: upstream gradient -> one gradient (or None) per parent.
VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
Scalar = Union["Tensor", float]

_node_ids = itertools.count()
_grad_mode = threading.local()

MASK64 = (1 << 64) - 1
# Counters reserved for one forward pass by RngState.split().
STREAM_STRIDE = 1 << 16


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Tensor:
    """N-dimensional float64 array participating in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = np.zeros_like(self.data) if requires_grad else None
        self.node_id = next(_node_ids)
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._vjp: Optional[VJP] = None

    # -- properties -------------------------------------------------------

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
    def T(self) -> "Tensor":
        return self.transpose()

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        return make_node(self.data + other.data, (self, other), lambda g: (g, g), "add")

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        return make_node(self.data - other.data, (self, other), lambda g: (g, -g), "sub")

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return make_node(a * b, (self, other), lambda g: (g * b, g * a), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return make_node(a / b, (self, other), lambda g: (g / b, -g * a / (b * b)), "div")

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __neg__(self) -> "Tensor":
        return make_node(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float) -> "Tensor":
        a = self.data
        return make_node(
            a ** exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),), "pow"
        )

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, as_tensor(other))

    # -- reductions and shape ---------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return make_node(self.data.sum(axis=axis, keepdims=keepdims), (self,), vjp, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return make_node(self.data.reshape(shape), (self,), lambda g: (g.reshape(original),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return make_node(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),), "transpose"
        )

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape
        basic = _is_basic_index(index)

        def vjp(g):
            full = np.zeros(shape)
            if basic:
                full[index] += g
            else:
                np.add.at(full, index, g)
            return (full,)

        return make_node(self.data[index], (self,), vjp, "index")

    # -- backward ---------------------------------------------------------

    def backward(self) -> None:
        """Populate `grad` on every requires_grad ancestor of this scalar."""
        if self.data.size != 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {self.shape}")
        tape = Tape.record(self)
        pending: Dict[int, np.ndarray] = {self.node_id: np.ones_like(self.data)}
        for node in tape.reversed():
            g = pending.pop(node.node_id, None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, parent_grad in zip(node._parents, node._vjp(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = unbroadcast(parent_grad, parent.shape)
                if parent.node_id in pending:
                    pending[parent.node_id] = pending[parent.node_id] + parent_grad
                else:
                    pending[parent.node_id] = parent_grad


@dataclass
class Tape:
    """Recorded operations reachable from a root, in creation order."""

    nodes: List[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        seen = {root.node_id: root}
        stack = [root]
        while stack:
            node = stack.pop()
            for parent in node._parents:
                if parent.requires_grad and parent.node_id not in seen:
                    seen[parent.node_id] = parent
                    stack.append(parent)
        # Parents are always created before their children.
        return cls(nodes=[seen[key] for key in sorted(seen)])

    def reversed(self) -> Iterator[Tensor]:
        return reversed(self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass
class RngState:
    """Counter-based random state: every draw is a pure function of (seed, counter)."""

    seed: int
    counter: int = 0

    def generator(self) -> np.random.Generator:
        """Philox stream keyed by (seed, counter); advances the counter by one."""
        key = ((self.seed & MASK64) << 64) | (self.counter & MASK64)
        self.counter += 1
        return np.random.Generator(np.random.Philox(key=key))

    def split(self) -> "RngState":
        """Reserve a block of counters for one forward pass."""
        child = RngState(self.seed, self.counter)
        self.counter += STREAM_STRIDE
        return child

    def copy(self) -> "RngState":
        return RngState(self.seed, self.counter)


# -- graph helpers ------------------------------------------------------------


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def make_node(data: np.ndarray, parents: Tuple[Tensor, ...], vjp: VJP, op: str) -> Tensor:
    """Create an output node; records the graph only when a parent needs gradients."""
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.node_id = next(_node_ids)
    out.op = op
    out.grad = None
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def vjp(g):
        return g @ np.swapaxes(y, -1, -2), np.swapaxes(x, -1, -2) @ g

    return make_node(x @ y, (a, b), vjp, "matmul")


# -- elementwise --------------------------------------------------------------


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    bad = np.argwhere(~(x.data > 0))
    if bad.size:
        raise NumericError(f"log of non-positive value {x.data[tuple(bad[0])]} at index {tuple(bad[0])}")
    a = x.data
    return make_node(np.log(a), (x,), lambda g: (g / a,), "log")


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return make_node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def swish(x: Tensor) -> Tensor:
    a = x.data
    s = _stable_sigmoid(a)
    return make_node(a * s, (x,), lambda g: (g * (s + a * s * (1.0 - s)),), "swish")


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    return make_node(np.where(positive, x.data, 0.0), (x,), lambda g: (g * positive,), "relu")


def elementwise(x: Tensor, fn: str) -> Tensor:
    """Dispatch by name: sigmoid, swish, relu, exp or log."""
    table = {"sigmoid": sigmoid, "swish": swish, "relu": relu, "exp": exp, "log": log}
    if fn not in table:
        raise ValueError(f"unknown elementwise function '{fn}'")
    return table[fn](x)


def _stable_sigmoid(a: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# -- normalization ------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return make_node(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    s = np.exp(out)
    return make_node(out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each vector along the last axis, then apply gamma/beta."""
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    sigma = np.sqrt(a.var(axis=-1, keepdims=True) + eps)
    xhat = (a - mu) / sigma
    gam = gamma.data
    lead = tuple(range(a.ndim - 1))

    def vjp(g):
        dxhat = g * gam
        dx = (dxhat - dxhat.mean(axis=-1, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) / sigma
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_node(xhat * gam + beta.data, (x, gamma, beta), vjp, "layer_norm")


@dataclass
class BatchNormStats:
    """Running statistics used by batch_norm in eval mode."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormStats":
        return cls(np.zeros(channels), np.ones(channels), momentum, eps)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats, train: bool) -> Tensor:
    """Normalize [N x C] over the N axis; train mode updates the running stats."""
    if x.ndim != 2:
        raise DimensionError(f"batch_norm expects [N x C], got {x.shape}")
    if train and x.shape[0] < 1:
        raise DimensionError("batch_norm in train mode needs at least one row")
    a = x.data
    if train:
        mu = a.mean(axis=0)
        var = a.var(axis=0)
        stats.mean = (1.0 - stats.momentum) * stats.mean + stats.momentum * mu
        stats.var = (1.0 - stats.momentum) * stats.var + stats.momentum * var
    else:
        mu, var = stats.mean, stats.var
    sigma = np.sqrt(var + stats.eps)
    xhat = (a - mu) / sigma
    gam = gamma.data

    def vjp(g):
        dxhat = g * gam
        if train:
            dx = (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0)) / sigma
        else:
            dx = dxhat / sigma
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return make_node(xhat * gam + beta.data, (x, gamma, beta), vjp, "batch_norm")


# -- convolution --------------------------------------------------------------


def conv1d_depthwise(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel 'same' convolution of x [T x C] with kernel [K x C], K odd."""
    if kernel.shape[0] % 2 == 0:
        raise DimensionError(f"depthwise kernel size must be odd, got {kernel.shape[0]}")
    if x.ndim != 2 or kernel.ndim != 2 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"depthwise conv channel mismatch: {x.shape} vs kernel {kernel.shape}")
    steps, _ = x.shape
    size = kernel.shape[0]
    pad = size // 2
    padded = np.pad(x.data, ((pad, pad), (0, 0)))
    w = kernel.data
    out = np.zeros_like(x.data)
    for k in range(size):
        out += padded[k:k + steps] * w[k]

    def vjp(g):
        dpadded = np.zeros_like(padded)
        dw = np.zeros_like(w)
        for k in range(size):
            dw[k] = (padded[k:k + steps] * g).sum(axis=0)
            dpadded[k:k + steps] += g * w[k]
        return dpadded[pad:pad + steps], dw

    return make_node(out, (x, kernel), vjp, "conv1d_depthwise")


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation of x [C_in x H x W] with kernels [C_out x C_in x K x K]."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if x.ndim != 3 or kernels.ndim != 4 or kernels.shape[1] != x.shape[0]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernels {kernels.shape}")
    _, height, width = x.shape
    size = kernels.shape[2]
    if height < size or width < size:
        raise DimensionError(f"conv2d input {x.shape} is smaller than kernel {kernels.shape}")
    out_h = (height - size) // stride + 1
    out_w = (width - size) // stride + 1
    a, w = x.data, kernels.data

    def window(i: int, j: int):
        return (slice(None), slice(i, i + stride * (out_h - 1) + 1, stride),
                slice(j, j + stride * (out_w - 1) + 1, stride))

    out = np.zeros((w.shape[0], out_h, out_w))
    for i in range(size):
        for j in range(size):
            out += np.tensordot(w[:, :, i, j], a[window(i, j)], axes=([1], [0]))

    def vjp(g):
        da = np.zeros_like(a)
        dw = np.zeros_like(w)
        for i in range(size):
            for j in range(size):
                dw[:, :, i, j] = np.tensordot(g, a[window(i, j)], axes=([1, 2], [1, 2]))
                da[window(i, j)] += np.tensordot(w[:, :, i, j], g, axes=([0], [0]))
        return da, dw

    return make_node(out, (x, kernels), vjp, "conv2d")


# -- regularization -----------------------------------------------------------


def dropout(x: Tensor, p: float, rng: Optional[RngState], train: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an RngState")
    keep = rng.generator().random(x.shape) >= p
    scale = keep / (1.0 - p)
    return make_node(x.data * scale, (x,), lambda g: (g * scale,), "dropout")


