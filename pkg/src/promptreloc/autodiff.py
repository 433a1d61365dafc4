"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Every operation on a :class:`Tensor` records its parents and a closure that
maps the output gradient to parent gradients.  Calling :func:`backward` on a
scalar root replays that record in reverse topological order.  The record is
consumed by the replay; a second :func:`backward` on the same root raises
:class:`StaleTapeError`.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ContractError", "StaleTapeError", "Tensor", "Tape", "tensor", "constant",
    "no_grad", "forward_scalar", "backward", "concat", "take", "softmax",
    "log_softmax", "layer_norm", "gelu", "cross_entropy", "minimum", "SgdConfig",
    "SGD", "Adam",
]


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class StaleTapeError(RuntimeError):
    """backward() was called on a graph whose tape was already replayed."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording; results carry no parents."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out axes that numpy broadcasting expanded
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_spent", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self._spent = False
        self.name = name

    # -- bookkeeping -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.ravel()

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        other = _lift(other)
        a, b = self, other
        return _make(a.data + b.data, (a, b), "add",
                     lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                                _unbroadcast(g, b.shape) if b.requires_grad else None))

    __radd__ = __add__

    def __neg__(self):
        return _make(-self.data, (self,), "neg", lambda g: (-g,))

    def __sub__(self, other):
        return self + (-_lift(other))

    def __rsub__(self, other):
        return _lift(other) + (-self)

    def __mul__(self, other):
        other = _lift(other)
        a, b = self, other
        return _make(a.data * b.data, (a, b), "mul",
                     lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by constants")
        return self * (1.0 / float(other))

    def __matmul__(self, other):
        other = _lift(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise ContractError("matmul operands must be at least 2-D")

        def back(g):
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
            return ga, gb

        return _make(a.data @ b.data, (a, b), "matmul", back)

    # -- shape ops -----------------------------------------------------
    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        return _make(np.transpose(self.data, axes), (self,), "transpose",
                     lambda g: (np.transpose(g, inv),))

    @property
    def T(self):
        return self.transpose()

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _make(self.data.reshape(shape), (self,), "reshape", lambda g: (g.reshape(old),))

    def __getitem__(self, idx):
        old = self.shape

        basic = _is_basic_index(idx)

        def back(g):
            out = np.zeros(old)
            if basic:
                out[idx] = g
            else:
                np.add.at(out, idx, g)
            return (out,)

        return _make(self.data[idx], (self,), "getitem", back)

    # -- reductions ----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        old = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, old).copy(),)

        return _make(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum", back)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- elementwise ---------------------------------------------------
    def tanh(self):
        out = np.tanh(self.data)
        return _make(out, (self,), "tanh", lambda g: (g * (1.0 - out * out),))

    def exp(self):
        out = np.exp(self.data)
        return _make(out, (self,), "exp", lambda g: (g * out,))

    def log(self):
        x = self.data
        return _make(np.log(x), (self,), "log", lambda g: (g / x,))

    def clip(self, lo: float, hi: float):
        x = self.data
        inside = (x >= lo) & (x <= hi)
        return _make(np.clip(x, lo, hi), (self,), "clip", lambda g: (g * inside,))

    def softmax(self, axis: int = -1):
        return softmax(self, axis)

    def gelu(self):
        return gelu(self)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice)) or i is Ellipsis or i is None for i in items)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, op, back) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = back
        out.op = op
    return out


def tensor(data, requires_grad: bool = False, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


# ---------------------------------------------------------------------------
# primitives that need more than one line
# ---------------------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat", back)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Slice ``x`` along one axis by an index list (gather)."""
    indices = np.asarray(indices, dtype=np.int64)
    old = x.shape

    def back(g):
        out = np.zeros(old)
        sl = [slice(None)] * len(old)
        sl[axis] = indices
        np.add.at(out, tuple(sl), g)
        return (out,)

    return _make(np.take(x.data, indices, axis=axis), (x,), "take", back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), "softmax", back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def back(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), "log_softmax", back)


def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis (no affine parameters)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (x,), "layer_norm", back)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    v = x.data
    v2 = v * v
    u = _GELU_C * v * (1.0 + 0.044715 * v2)
    t = np.tanh(u)
    out = 0.5 * v * (1.0 + t)

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du),)

    return _make(out, (x,), "gelu", back)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (B, C) against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ContractError(f"cross_entropy wants (B,C) logits and (B,) labels, got {logits.shape}, {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    b = labels.shape[0]
    loss = -logp[np.arange(b), labels].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        return (g * p / b,)

    return _make(np.asarray(loss), (logits,), "cross_entropy", back)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    pick_a = a.data <= b.data

    def back(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _make(np.minimum(a.data, b.data), (a, b), "minimum", back)


# ---------------------------------------------------------------------------
# tape replay
# ---------------------------------------------------------------------------

class Tape:
    """Nodes reachable from a root, in reverse topological order."""

    def __init__(self, root: Tensor):
        self.root = root
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.nodes = order[::-1]

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self) -> dict[Tensor, np.ndarray]:
        root = self.root
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        leaves: dict[Tensor, np.ndarray] = {}
        for node in self.nodes:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    leaves[node] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            # free the closure; the tape is single-use
            node._backward = None
            node._parents = ()
            node._spent = True
        return leaves


def forward_scalar(root: Tensor) -> float:
    """Return the value of a scalar graph root, keeping its tape for backward."""
    if not isinstance(root, Tensor):
        raise ContractError("forward_scalar expects a Tensor")
    if root.data.size != 1:
        raise ContractError(f"root must be scalar, got shape {root.shape}")
    return float(root.data.reshape(()))


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar root.

    Every reachable leaf with ``requires_grad`` gets ``leaf.grad`` set to
    d(root)/d(leaf); the same arrays are returned keyed by leaf.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if root._spent:
        raise StaleTapeError("tape already replayed; run the forward pass again")
    if root.is_leaf:
        root._spent = True
        if root.requires_grad:
            root.grad = np.ones_like(root.data)
            return {root: root.grad}
        return {}
    leaves = Tape(root).replay()
    for leaf, g in leaves.items():
        leaf.grad = g
    root._spent = True
    return leaves


# ---------------------------------------------------------------------------
# optimisers
# ---------------------------------------------------------------------------

class SgdConfig:
    __slots__ = ("learning_rate", "momentum", "weight_decay")

    def __init__(self, learning_rate: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if not learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ContractError("momentum must lie in [0, 1)")
        if weight_decay < 0:
            raise ContractError("weight_decay must be nonnegative")
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)

    def __repr__(self) -> str:
        return (f"SgdConfig(learning_rate={self.learning_rate}, momentum={self.momentum}, "
                f"weight_decay={self.weight_decay})")


class SGD:
    """p <- p - lr * (buf + wd * p), buf <- momentum * buf + g.

    Momentum buffers live on the optimiser and persist across steps.
    """

    def __init__(self, params: Iterable[Tensor], cfg: SgdConfig):
        self.params = list(params)
        self.cfg = cfg
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: dict[Tensor, np.ndarray] | None = None) -> None:
        cfg = self.cfg
        for i, p in enumerate(self.params):
            g = p.grad if grads is None else grads.get(p)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ContractError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            buf = self.buffers[i]
            buf *= cfg.momentum
            buf += g
            p.data -= cfg.learning_rate * (buf + cfg.weight_decay * p.data)

    def reset_rows(self, param: Tensor, rows) -> None:
        """Zero the momentum of selected rows of one parameter."""
        for i, p in enumerate(self.params):
            if p is param:
                self.buffers[i][rows] = 0.0
                return
        raise ContractError("parameter is not managed by this optimiser")


def sgd_step(params: Sequence[Tensor], grads: dict[Tensor, np.ndarray], cfg: SgdConfig,
             state: dict | None = None) -> dict:
    """Functional SGD step; ``state`` carries momentum buffers between calls."""
    state = {} if state is None else state
    for p in params:
        g = grads.get(p)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        buf = state.get(id(p))
        buf = g.copy() if buf is None else cfg.momentum * buf + g
        state[id(p)] = buf
        p.data -= cfg.learning_rate * (buf + cfg.weight_decay * p.data)
    return state


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        a = self.lr / (1.0 - self.b1 ** self.t)
        c2 = 1.0 / (1.0 - self.b2 ** self.t)
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * (g * g)
            p.data -= a * m / (np.sqrt(v * c2) + self.eps)
