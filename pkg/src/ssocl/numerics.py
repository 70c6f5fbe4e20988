"""Small reverse-mode autodiff engine over numpy arrays, plus Adam.

Every primitive records its parents and a pure backward function that maps the
upstream gradient to one gradient per parent.  ``backward`` walks the recorded
graph in reverse topological order and accumulates gradients additively, so
fan-out is handled without special cases.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, NumericalError

DTYPE = np.float64

# op names whose backward pass is deliberately sign-flipped (gradcheck fault injection)
_FAULTS: set[str] = set()


def set_default_dtype(dtype) -> None:
    """Switch between float64 (default, used for gradient checks) and float32."""
    global DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype}")
    DTYPE = dtype.type


@contextlib.contextmanager
def inject_sign_fault(op: str):
    _FAULTS.add(op)
    try:
        yield
    finally:
        _FAULTS.discard(op)


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "op", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward_fn=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op})"

    def __len__(self):
        return len(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op) -> Tensor:
    data = np.asarray(data, dtype=DTYPE)
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by {op}")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def back(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), back, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data ** exponent, (a,),
                 lambda g: (g * exponent * a.data ** (exponent - 1),), "power")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)  # non-finite results are rejected by _make
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), back, "matmul")


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), back, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    if isinstance(idx, np.ndarray) and idx.dtype == bool:
        idx = np.nonzero(idx)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), back, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    """Max-shifted log-sum-exp along ``axis``."""
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = e / s

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (a,), back, "logsumexp")


def conv1d(x, w, b=None, padding: str = "same") -> Tensor:
    """Stride-1 convolution. x: (B, C, L), w: (F, C, k), b: (F,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ContractError(f"conv1d shape mismatch: input {x.shape}, weight {w.shape}")
    k = w.shape[2]
    if padding == "same":
        left = (k - 1) // 2
        pads = (left, k - 1 - left)
    elif padding == "valid":
        pads = (0, 0)
    else:
        raise ContractError(f"unknown padding {padding!r}")
    xp = np.pad(x.data, ((0, 0), (0, 0), pads))
    if xp.shape[2] < k:
        raise ContractError("conv1d kernel longer than padded input")
    cols = sliding_window_view(xp, k, axis=2)  # (B, C, Lout, k)
    out = np.einsum("bclk,fck->bfl", cols, w.data, optimize=True)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None]
        parents = (x, w, b)
    lout = out.shape[2]

    def back(g):
        gw = np.einsum("bfl,bclk->fck", g, cols, optimize=True)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, j:j + lout] += np.einsum("bfl,fc->bcl", g, w.data[:, :, j], optimize=True)
        gx = gxp[:, :, pads[0]:gxp.shape[2] - pads[1]]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return _make(out, parents, back, "conv1d")


def maxpool1d(x, kernel: int = 4, stride: int = 4) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[2] < kernel:
        raise ContractError(f"maxpool1d needs (B, C, L>={kernel}) input, got {x.shape}")
    win = sliding_window_view(x.data, kernel, axis=2)[:, :, ::stride]  # (B, C, Lout, k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    pos = np.arange(out.shape[2])[None, None, :] * stride + arg

    def back(g):
        gx = np.zeros_like(x.data)
        bi, ci, _ = np.indices(pos.shape)
        np.add.at(gx, (bi, ci, pos), g)
        return (gx,)

    return _make(out, (x,), back, "maxpool1d")


# ---------------------------------------------------------------- composites

def softmax(a, axis=-1) -> Tensor:
    return exp(a - logsumexp(a, axis=axis, keepdims=True))


def log_softmax(a, axis=-1) -> Tensor:
    return a - logsumexp(a, axis=axis, keepdims=True)


def l2_normalize(a, axis=-1, eps: float = 1e-12) -> Tensor:
    return a / sqrt(tsum(a * a, axis=axis, keepdims=True) + eps)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=int)
    lp = log_softmax(logits, axis=1)
    return -mean(lp[np.arange(len(labels)), labels])


# ---------------------------------------------------------------- reverse sweep

@dataclass
class Tape:
    """Nodes reachable from a root, in topological order (inputs first)."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)


def backward(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Exact gradients of scalar ``loss`` w.r.t. ``params`` (zeros if unreachable)."""
    params = list(params)
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        tape = Tape.from_root(loss)
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(tape.nodes):
            g = grads.get(id(node))
            if g is None or node.backward_fn is None:
                continue
            pgrads = node.backward_fn(g)
            if node.op in _FAULTS:
                pgrads = tuple(-pg for pg in pgrads)
            for p, pg in zip(node.parents, pgrads):
                if not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
    out = []
    for p in params:
        g = grads.get(id(p))
        out.append(np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.data.dtype).reshape(p.shape))
    return out


def finite_difference_gradient(fn: Callable[[], float], params: Sequence[Tensor], h: float = 1e-6) -> list[np.ndarray]:
    """Central-difference gradient of the zero-argument scalar ``fn``.

    ``fn`` must read the current values of ``params``; each coordinate is
    perturbed in place and restored.
    """
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        flat, gflat = p.data.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn())
            flat[i] = orig - h
            fm = float(fn())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> float:
    """Norm-wise relative error; zero when both sides are numerically zero."""
    num = float(np.linalg.norm(a - b))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    if den < floor:
        return num
    return num / den


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decoupled: bool = True
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> AdamState:
    """Update ``params`` in place with one bias-corrected Adam step."""
    if len(params) != len(grads):
        raise ContractError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ContractError("optimizer state does not match parameter list")
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape or m.shape != p.shape:
            raise ContractError(f"shape mismatch in adam_step: param {p.shape}, grad {g.shape}")
        if state.weight_decay and not state.decoupled:
            g = g + state.weight_decay * p.data
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and state.decoupled:
            p.data -= state.lr * state.weight_decay * p.data
        p.data -= state.lr * update
    return state


class Adam:
    """Thin stateful wrapper binding an ``AdamState`` to a parameter list."""

    def __init__(self, params, lr=1e-4, weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8, decoupled=True):
        self.params = list(params)
        self.state = AdamState(lr=lr, weight_decay=weight_decay, beta1=betas[0], beta2=betas[1],
                               eps=eps, decoupled=decoupled)

    def step(self, grads):
        adam_step(self.state, self.params, grads)

    def minimize(self, loss: Tensor) -> float:
        self.step(backward(loss, self.params))
        return float(loss.data)
