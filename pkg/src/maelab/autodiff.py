"""Minimal reverse-mode automatic differentiation on numpy arrays.

Every differentiable primitive records a closure that maps the output
gradient to input gradients. ``Tensor.backward`` walks the recorded graph
in reverse topological order exactly once per node.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True
_FLOPS: list[list[int]] = []

PRIMITIVES = frozenset(
    {
        "add", "sub", "mul", "div", "neg", "pow", "exp", "log", "matmul",
        "reshape", "transpose", "getitem", "gather", "scatter", "concat",
        "sum", "mean", "layer_norm", "gelu", "softmax", "sigmoid", "relu",
        "mask_mul", "masked_mse", "bce_with_logits",
    }
)


def op_catalogue() -> frozenset:
    """Names of the differentiable primitives provided by this module."""
    return PRIMITIVES


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def count_flops():
    """Count multiply-accumulates performed by ``matmul`` inside the block.

    Yields a one-element list whose entry holds the running count.
    """
    counter = [0]
    _FLOPS.append(counter)
    try:
        yield counter
    finally:
        _FLOPS.remove(counter)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- metadata -----------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph --------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients into every reachable tensor that needs one.

        Without an explicit ``grad`` the tensor must hold a single element.
        Intermediate tensors also receive ``.grad`` so that activations can be
        inspected (Grad-CAM reads them).
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -----------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _topo_order(root: Tensor) -> list[Tensor]:
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
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        return Tensor(np.asarray(x, dtype=np.float64))
    return Tensor(np.asarray(x, dtype=dtype))


def _const_like(x, ref: Tensor) -> Tensor:
    # python scalars adopt the dtype of the tensor they meet
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# -- elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    return _make(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add",
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    return _make(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    return _make(
        a.data * b.data, (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _make(
        out, (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
        "div",
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def mask_mul(a: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant (non-differentiable) mask, e.g. a dropout mask."""
    mask = np.asarray(mask, dtype=a.dtype)
    try:
        np.broadcast_shapes(a.shape, mask.shape)
    except ValueError:
        raise ValueError(f"mask_mul: shape mismatch {a.shape} vs {mask.shape}") from None
    return _make(a.data * mask, (a,), lambda g: (_unbroadcast(g * mask, a.shape),), "mask_mul")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _const_like(b, a)
    b = as_tensor(b)
    return _const_like(a, b), b


# -- linear algebra / shape ------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    out = a.data @ b.data
    if _FLOPS:
        macs = out.size * a.shape[-1]
        for c in _FLOPS:
            c[0] += macs
    return _make(out, (a, b), backward, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ValueError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data.astype(np.intp)
    basic = all(
        isinstance(i, (int, slice, type(None))) or i is Ellipsis
        for i in (index if isinstance(index, tuple) else (index,))
    )

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), backward, "getitem")


def gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows per batch: ``x[b, idx[b, k], :]`` for x of shape [B, N, D]."""
    idx = np.asarray(idx, dtype=np.intp)
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ValueError(f"gather: shape mismatch {x.shape} vs index {idx.shape}")
    rows = np.arange(x.shape[0])[:, None]

    def backward(g):
        full = np.zeros_like(x.data)
        # indices are unique per row, plain assignment is exact
        full[rows, idx] = g
        return (full,)

    return _make(x.data[rows, idx], (x,), backward, "gather")


def scatter(x: Tensor, idx: np.ndarray, n: int) -> Tensor:
    """Place rows of x [B, K, D] at positions idx [B, K] of a zero [B, n, D] tensor."""
    idx = np.asarray(idx, dtype=np.intp)
    if x.ndim != 3 or idx.shape != x.shape[:2]:
        raise ValueError(f"scatter: shape mismatch {x.shape} vs index {idx.shape}")
    rows = np.arange(x.shape[0])[:, None]
    out = np.zeros((x.shape[0], n, x.shape[2]), dtype=x.dtype)
    out[rows, idx] = x.data
    return _make(out, (x,), lambda g: (g[rows, idx],), "scatter")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ValueError(f"concat: shape mismatch {shapes} along axis {axis}") from None
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


# -- reductions -----------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    return _make(
        np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,),
        lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)),), "sum",
    )


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size // max(out.size, 1)
    return _make(
        out, (a,),
        lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / count,), "mean",
    )


# -- nonlinearities -------------------------------------------------------------

def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``0.5 x (1 + erf(x / sqrt 2))``."""
    d = x.data
    cdf = 0.5 * (1.0 + erf(d / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * d * d) / math.sqrt(2.0 * math.pi)
    return _make((d * cdf).astype(d.dtype), (x,), lambda g: ((g * (cdf + d * pdf)).astype(d.dtype),), "gelu")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale by gamma and shift by beta."""
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: shape mismatch {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    red = tuple(range(x.ndim - 1))

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gb = g.sum(axis=red) if beta.requires_grad else None
        return gx, gg, gb

    return _make(out.astype(x.dtype), (x, gamma, beta), backward, "layer_norm")


# -- losses ---------------------------------------------------------------------

def masked_mse(pred: Tensor, target: np.ndarray, mask_idx: np.ndarray) -> Tensor:
    """Mean squared error over the rows ``mask_idx`` [B, K] of pred/target [B, N, D]."""
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ValueError(f"masked_mse: shape mismatch {pred.shape} vs {target.shape}")
    mask_idx = np.asarray(mask_idx, dtype=np.intp)
    rows = np.arange(pred.shape[0])[:, None]
    diff = pred.data[rows, mask_idx] - target[rows, mask_idx]
    count = diff.size
    loss = np.asarray((diff * diff).sum() / count, dtype=pred.dtype)

    def backward(g):
        full = np.zeros_like(pred.data)
        full[rows, mask_idx] = (2.0 / count) * diff * g
        return (full,)

    return _make(loss, (pred,), backward, "masked_mse")


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Binary cross-entropy averaged over every element, computed from logits."""
    y = np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ValueError(f"bce_with_logits: shape mismatch {logits.shape} vs {y.shape}")
    z = logits.data
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    p = _stable_sigmoid(z)
    n = z.size
    return _make(
        np.asarray(loss.mean(), dtype=z.dtype), (logits,),
        lambda g: ((p - y) * (g / n),), "bce_with_logits",
    )


# -- checking -------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, coords: Iterable[int] | None = None) -> float:
    """Relative error between analytic and central-difference gradients.

    ``f`` maps a tensor to a single-element tensor. The error is taken
    norm-wise, ``||a - n|| / max(||a||, ||n||)``, over the probed coordinates
    (all flat indices unless ``coords`` is given), and is 0 when both
    gradients vanish. A per-coordinate ratio would instead report finite-
    difference rounding noise on coordinates whose true gradient is ~0.

    The analytic gradient is taken in the input's own dtype. The central
    differences are always evaluated at float64 so that a float32 gradient is
    compared against a reference that is not itself dominated by rounding.
    """
    if h <= 0:
        raise ValueError("grad_check: h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x)
    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    if out.size != 1:
        raise ValueError(f"grad_check: f must return a scalar, got shape {out.shape}")
    if not out.requires_grad:
        analytic = np.zeros_like(base)
    else:
        out.backward()
        analytic = xt.grad if xt.grad is not None else np.zeros_like(base)
    analytic = analytic.reshape(-1).astype(np.float64)
    flat = base.astype(np.float64).reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(list(coords), dtype=np.intp)
    numeric = np.empty(idx.size)
    with no_grad():
        for j, i in enumerate(idx):
            plus = flat.copy()
            minus = flat.copy()
            plus[i] += h
            minus[i] -= h
            fp = float(f(Tensor(plus.reshape(base.shape))).data)
            fm = float(f(Tensor(minus.reshape(base.shape))).data)
            numeric[j] = (fp - fm) / (2 * h)
    a = analytic[idx]
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(numeric)))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - numeric)) / denom
