"""Dense float tensors with reverse-mode automatic differentiation.

A deliberately small engine: every op the ViT needs, nothing more.  Arrays are
numpy-backed; float32 by default, float64 is preserved when passed in (the
finite-difference checks run the same graph in 64-bit).

Broadcasting is limited to the two patterns the model uses: a right operand
whose shape equals the trailing dims of the left operand (bias add, masks,
positional embeddings), and a 2-D right operand in ``matmul``.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference, teacher passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, (np.ndarray, np.generic)) and dtype is None:
        # numpy scalars (0-d reductions times a python float) keep their dtype too
        if data.dtype in (np.float32, np.float64):
            return np.asarray(data)
        return np.asarray(data, dtype=DEFAULT_DTYPE)
    return np.asarray(data, dtype=dtype or DEFAULT_DTYPE)


class Tensor:
    """An n-d array node in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

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
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, (1, 0))

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def backward(self) -> None:
        backward(self)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
        out.op = op
    return out


def _check_trailing(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not trailing-compatible")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if b.data.ndim == 0 or a.data.ndim == 0:
        if a.data.ndim == 0:
            a, b = b, a

        def fn(g):
            return g, np.asarray(g.sum(), dtype=g.dtype)

        return _make(a.data + b.data, (a, b), fn, "add")
    _check_trailing(a.data, b.data, "add")
    sb = b.shape

    def fn(g):
        return g, _reduce_to(g, sb)

    return _make(a.data + b.data, (a, b), fn, "add")


def sub(a, b) -> Tensor:
    return add(a, mul(_wrap(b), -1.0))


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a python scalar or trailing-shaped."""
    a = _wrap(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        s = b

        def fn(g):
            return (g * s,)

        return _make(a.data * s, (a,), fn, "scale")
    b = _wrap(b)
    _check_trailing(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    sb = b.shape

    def fn(g):
        ga = g * bd if a.requires_grad else None
        gb = _reduce_to(g * ad, sb) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), fn, "mul")


def gelu(x: Tensor) -> Tensor:
    """Exact erf-based GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    out = (xd * cdf).astype(xd.dtype, copy=False)

    def fn(g):
        pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
        return ((g * (cdf + xd * pdf)).astype(xd.dtype, copy=False),)

    return _make(out, (x,), fn, "gelu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def fn(g):
        return (g * out,)

    return _make(out, (x,), fn, "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data

    def fn(g):
        return (g / xd,)

    return _make(np.log(xd), (x,), fn, "log")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def fn(g):
        return (g.reshape(src),)

    return _make(x.data.reshape(shape), (x,), fn, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def fn(g):
        return (g.transpose(inv),)

    return _make(x.data.transpose(axes), (x,), fn, "transpose")


def getitem(x: Tensor, index) -> Tensor:
    src_shape, dt = x.shape, x.dtype

    def fn(g):
        full = np.zeros(src_shape, dtype=dt)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.ascontiguousarray(x.data[index]), (x,), fn, "getitem")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(_wrap(x) for x in xs)
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        out = []
        for i in range(len(xs)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return out

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, fn, "concat")


def broadcast_leading(x: Tensor, lead: tuple[int, ...]) -> Tensor:
    """Repeat ``x`` over new leading batch dims."""
    shape = tuple(lead) + x.shape
    nlead = len(lead)

    def fn(g):
        return (g.sum(axis=tuple(range(nlead))),)

    return _make(np.broadcast_to(x.data, shape).copy(), (x,), fn, "broadcast")


# ---------------------------------------------------------------------------
# reductions and products
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis=None) -> Tensor:
    src = x.shape

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, src).astype(x.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).astype(x.dtype),)

    return _make(np.asarray(x.data.sum(axis=axis), dtype=x.dtype), (x,), fn, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[..., k, n]`` with equal batch dims, or ``b`` 2-D."""
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {ad.shape} @ {bd.shape}")
    if bd.ndim != 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError(f"matmul batch dims differ: {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), fn, "matmul")


# ---------------------------------------------------------------------------
# normalisations and losses
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), fn, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def fn(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), fn, "log_softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6,
              mask: np.ndarray | None = None) -> Tensor:
    """LayerNorm over the last axis.

    With ``mask`` (a 0/1 vector over the last axis) statistics are taken over
    the kept channels only and the output is zero on dropped channels, which
    makes the result identical to a layernorm over the kept sub-vector.
    """
    xd, gd, bd = x.data, gamma.data, beta.data
    if mask is None:
        n = xd.shape[-1]
        mu = xd.mean(axis=-1, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        m = None
    else:
        m = mask.astype(xd.dtype)
        n = float(m.sum())
        mu = (xd * m).sum(axis=-1, keepdims=True) / n
        xc = (xd - mu) * m
        var = (xc * xc).sum(axis=-1, keepdims=True) / n
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gd + bd
    if m is not None:
        out = out * m

    def fn(g):
        if m is not None:
            g = g * m
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx_hat = g * gd
        if m is not None:
            gx_hat = gx_hat * m
        gx = (rstd / n) * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                           - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        if m is not None:
            gx = gx * m
        return gx.astype(xd.dtype, copy=False), ggamma, gbeta

    return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), fn, "layernorm")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    lsm = log_softmax(logits, axis=-1)
    onehot = np.zeros((b, c), dtype=logits.dtype)
    onehot[np.arange(b), labels] = -1.0 / b
    return tsum(mul(lsm, Tensor(onehot)))


def kl_div(log_q: Tensor, p: Tensor) -> Tensor:
    """Batch-mean KL(p || q) = sum p * (log p - log q).

    ``log_q`` holds log-probabilities of the distribution being fitted and
    ``p`` the target probabilities; zero target entries contribute zero.
    The value is clamped at zero, the gradient is not.
    """
    p = _wrap(p)
    pd, lq = p.data, log_q.data
    b = pd.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.where(pd > 0, np.log(np.where(pd > 0, pd, 1.0)), 0.0)
    # exact KL is >= 0; clamp away rounding residue when p == q
    val = np.asarray(max(float((pd * (logp - lq)).sum(dtype=np.float64)) / b, 0.0), dtype=lq.dtype)

    def fn(g):
        gq = -g * pd / b if log_q.requires_grad else None
        gp = g * (logp - lq + 1.0) / b if p.requires_grad else None
        return gq, gp

    return _make(val, (log_q, p), fn, "kl_div")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that requires grad; accumulates."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                g = g.reshape(node.shape).astype(node.dtype, copy=False)
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def numeric_grad(f: Callable[[], Tensor], x: Tensor, index, eps: float = 1e-3) -> float:
    """Central difference of scalar ``f()`` w.r.t. ``x.data[index]``, in 64-bit."""
    orig = x.data[index].copy()
    x.data[index] = orig + eps
    fp = np.float64(f().data)
    x.data[index] = orig - eps
    fm = np.float64(f().data)
    x.data[index] = orig
    return float((fp - fm) / (2.0 * eps))


def gradcheck(f: Callable[[], Tensor], params: Sequence[Tensor], probes: int = 100,
              eps: float = 1e-3, rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Probes ``probes`` random coordinates spread over ``params``.  Parameters
    should hold float64 data so the oracle accumulates in 64-bit.  Relative
    error is ``|a - n| / max(|a|, |n|, 1e-3)``; the floor keeps vanishing
    gradients from turning rounding noise into huge ratios.
    """
    rng = rng or np.random.default_rng(0)
    zero_grad(params)
    loss = f()
    backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    sizes = np.array([p.data.size for p in params], dtype=np.float64)
    worst = 0.0
    for _ in range(probes):
        i = int(rng.choice(len(params), p=sizes / sizes.sum()))
        flat = int(rng.integers(params[i].data.size))
        idx = np.unravel_index(flat, params[i].shape)
        a = float(analytic[i][idx])
        n = numeric_grad(f, params[i], idx, eps)
        worst = max(worst, abs(a - n) / max(abs(a), abs(n), 1e-3))
    return worst
