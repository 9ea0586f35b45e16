"""Dense tensors with reverse-mode differentiation.

Every kernel is a primitive with its own backward rule. Arrays are numpy
buffers (row-major, float32 by default). Broadcasting is limited to
scalar scaling and bias-add along the last axis, so each backward rule
stays easy to audit.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class ContractError(RuntimeError):
    pass


_DTYPE = [np.float32]


def default_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors (used by grad_check)."""
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.array(data, dtype=dtype or default_dtype())
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(kernel, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{kernel}: non-finite values")


def _make(kernel, data, parents, backward):
    _check_finite(kernel, data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = kernel
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _shape_err(kernel, a, b):
    return ShapeError(f"{kernel}: incompatible shapes {tuple(a)} and {tuple(b)}")


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul. Leading dims must match, or ``b`` is a 2-D weight shared across them."""
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2 or A.shape[-1] != B.shape[-2]:
        raise _shape_err("matmul", A.shape, B.shape)
    shared = B.ndim == 2
    if not shared and A.shape[:-2] != B.shape[:-2]:
        raise _shape_err("matmul", A.shape, B.shape)

    def backward(g):
        ga = g @ np.swapaxes(B, -1, -2)
        if shared:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _make("matmul", A @ B, (a, b), backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        if a.data.ndim < 2:
            raise ShapeError(f"transpose: need rank >= 2, got {a.shape}")
        axes = list(range(a.data.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise _shape_err("reshape", old, shape) from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(old),))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; ``b`` may also be a 1-D bias matching the last axis of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if A.shape == B.shape:
        return _make("add", A + B, (a, b), lambda g: (g, g))
    if B.ndim == 1 and A.ndim >= 1 and A.shape[-1] == B.shape[0]:
        return _make("add", A + B, (a, b), lambda g: (g, g.reshape(-1, B.shape[0]).sum(0)))
    raise _shape_err("add", A.shape, B.shape)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if A.shape != B.shape:
        raise _shape_err("multiply", A.shape, B.shape)
    return _make("multiply", A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.data.dtype.type(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    _check_finite("exp", a.data)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax over the last axis."""
    a = as_tensor(a)
    _check_finite("softmax", a.data)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make("softmax", s, (a,), backward)


def log_softmax(a: Tensor) -> Tensor:
    a = as_tensor(a)
    _check_finite("log_softmax", a.data)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", out, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    X = x.data
    d = X.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise _shape_err("layer_norm", X.shape, gain.shape)
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + X.dtype.type(eps))
    xhat = xc * inv
    G = gain.data

    def backward(g):
        gx_hat = g * G
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, d)
        return gx, (flat * xhat.reshape(-1, d)).sum(0), flat.sum(0)

    return _make("layer_norm", xhat * G + bias.data, (x, gain, bias), backward)


def embedding(table: Tensor, ids) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    V = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise ShapeError(f"embedding: id out of range for table of {V} rows")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return _make("embedding", table.data[ids], (table,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -2) -> Tensor:
    """Concatenate along the token axis (second to last by default)."""
    tensors = [as_tensor(t) for t in tensors]
    arrs = [t.data for t in tensors]
    nd = arrs[0].ndim
    ax = axis % nd
    for t in arrs[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != arrs[0].shape[:ax] + arrs[0].shape[ax + 1:]:
            raise _shape_err("concat", arrs[0].shape, t.shape)
    splits = np.cumsum([a.shape[ax] for a in arrs])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make("concat", np.concatenate(arrs, axis=ax), tensors, backward)


def take(a: Tensor, index, axis: int) -> Tensor:
    """Gather along one axis with an integer index array (slicing included)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    ax = axis % a.data.ndim

    def backward(g):
        ga = np.zeros_like(a.data)
        idx = [slice(None)] * a.data.ndim
        idx[ax] = index
        np.add.at(ga, tuple(idx), g)
        return (ga,)

    return _make("take", np.take(a.data, index, axis=ax), (a,), backward)


def masked_fill(a: Tensor, mask, value: float) -> Tensor:
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        try:
            mask = np.broadcast_to(mask, a.shape)
        except ValueError:
            raise _shape_err("masked_fill", a.shape, mask.shape) from None
    out = np.where(mask, a.data.dtype.type(value), a.data)
    return _make("masked_fill", out, (a,), lambda g: (np.where(mask, 0, g).astype(g.dtype),))


def where(mask, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where mask is set, ``b`` elsewhere; values are copied bit-exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_err("where", a.shape, b.shape)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    zero = a.data.dtype.type(0)

    def backward(g):
        return np.where(mask, g, zero), np.where(mask, zero, g)

    return _make("where", np.where(mask, a.data, b.data), (a, b), backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape
    if axis is None:
        n = a.data.size

        def backward(g):
            return (np.full(shape, g / n, dtype=a.data.dtype),)

        return _make("mean", np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), backward)
    ax = axis % a.data.ndim
    n = shape[ax]

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, ax) / n, shape).copy(),)

    return _make("mean", a.data.mean(axis=ax), (a,), backward)


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape
    if axis is None:
        return _make("sum", np.asarray(a.data.sum(), dtype=a.data.dtype), (a,),
                     lambda g: (np.full(shape, g, dtype=a.data.dtype),))
    ax = axis % a.data.ndim
    return _make("sum", a.data.sum(axis=ax), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def silu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return mul(a, sigmoid(a))


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Token-wise cross-entropy of ``logits`` (N, V) against integer targets.

    Without weights the result is the mean over tokens. With weights it is
    ``sum(w_i * nll_i)``; weights must be non-negative, and a zero weight
    removes a position (padding, prompt tokens).
    """
    logits = as_tensor(logits)
    L = logits.data
    targets = np.asarray(targets, dtype=np.int64)
    if L.ndim != 2 or targets.shape != (L.shape[0],):
        raise _shape_err("cross_entropy", L.shape, targets.shape)
    _check_finite("cross_entropy", L)
    N, V = L.shape
    if weights is None:
        w = np.full(N, 1.0 / max(N, 1), dtype=L.dtype)
    else:
        w = np.asarray(weights, dtype=L.dtype)
        if w.shape != (N,):
            raise _shape_err("cross_entropy", L.shape, w.shape)
        if np.any(w < 0):
            raise ContractError("cross_entropy: weights must be non-negative")
    live = w != 0
    if np.any(targets[live] < 0) or np.any(targets[live] >= V):
        raise ShapeError(f"cross_entropy: target out of range for vocab {V}")
    tgt = np.where(live, targets, 0)
    z = L - L.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    nll = -logp[np.arange(N), tgt]
    loss = np.asarray((w * nll).sum(), dtype=L.dtype)

    def backward(g):
        p = np.exp(logp)
        p[np.arange(N), tgt] -= 1
        return ((g * w)[:, None] * p,)

    return _make("cross_entropy", loss, (logits,), backward)


def bce(prob: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy between probabilities and 0/1 labels."""
    prob = as_tensor(prob)
    P = prob.data
    y = np.asarray(labels, dtype=P.dtype)
    if y.shape != P.shape:
        raise _shape_err("binary_cross_entropy", P.shape, y.shape)
    _check_finite("binary_cross_entropy", P)
    eps = 1e-7
    pc = np.clip(P, eps, 1 - eps)
    n = max(P.size, 1)
    loss = -(y * np.log(pc) + (1 - y) * np.log(1 - pc)).sum() / n

    def backward(g):
        inside = (P > eps) & (P < 1 - eps)
        d = (-(y / pc) + (1 - y) / (1 - pc)) / n
        return (g * np.where(inside, d, 0).astype(P.dtype),)

    return _make("binary_cross_entropy", np.asarray(loss, dtype=P.dtype), (prob,), backward)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def build_record(loss: Tensor) -> list[Tensor]:
    """Topologically ordered nodes of ``loss``'s history (inputs before outputs)."""
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, record: list[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    record = build_record(loss) if record is None else record
    grads = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for node in reversed(record):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype).reshape(parent.data.shape)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference check
# ---------------------------------------------------------------------------

def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-3,
               n_samples: int | None = 20, rng=None, dtype=np.float64) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` rebuilds the scalar program from ``params`` on each call. The check
    runs in ``dtype`` (float64 by default) and restores the params afterwards.
    Coordinates are sampled per parameter when ``n_samples`` is set.
    """
    if eps <= 0:
        raise ContractError("grad_check: eps must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    saved = [p.data for p in params]
    try:
        with precision(dtype):
            for p in params:
                p.data = p.data.astype(dtype)
            first, second = fn(), fn()
            if first.data.tobytes() != second.data.tobytes():
                raise ContractError("grad_check: fn is not deterministic")
            zero_grad(params)
            backward(first)
            analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
            worst = 0.0
            for p, ga in zip(params, analytic):
                flat = p.data.reshape(-1)
                coords = np.arange(flat.size)
                if n_samples is not None and flat.size > n_samples:
                    coords = rng.choice(flat.size, n_samples, replace=False)
                for c in coords:
                    orig = flat[c]
                    flat[c] = orig + eps
                    up = float(fn().data)
                    flat[c] = orig - eps
                    down = float(fn().data)
                    flat[c] = orig
                    num = (up - down) / (2 * eps)
                    err = abs(ga.reshape(-1)[c] - num) / (abs(num) + 1e-8)
                    if abs(ga.reshape(-1)[c] - num) < 1e-10:
                        err = 0.0
                    worst = max(worst, err)
            zero_grad(params)
    finally:
        for p, d in zip(params, saved):
            p.data = d
    return worst


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

def _aligned(params, grads):
    if len(params) != len(grads):
        raise ContractError(f"optimizer: {len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if g is not None and np.shape(g) != p.shape:
            raise ContractError(f"optimizer: grad shape {np.shape(g)} != param shape {p.shape}")


def sgd_step(params: Sequence[Tensor], grads, lr: float) -> None:
    if lr <= 0:
        raise ContractError("sgd_step: lr must be positive")
    _aligned(params, grads)
    for p, g in zip(params, grads):
        if p.requires_grad and g is not None:
            p.data = (p.data - p.data.dtype.type(lr) * g).astype(p.data.dtype)


class Adam:
    """Adam with bias correction; holds its own moment state."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ContractError("Adam: lr must be positive")
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads=None) -> None:
        grads = [p.grad for p in self.params] if grads is None else list(grads)
        _aligned(self.params, grads)
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if not p.requires_grad or g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            upd = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = (p.data - upd).astype(p.data.dtype)

    def zero_grad(self) -> None:
        zero_grad(self.params)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
    if total > max_norm > 0:
        f = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * f).astype(p.grad.dtype)
    return total


def linear_decay(lr: float, step: int, total_steps: int) -> float:
    return lr * max(0.0, 1.0 - step / max(total_steps, 1))


def adam_step(params: Sequence[Tensor], grads, lr: float, state: Adam | None = None) -> Adam:
    """Functional form: one Adam update; returns the (possibly new) moment state."""
    state = Adam(params, lr) if state is None else state
    state.lr = lr
    state.step(grads)
    return state
