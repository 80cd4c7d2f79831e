"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires a gradient, so inference code runs on plain numpy speed::

    with Tape() as tape:
        loss = (w * x).sum()
    grads = tape.backward(loss)
    grads[w]
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from ._scan_kernels import scan_bwd, scan_fwd

__all__ = [
    "Tensor",
    "Tape",
    "as_tensor",
    "matmul",
    "causal_conv1d",
    "layer_norm",
    "pointwise",
    "softmax_lastaxis",
    "selective_scan",
    "dropout",
    "concat",
    "stack",
    "gather",
    "where",
    "check_gradients",
    "POINTWISE_KINDS",
]

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """An n-dimensional float64 array that can take part in autodiff."""

    __array_ufunc__ = None
    __slots__ = ("data", "requires_grad", "grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

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

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return _add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, -as_tensor(other))

    def __rsub__(self, other):
        return _add(as_tensor(other), -self)

    def __mul__(self, other):
        return _mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        return _mul(self, other ** -1.0)

    def __rtruediv__(self, other):
        return _mul(as_tensor(other), self ** -1.0)

    def __neg__(self):
        return _unary(self, -self.data, lambda g: -g)

    def __pow__(self, p: float):
        p = float(p)
        x = self.data
        return _unary(self, x ** p, lambda g: g * p * x ** (p - 1.0))

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __getitem__(self, idx):
        return _getitem(self, idx)

    # reductions and shape -------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return _record(out, (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _record(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return _record(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return _record(self.data.swapaxes(a, b), (self,), lambda g: (g.swapaxes(a, b),))

    def expand_dims(self, axis: int) -> "Tensor":
        old = self.shape
        return _record(np.expand_dims(self.data, axis), (self,), lambda g: (g.reshape(old),))

    # elementwise shortcuts ------------------------------------------------
    def exp(self):
        return pointwise(self, "exp")

    def log(self):
        x = self.data
        return _unary(self, np.log(x), lambda g: g / x)

    def sqrt(self):
        y = np.sqrt(self.data)
        return _unary(self, y, lambda g: g * 0.5 / y)

    def abs(self):
        x = self.data
        return _unary(self, np.abs(x), lambda g: g * np.sign(x))

    def relu(self):
        return pointwise(self, "relu")

    def tanh(self):
        return pointwise(self, "tanh")

    def sigmoid(self):
        return pointwise(self, "sigmoid")

    def softplus(self):
        return pointwise(self, "softplus")

    def silu(self):
        return pointwise(self, "silu")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("node_id", "out", "parents", "backward")

    def __init__(self, node_id, out, parents, backward):
        self.node_id = node_id
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Records are appended in execution order, which is a valid topological
    order; :meth:`backward` walks it once in reverse.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, parents: Sequence[Tensor], backward: Callable) -> None:
        out.node_id = len(self.records)
        self.records.append(_Record(out.node_id, out, tuple(parents), backward))

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar ``loss`` with respect to leaf tensors.

        Every ``requires_grad`` leaf reached from ``loss`` gets an entry and its
        ``.grad`` set. Tensors listed in ``params`` that the loss does not
        depend on get a zero gradient.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node_id is None or loss.node_id >= len(self.records) or self.records[loss.node_id].out is not loss:
            raise ValueError("loss was not recorded on this tape")
        acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records[: loss.node_id + 1]):
            g = acc.pop(id(rec.out), None)
            if g is None:
                continue
            pgrads = rec.backward(g)
            for parent, pg in zip(rec.parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.shape)
                key = id(parent)
                if key in acc:
                    acc[key] = acc[key] + pg
                else:
                    acc[key] = np.array(pg, dtype=np.float64, copy=True)
                if parent.node_id is None or self.records[parent.node_id].out is not parent:
                    leaves[key] = parent
        grads: dict[Tensor, np.ndarray] = {}
        for key, leaf in leaves.items():
            leaf.grad = acc[key]
            grads[leaf] = acc[key]
        for p in params or ():
            if p not in grads:
                p.grad = np.zeros_like(p.data)
                grads[p] = p.grad
        return grads


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _record(out: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    t = Tensor(out, requires_grad=needs)
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.record(t, parents, backward)
    return t


def _unary(x: Tensor, out: np.ndarray, dfun: Callable) -> Tensor:
    return _record(out, (x,), lambda g: (dfun(g),))


def _add(a: Tensor, b: Tensor) -> Tensor:
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def _mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def _getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape
    basic = _is_basic_index(idx)

    def back(g):
        full = np.zeros(shape)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _record(x.data[idx], (x,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        if bd.ndim == 2 and ad.ndim > 2:
            # shared weight: fold the batch axes into one GEMM
            k, n = bd.shape
            return g @ bd.T, ad.reshape(-1, k).T @ g.reshape(-1, n)
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _record(ad @ bd, (a, b), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return _record(np.stack([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def gather(x: Tensor, index: np.ndarray, axis: int = -1) -> Tensor:
    """``np.take_along_axis`` with gradient (scatter-add on the way back)."""
    index = np.asarray(index)
    shape = x.shape
    axis = axis % x.ndim

    def back(g):
        full = np.zeros(shape)
        grids = list(np.indices(index.shape, sparse=True))
        grids[axis] = index
        np.add.at(full, tuple(grids), g)
        return (full,)

    return _record(np.take_along_axis(x.data, index, axis=axis), (x,), back)


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    return _record(np.where(cond, a.data, b.data), (a, b),
                   lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


POINTWISE_KINDS = ("relu", "tanh", "sigmoid", "softplus", "silu", "exp")


def pointwise(x: Tensor, kind: str) -> Tensor:
    """Elementwise nonlinearity with its analytic derivative."""
    x = as_tensor(x)
    d = x.data
    if kind == "relu":
        return _unary(x, np.maximum(d, 0.0), lambda g: g * (d > 0))
    if kind == "tanh":
        y = np.tanh(d)
        return _unary(x, y, lambda g: g * (1.0 - y * y))
    if kind == "sigmoid":
        y = _sigmoid(d)
        return _unary(x, y, lambda g: g * y * (1.0 - y))
    if kind == "softplus":
        return _unary(x, np.logaddexp(0.0, d), lambda g: g * _sigmoid(d))
    if kind == "silu":
        s = _sigmoid(d)
        return _unary(x, d * s, lambda g: g * (s + d * s * (1.0 - s)))
    if kind == "exp":
        y = np.exp(d)
        return _unary(x, y, lambda g: g * y)
    raise ValueError(f"unsupported pointwise kind {kind!r}; expected one of {POINTWISE_KINDS}")


def softmax_lastaxis(x: Tensor) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _unary(x, y, lambda g: y * (g - (g * y).sum(axis=-1, keepdims=True)))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def back(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, g * xhat, g

    return _record(xhat * gd + beta.data, (x, gamma, beta), back)


def causal_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Causal convolution along the time axis.

    ``x`` has shape ``(..., L, C)`` and ``kernel`` ``(..., K, C)``; leading axes
    broadcast. ``y[..., t, c] = sum_tau kernel[..., tau, c] * x[..., t - tau, c]``
    with zeros before the start of the series.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim < 2 or kernel.shape[-2] < 1:
        raise ValueError("kernel needs at least one tap")
    if x.shape[-1] != kernel.shape[-1] and 1 not in (x.shape[-1], kernel.shape[-1]):
        raise ValueError(f"channel mismatch: {x.shape} vs {kernel.shape}")
    xd, kd = x.data, kernel.data
    L, K = xd.shape[-2], kd.shape[-2]
    out_shape = np.broadcast_shapes(xd.shape, kd.shape[:-2] + (L, kd.shape[-1]))
    y = np.zeros(out_shape)
    for tau in range(min(K, L)):
        y[..., tau:, :] += kd[..., tau:tau + 1, :] * xd[..., : L - tau, :]

    def back(g):
        gx = np.zeros(np.broadcast_shapes(xd.shape, g.shape))
        gk = np.zeros(np.broadcast_shapes(kd.shape, g.shape[:-2] + (K, g.shape[-1])))
        for tau in range(min(K, L)):
            gx[..., : L - tau, :] += kd[..., tau:tau + 1, :] * g[..., tau:, :]
            gk[..., tau, :] = (g[..., tau:, :] * xd[..., : L - tau, :]).sum(axis=-2)
        return gx, gk

    return _record(y, (x, kernel), back)


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Input-dependent diagonal state-space recurrence (zero-order hold).

    Shapes: ``u, delta`` ``(..., L, Di)``; ``A`` ``(Di, Ds)``; ``B, C``
    ``(..., L, Ds)``; ``D`` ``(Di,)``. Per channel ``i`` and state ``n``::

        h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * u_t
        y_t = C_t . h_t + D * u_t
    """
    u, delta, A, B, C, D = (as_tensor(t) for t in (u, delta, A, B, C, D))
    lead = u.shape[:-2]
    L, Di = u.shape[-2:]
    Ds = A.shape[-1]
    if delta.shape != u.shape or A.shape != (Di, Ds) or D.shape != (Di,):
        raise ValueError("selective_scan: inconsistent u/delta/A/D shapes")
    if B.shape != lead + (L, Ds) or C.shape != lead + (L, Ds):
        raise ValueError("selective_scan: B and C must be (..., L, d_state)")

    if scan_fwd is not None:
        flat = lambda a, last: np.ascontiguousarray(a.data.reshape(-1, L, last))
        ud, dd, Bd, Cd = flat(u, Di), flat(delta, Di), flat(B, Ds), flat(C, Ds)
        Ad, Dd = np.ascontiguousarray(A.data), np.ascontiguousarray(D.data)
        out = scan_fwd(ud, dd, Ad, Bd, Cd, Dd).reshape(lead + (L, Di))

        def back(g):
            grads = scan_bwd(np.ascontiguousarray(g.reshape(-1, L, Di)), ud, dd, Ad, Bd, Cd, Dd)
            gu, gdelta, gA, gB, gC, gD = grads
            return (gu.reshape(u.shape), gdelta.reshape(u.shape), gA,
                    gB.reshape(B.shape), gC.reshape(C.shape), gD)

        return _record(out, (u, delta, A, B, C, D), back)
    out, back = _scan_numpy(u.data, delta.data, A.data, B.data, C.data, D.data)
    return _record(out, (u, delta, A, B, C, D), back)


def _scan_numpy(u, delta, A, B, C, D):
    lead = u.shape[:-2]
    L, Di = u.shape[-2:]
    Ds = A.shape[-1]
    # time-major layout keeps each step contiguous
    ud = u.reshape(-1, L, Di).transpose(1, 0, 2)
    dd = delta.reshape(-1, L, Di).transpose(1, 0, 2)
    Bd = B.reshape(-1, L, Ds).transpose(1, 0, 2)
    Cd = C.reshape(-1, L, Ds).transpose(1, 0, 2)
    Ad, Dd = A, D
    nb = ud.shape[1]

    dA = np.exp(dd[..., None] * Ad)                      # (L, b, Di, Ds)
    dBu = (dd * ud)[..., None] * Bd[:, :, None, :]
    H = np.empty((L, nb, Di, Ds))
    h = np.zeros((nb, Di, Ds))
    for t in range(L):
        h = dA[t] * h + dBu[t]
        H[t] = h
    del dBu
    y = (H @ Cd[..., None])[..., 0] + ud * Dd
    out = y.transpose(1, 0, 2).reshape(lead + (L, Di))

    def back(g):
        gy = g.reshape(-1, L, Di).transpose(1, 0, 2)
        gC = (gy[..., None, :] @ H)[..., 0, :]
        gD = (gy * ud).sum(axis=(0, 1))
        gu = gy * Dd
        GH = np.empty_like(H)
        gh = np.zeros((nb, Di, Ds))
        for t in range(L - 1, -1, -1):
            if t < L - 1:
                gh = gh * dA[t + 1]
            gh = gh + gy[t][..., None] * Cd[t][:, None, :]
            GH[t] = gh
        H_prev = np.empty_like(H)
        H_prev[0] = 0.0
        H_prev[1:] = H[:-1]
        g_arg = GH * H_prev * dA                       # d/d(delta * A)
        gdelta = (g_arg * Ad).sum(axis=-1)
        gA = (g_arg * dd[..., None]).sum(axis=(0, 1))
        gBu = (GH @ Bd[..., None])[..., 0]               # d/d(delta * u), summed over states
        gdelta += gBu * ud
        gu = gu + gBu * dd
        gB = ((dd * ud)[..., None, :] @ GH)[..., 0, :]
        back_shape = lambda a, last: a.transpose(1, 0, 2).reshape(lead + (L, last))
        return (back_shape(gu, Di), back_shape(gdelta, Di), gA,
                back_shape(gB, Ds), back_shape(gC, Ds), gD)

    return out, back


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    if not training or p <= 0.0:
        return x
    if p >= 1.0:
        raise ValueError("dropout probability must be < 1")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _unary(x, x.data * mask, lambda g: g * mask)


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Largest ``|g_auto - g_fd| / max(1, |g_fd|)`` over parameter entries.

    ``f`` is re-evaluated with each entry nudged by ``+-eps`` (central
    differences). ``max_entries`` optionally limits each parameter to a random
    subset of its entries.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("objective is not finite")
    grads = tape.backward(loss, params)
    worst = 0.0
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        gauto = grads[p].reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        for k in idx:
            orig = flat[k]
            flat[k] = orig + eps
            fp = float(f().data)
            flat[k] = orig - eps
            fm = float(f().data)
            flat[k] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError("objective is not finite under perturbation")
            gfd = (fp - fm) / (2.0 * eps)
            worst = max(worst, abs(gauto[k] - gfd) / max(1.0, abs(gfd)))
    return worst
