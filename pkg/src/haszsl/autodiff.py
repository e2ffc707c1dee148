"""Minimal reverse-mode automatic differentiation on numpy arrays.

A :class:`Tape` records every operation applied to tensors that live on it.
Leaves are created with :meth:`Tape.leaf`; plain arrays and tensors created
with ``Tensor(values)`` are constants. Calling :meth:`Tape.backward` on a
scalar output walks the recorded nodes in reverse order exactly once and
returns the gradient of every leaf.

Operations accept an optional leading batch axis wherever the model needs it
(e.g. ``conv1x1`` takes ``C x H x W`` or ``N x C x H x W``).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

ENTROPY_FLOOR = 1e-12

Vjp = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """Immutable float64 array, optionally attached to a tape."""

    __slots__ = ("values", "requires_grad", "tape", "node_id")

    def __init__(self, values, requires_grad: bool = False, tape: "Tape | None" = None,
                 node_id: int | None = None, _copy: bool = True):
        arr = np.array(values, dtype=np.float64, copy=True if _copy else None)
        arr.flags.writeable = False
        self.values = arr
        self.requires_grad = requires_grad
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    kind: str
    inputs: tuple[int | None, ...]
    vjp: Vjp | None


class Gradients(dict):
    """Map ``node_id -> gradient``; also indexable by the leaf tensor itself."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.node_id
        return super().__getitem__(key)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.node_id
        return super().__contains__(key)


class Tape:
    """Ordered record of operations; rebuilt for every forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: list[int] = []
        self._shapes: list[tuple[int, ...]] = []

    def leaf(self, values) -> Tensor:
        t = Tensor(values, requires_grad=True, tape=self, node_id=len(self.nodes))
        self.nodes.append(_Node("leaf", (), None))
        self._leaves.append(t.node_id)
        self._shapes.append(t.shape)
        return t

    def record(self, kind: str, value: np.ndarray, inputs: Sequence[Tensor], vjp: Vjp) -> Tensor:
        ids = tuple(t.node_id if t.tape is self else None for t in inputs)
        out = Tensor(value, requires_grad=True, tape=self, node_id=len(self.nodes), _copy=False)
        self.nodes.append(_Node(kind, ids, vjp))
        self._shapes.append(out.shape)
        return out

    def backward(self, loss: Tensor) -> Gradients:
        """Gradients of the scalar ``loss`` with respect to every leaf."""
        if loss.tape is not self:
            raise ContractError("loss tensor was not recorded on this tape")
        if loss.values.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
        for nid in range(loss.node_id, -1, -1):
            node = self.nodes[nid]
            g = grads.get(nid)
            if g is None or node.vjp is None:
                continue
            for src, gin in zip(node.inputs, node.vjp(g)):
                if src is None or gin is None:
                    continue
                if src in grads:
                    grads[src] = grads[src] + gin
                else:
                    grads[src] = gin
        out = Gradients()
        for nid in self._leaves:
            out[nid] = grads.get(nid, np.zeros(self._shapes[nid]))
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind: str, value: np.ndarray, inputs: Sequence[Tensor], vjp: Vjp) -> Tensor:
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None}
    if not tapes:
        return Tensor(value, _copy=False)
    if len(tapes) > 1:
        raise ContractError(f"{kind}: operands recorded on different tapes")
    (tape,) = tapes.values()
    return tape.record(kind, value, inputs, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ----------------------------------------------------------------------------
# elementwise and reductions

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.values - b.values, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    av, bv = a.values, b.values
    return _emit("mul", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _emit("scale", a.values * c, (a,), lambda g: (g * c,))


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    return _emit("square", av * av, (a,), lambda g: (2.0 * av * g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0
    return _emit("relu", np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.values.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit("sum", out, (a,), vjp)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.values.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _emit("reshape", a.values.reshape(shape), (a,), lambda g: (g.reshape(old),))


def detach(a) -> Tensor:
    """Constant copy of ``a``; no gradient flows back through it."""
    return Tensor(as_tensor(a).values)


# ----------------------------------------------------------------------------
# linear algebra and convolution

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def conv1x1(x, kernel) -> Tensor:
    """1x1 convolution: ``out[..., k, h, w] = sum_c x[..., c, h, w] * kernel[c, k]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim not in (3, 4) or kernel.ndim != 2 or x.shape[-3] != kernel.shape[0]:
        raise DimensionError(f"conv1x1: input {x.shape} incompatible with kernel {kernel.shape}")
    xv, kv = x.values, kernel.values
    out = np.einsum("...chw,ck->...khw", xv, kv)

    lead = "n" if xv.ndim == 4 else ""

    def vjp(g):
        return (np.einsum("...khw,ck->...chw", g, kv),
                np.einsum(f"{lead}chw,{lead}khw->ck", xv, g))

    return _emit("conv1x1", out, (x, kernel), vjp)


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    """Patches of a padded ``N x C x H' x W'`` array as rows ordered (kernel_i, kernel_j, c)."""
    n, c = xp.shape[:2]
    xh = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    cols = np.empty((n, h, w, k, k, c))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xh[:, i:i + h, j:j + w, :]
    return cols.reshape(n * h * w, k * k * c)


def conv2d(x, weight) -> Tensor:
    """Stride-1 'same' convolution of ``N x Cin x H x W`` with ``Cout x Cin x k x k`` (k odd)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    cout, cin, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    n, _, h, w = x.shape
    p = k // 2
    pad = ((0, 0), (0, 0), (p, p), (p, p))
    cols = _im2col(np.pad(x.values, pad), k, h, w)
    wmat = weight.values.transpose(0, 2, 3, 1).reshape(cout, k * k * cin)
    out = (cols @ wmat.T).reshape(n, h, w, cout).transpose(0, 3, 1, 2)
    need_dx = x.tape is not None
    need_dw = weight.tape is not None

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * h * w, cout)
        gw = (g2.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2) if need_dw else None
        if not need_dx:
            return None, gw
        # col2im: scatter each kernel tap's contribution back onto the padded input
        dcols = (g2 @ wmat).reshape(n, h, w, k, k, cin)
        dxp = np.zeros((n, h + 2 * p, w + 2 * p, cin))
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
        return dxp[:, p:p + h, p:p + w, :].transpose(0, 3, 1, 2), gw

    return _emit("conv2d", out, (x, weight), vjp)


# ----------------------------------------------------------------------------
# pooling

def _check_spatial(kind, x):
    if x.ndim < 3 or min(x.shape[-2:]) < 1:
        raise DimensionError(f"{kind}: expected (..., C, H, W), got {x.shape}")


def avg_pool2(x) -> Tensor:
    """Non-overlapping 2x2 average pooling (2x spatial downsample)."""
    x = as_tensor(x)
    _check_spatial("avg_pool2", x)
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2: spatial size {h}x{w} is not even")
    lead = x.shape[:-2]
    out = x.values.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    def vjp(g):
        up = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1)
        return (up * 0.25,)

    return _emit("avg_pool2", out, (x,), vjp)


def avg_pool_spatial(x) -> Tensor:
    x = as_tensor(x)
    _check_spatial("avg_pool_spatial", x)
    h, w = x.shape[-2:]
    shape = x.shape
    return _emit("avg_pool_spatial", x.values.mean(axis=(-2, -1)), (x,),
                 lambda g: (np.broadcast_to(g[..., None, None] / (h * w), shape).copy(),))


def max_pool_spatial(x) -> Tensor:
    """Global max over H x W; ties resolve to the first cell in row-major order."""
    x = as_tensor(x)
    _check_spatial("max_pool_spatial", x)
    shape = x.shape
    flat = x.values.reshape(*shape[:-2], -1)
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gf = np.zeros(flat.shape)
        np.put_along_axis(gf, idx[..., None], g[..., None], axis=-1)
        return (gf.reshape(shape),)

    return _emit("max_pool_spatial", out, (x,), vjp)


# ----------------------------------------------------------------------------
# probability

def _softmax_values(v: np.ndarray) -> np.ndarray:
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits) -> Tensor:
    """Softmax over the last axis (max-subtracted)."""
    logits = as_tensor(logits)
    s = _softmax_values(logits.values)
    return _emit("softmax", s, (logits,),
                 lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def log_softmax(logits) -> Tensor:
    logits = as_tensor(logits)
    v = logits.values
    m = v.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(v - m).sum(axis=-1, keepdims=True))
    s = np.exp(v - lse)
    return _emit("log_softmax", v - lse, (logits,),
                 lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def entropy(p, floor: float = ENTROPY_FLOOR, tol: float = 1e-9) -> Tensor:
    """Shannon entropy ``-sum p log(max(p, floor))`` over the last axis.

    The floor is applied inside the log only. ``p`` must lie on the simplex
    (nonnegative, summing to one) within ``tol``.
    """
    p = as_tensor(p)
    pv = p.values
    if np.any(pv < -tol) or np.any(np.abs(pv.sum(axis=-1) - 1.0) > tol):
        raise ContractError("entropy: input is not a probability vector")
    clipped = np.maximum(pv, floor)
    logp = np.log(clipped)
    out = -(pv * logp).sum(axis=-1)

    def vjp(g):
        return (-(logp + (pv > floor) * pv / clipped) * g[..., None],)

    return _emit("entropy", out, (p,), vjp)


# ----------------------------------------------------------------------------
# test harness

def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``f`` maps a tensor to a scalar tensor and must also accept constants.
    The relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    x0 = np.array(point, dtype=np.float64)
    tape = Tape()
    x = tape.leaf(x0)
    analytic = tape.backward(f(x))[x]
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
