"""Reverse-mode automatic differentiation on dense float64 tensors.

Small tape engine: every operation returns a new Tensor that remembers its
parents and a vector-Jacobian closure. backward() walks the tape in reverse
topological order and accumulates gradients into the requires_grad leaves.
numpy supplies the array arithmetic; every backward rule lives here.

Convolutions are lowered to explicit patch extraction plus a matrix product
(direct spatial convolution, no FFT), so the multiply-accumulate count used
by the cost instruments is exactly h * w * c_in * c_out * k * k per layer.

Everything is deterministic: identical graphs replay to bit-identical
values and gradients.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tensor:
    """Array node on the tape. Leaves own data; interior nodes own a vjp."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(
        self,
        data: np.ndarray,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        vjp: Callable[[np.ndarray], tuple] | None = None,
        op: str = "leaf",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._vjp = vjp
        self._op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar, shape is {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(op={self._op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are promoted to constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return subtract(self, _as_tensor(other))

    def __rsub__(self, other):
        return subtract(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        raise TypeError("tensor division is only supported by scalars")

    def __neg__(self):
        return scale(self, -1.0)


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64, copy=True), requires_grad=requires_grad)


def constant(values) -> Tensor:
    return tensor(values, requires_grad=False)


def _as_tensor(v) -> Tensor:
    if isinstance(v, Tensor):
        return v
    return constant(v)


def _make(data, parents, vjp, op) -> Tensor:
    req = any(p.requires_grad for p in parents)
    if not req:
        # constant subgraphs are cut from the tape
        return Tensor(data, requires_grad=False, op=op)
    return Tensor(data, requires_grad=True, parents=tuple(parents), vjp=vjp, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def subtract(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "subtract",
    )


def multiply(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "multiply",
    )


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,), "scale")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (g * (2.0 * a.data),), "square")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation gelu: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    x = a.data
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        return (g * d,)

    return _make(out, (a,), vjp, "gelu")


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(out, (a,), vjp, "reduce_sum")


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    out = a.data.mean(axis=axis)
    count = a.data.size if axis is None else a.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        gg = np.expand_dims(g / count, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(out, (a,), vjp, "reduce_mean")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis) for i in range(len(parts))
        )

    return _make(out, tuple(parts), vjp, "concat")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Stack [C_i, H, W] blocks along the channel axis."""
    return concat(parts, axis=0)


def crop(a: Tensor, key: tuple) -> Tensor:
    """Slice view (steps allowed); the spec's slice primitive."""
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, slice):
            raise TypeError("crop takes slices only; reshape afterwards to drop axes")
    out = a.data[key]

    def vjp(g):
        gx = np.zeros(a.shape, dtype=np.float64)
        gx[key] = g
        return (gx,)

    return _make(out.copy(), (a,), vjp, "crop")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def pad(a: Tensor, pad_width: tuple, mode: str = "zero") -> Tensor:
    """Zero or reflect padding. pad_width follows numpy's ((lo, hi), ...)."""
    pad_width = tuple((int(lo), int(hi)) for lo, hi in pad_width)
    if len(pad_width) != a.data.ndim:
        raise ValueError(f"pad_width needs one (lo, hi) pair per axis, got {pad_width}")
    if mode == "zero":
        out = np.pad(a.data, pad_width, mode="constant")

        def vjp(g):
            key = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.shape))
            return (g[key].copy(),)

        return _make(out, (a,), vjp, "pad_zero")
    if mode == "reflect":
        out = np.pad(a.data, pad_width, mode="reflect")
        idx = np.pad(np.arange(a.data.size).reshape(a.shape), pad_width, mode="reflect")

        def vjp(g):
            flat = np.bincount(idx.ravel(), weights=g.ravel(), minlength=a.data.size)
            return (flat.reshape(a.shape),)

        return _make(out, (a,), vjp, "pad_reflect")
    raise ValueError(f"unknown pad mode {mode!r}")


def circular_shift(a: Tensor, shift: int, axis: int) -> Tensor:
    out = np.roll(a.data, shift, axis=axis)
    return _make(out, (a,), lambda g: (np.roll(g, -shift, axis=axis),), "circular_shift")


def interleave2d(parts: Sequence[Tensor], s_h: int, s_w: int) -> Tensor:
    """Scatter s_h*s_w coarse [h, w] tensors onto the fine grid.

    parts come in row-major subgrid order: index i*s_w + j holds subgrid
    (i, j). Exact inverse of strided cropping, so round trips are bitwise.
    """
    parts = [_as_tensor(p) for p in parts]
    if len(parts) != s_h * s_w:
        raise ValueError(f"need {s_h * s_w} parts, got {len(parts)}")
    h, w = parts[0].shape
    out = np.empty((h * s_h, w * s_w), dtype=np.float64)
    for i in range(s_h):
        for j in range(s_w):
            out[i::s_h, j::s_w] = parts[i * s_w + j].data

    def vjp(g):
        return tuple(
            g[i::s_h, j::s_w].copy() for i in range(s_h) for j in range(s_w)
        )

    return _make(out, tuple(parts), vjp, "interleave2d")


def subgrid(a: Tensor, i: int, j: int, s_h: int, s_w: int) -> Tensor:
    """Strided crop picking stagger subgrid (i, j)."""
    return crop(a, (slice(i, None, s_h), slice(j, None, s_w)))


def _patches(xp: np.ndarray, kh: int, kw: int, h: int, w: int) -> np.ndarray:
    # [C, H+2p, W+2p] -> [H*W, C*kh*kw], row-major over output pixels
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    c = xp.shape[0]
    return np.ascontiguousarray(win[:, :h, :w].transpose(1, 2, 0, 3, 4)).reshape(h * w, c * kh * kw)


def _conv_raw(x: np.ndarray, k: np.ndarray, padding: str) -> np.ndarray:
    c_out, c_in, kh, kw = k.shape
    p = kh // 2
    mode = "wrap" if padding == "periodic" else "constant"
    xp = np.pad(x, ((0, 0), (p, p), (p, p)), mode=mode)
    h, w = x.shape[1], x.shape[2]
    pat = _patches(xp, kh, kw, h, w)
    out = pat @ k.reshape(c_out, c_in * kh * kw).T
    return np.ascontiguousarray(out.T.reshape(c_out, h, w))


def conv2d(x: Tensor, kernel: Tensor, padding: str = "periodic") -> Tensor:
    """Same-shape 2-D convolution, odd square kernels, periodic or zero pad.

    x is [C_in, H, W], kernel [C_out, C_in, k, k]; output [C_out, H, W].
    """
    if padding not in ("periodic", "zero"):
        raise ValueError(f"unknown padding {padding!r}")
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ValueError("conv2d expects x [C_in,H,W] and kernel [C_out,C_in,k,k]")
    c_out, c_in, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"kernel must be odd and square, got {kh}x{kw}")
    if x.shape[0] != c_in:
        raise ValueError(f"x has {x.shape[0]} channels, kernel expects {c_in}")
    p = kh // 2
    h, w = x.shape[1], x.shape[2]
    out = _conv_raw(x.data, kernel.data, padding)

    def vjp(g):
        g = np.ascontiguousarray(g)
        # kernel gradient: correlate grad-out with input patches
        mode = "wrap" if padding == "periodic" else "constant"
        xp = np.pad(x.data, ((0, 0), (p, p), (p, p)), mode=mode)
        pat = _patches(xp, kh, kw, h, w)
        gk = (g.reshape(c_out, h * w) @ pat).reshape(kernel.shape)
        # input gradient
        if padding == "periodic":
            k_adj = np.ascontiguousarray(np.flip(kernel.data, axis=(2, 3)).transpose(1, 0, 2, 3))
            gx = _conv_raw(g, k_adj, "periodic")
        else:
            gp = g.reshape(c_out, h * w).T @ kernel.data.reshape(c_out, c_in * kh * kw)
            gp = gp.reshape(h, w, c_in, kh, kw)
            gxp = np.zeros((c_in, h + 2 * p, w + 2 * p), dtype=np.float64)
            for a in range(kh):
                for b in range(kw):
                    gxp[:, a : a + h, b : b + w] += gp[:, :, :, a, b].transpose(2, 0, 1)
            gx = gxp[:, p : p + h, p : p + w].copy()
        return (gx, gk)

    return _make(out, (x, kernel), vjp, "conv2d")


# ------------------------------------------------------------------ backward


def graph_nodes(root: Tensor) -> list[Tensor]:
    """Reverse-mode tape: topologically ordered, root last."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf's .grad.

    Returns {id(leaf): gradient}. loss must be scalar.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = graph_nodes(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if node._vjp is None:
            # requires_grad leaf
            node.grad = g if node.grad is None else node.grad + g
            leaf_grads[id(node)] = node.grad
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    return leaf_grads


def zero_grads(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ------------------------------------------------------------ gradient check


def gradient_check(
    f: Callable[[Tensor], Tensor],
    x0: np.ndarray,
    eps: float = 1e-5,
) -> float:
    """Max relative deviation between reverse-mode and central differences.

    deviation_i = |g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12), maximised over
    coordinates. Any non-finite value maps to +inf so checks fail loudly.
    """
    x0 = np.array(x0, dtype=np.float64, copy=True)
    x = tensor(x0, requires_grad=True)
    loss = f(x)
    if loss.data.size != 1:
        raise ValueError("gradient_check needs a scalar-valued function")
    backward(loss)
    g_ad = np.zeros_like(x0) if x.grad is None else np.asarray(x.grad, dtype=np.float64)

    g_fd = np.zeros_like(x0)
    flat = x0.ravel()
    fd_flat = g_fd.ravel()
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = eps
        hi = f(constant((flat + bump).reshape(x0.shape))).item()
        lo = f(constant((flat - bump).reshape(x0.shape))).item()
        fd_flat[i] = (hi - lo) / (2.0 * eps)

    num = np.abs(g_ad - g_fd)
    den = np.abs(g_ad) + np.abs(g_fd) + 1e-12
    dev = num / den
    if not (np.all(np.isfinite(g_ad)) and np.all(np.isfinite(g_fd))):
        return float("inf")
    return float(dev.max()) if dev.size else 0.0
