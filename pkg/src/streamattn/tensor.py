"""Dense float64 tensors with reverse-mode automatic differentiation.

Every model computation is expressed through the operations in this module.
A :class:`Tensor` wraps an immutable ``numpy.ndarray``; operations record their
parents and a closure that maps the output gradient to input gradients.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Rng",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "parameter",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "take_rows",
    "sum_all",
    "sum_axis",
    "mean_axis",
    "exp",
    "log",
    "softmax_rows",
    "log_softmax_rows",
    "layer_norm",
    "gelu",
    "stop_gradient",
    "strided_downsample",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class NonFiniteError(FloatingPointError):
    """Raised in checked mode when an operation produces NaN or Inf."""


_GRAD_ENABLED = True
_CHECK_FINITE = False


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
def check_finite():
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = True
    try:
        yield
    finally:
        _CHECK_FINITE = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"zero extent in shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by operation '{op}'")
    if not isinstance(data, np.ndarray):
        data = np.array(data)
    out = Tensor.__new__(Tensor)
    data.flags.writeable = False
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make("mul", ad * bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading axes."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {ad.shape} @ {bd.shape}")

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make("matmul", ad @ bd, (a, b), bw)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        if a.ndim != 2:
            raise ShapeError("transpose without axes requires rank 2")
        axes = (1, 0)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make("reshape", a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(src),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat of an empty sequence")
    if len(parts) == 1:
        return parts[0]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def take_rows(a: Tensor, index) -> Tensor:
    """Select along axis 0 with a slice, integer, or integer array."""
    src = a.shape

    def bw(g):
        full = np.zeros(src)
        np.add.at(full, index, g)
        return (full,)

    return _make("take_rows", np.array(a.data[index]), (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    src = a.shape
    return _make("sum", np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, src).copy(),))


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    src = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make("sum_axis", a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = a.shape[axis]
    return scale(sum_axis(a, axis, keepdims), 1.0 / n)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


# ------------------------------------------------------------ neural pieces


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a rank-2 tensor, stabilised by the row maximum."""
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects rank 2, got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make("softmax_rows", p, (x,), bw)


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"log_softmax_rows expects rank 2, got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _make("log_softmax_rows", out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine ``gamma``/``beta``."""
    xd = x.data
    d = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        gxhat = g * gd
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return _make("layer_norm", out, (x, gamma, beta), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make("gelu", out, (x,), bw)


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity; contributes no gradient to ``x`` or anything upstream."""
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out.op = "stop_gradient"
    out.name = None
    return out


def strided_downsample(
    x: Tensor,
    grid: Sequence[int],
    strides: Sequence[int],
    mode: str = "pool",
    kernel: Tensor | None = None,
    bias: Tensor | None = None,
) -> Tensor:
    """Down-sample tokens laid out on a ``(time, height, width)`` grid.

    ``x`` has shape ``(t*h*w, D)`` in row-major grid order. Each stride-aligned
    block collapses to one token: ``pool`` averages the block, ``conv`` applies a
    per-channel kernel ``(s_t*s_h*s_w, D)`` plus ``bias`` ``(D,)``.
    """
    t, h, w = (int(v) for v in grid)
    st, sh, sw = (int(v) for v in strides)
    if x.ndim != 2 or x.shape[0] != t * h * w:
        raise ShapeError(f"tokens {x.shape} do not match grid {(t, h, w)}")
    if min(st, sh, sw) < 1 or t % st or h % sh or w % sw:
        raise ShapeError(f"strides {(st, sh, sw)} do not divide grid {(t, h, w)}")
    if (st, sh, sw) == (1, 1, 1):
        return x
    d = x.shape[1]
    vol = st * sh * sw
    blocks = reshape(x, (t // st, st, h // sh, sh, w // sw, sw, d))
    blocks = transpose(blocks, (0, 2, 4, 1, 3, 5, 6))
    blocks = reshape(blocks, ((t // st) * (h // sh) * (w // sw), vol, d))
    if mode == "pool":
        return mean_axis(blocks, 1)
    if mode == "conv":
        if kernel is None or kernel.shape != (vol, d):
            raise ShapeError(f"conv kernel must have shape {(vol, d)}")
        out = sum_axis(mul(blocks, kernel), 1)
        return out if bias is None else add(out, bias)
    raise ValueError(f"unknown down-sampling mode {mode!r}")


# ------------------------------------------------------------------ backward


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
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray | Tensor, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps a tensor shaped like ``x`` to a scalar tensor. The error for each
    coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with check_finite():
        leaf = Tensor(x0, requires_grad=True)
        out = f(leaf)
        backward(out)
        analytic = np.zeros_like(x0) if leaf.grad is None else leaf.grad
        numeric = np.zeros_like(x0)
        with no_grad():
            flat = x0.reshape(-1)
            for i in range(flat.size):
                xp = flat.copy()
                xm = flat.copy()
                xp[i] += eps
                xm[i] -= eps
                fp = float(f(Tensor(xp.reshape(x0.shape))).data)
                fm = float(f(Tensor(xm.reshape(x0.shape))).data)
                numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max())


# ----------------------------------------------------------------------- rng


class Rng:
    """Seeded PCG64 stream; identical seeds give identical draws everywhere."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, shape: Iterable[int], low: float, high: float) -> np.ndarray:
        return self._gen.uniform(low, high, size=tuple(shape))

    def normal(self, shape: Iterable[int], std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=tuple(shape))

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def random(self) -> float:
        return float(self._gen.random())

    def fan_in_uniform(self, shape: Sequence[int], fan_in: int) -> np.ndarray:
        bound = 1.0 / math.sqrt(fan_in)
        return self.uniform(shape, -bound, bound)
