"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Every tensor that requires a gradient belongs to exactly one :class:`Tape`.
Primitives append a node to that tape; :func:`backward` replays the tape in
reverse append order, so each node is visited once, after all of its
consumers.

Convolutions are cross-correlations with zero padding, computed via im2col.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "apply_primitive",
    "backward",
    "grad_check",
    "PRIMITIVES",
]

_handles = itertools.count()


class Tensor:
    """Dense float64 array, optionally recorded on a tape."""

    __slots__ = ("data", "requires_grad", "tape", "handle", "grad")

    def __init__(self, data, requires_grad: bool = False, tape: Tape | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        if self.requires_grad and tape is None:
            raise ValueError("a tensor requiring grad must belong to a tape")
        self.tape = tape if self.requires_grad else None
        self.handle = next(_handles)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tape_id(self) -> int | None:
        return None if self.tape is None else self.tape.tape_id

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; everything routes through apply_primitive
    def __add__(self, other):
        return apply_primitive("add", [self, _lift(other)])

    __radd__ = __add__

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, _lift(other)])


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_tape_ids = itertools.count()


@dataclass
class Tape:
    """Append-only record of primitive applications."""

    nodes: list[_Node] = field(default_factory=list)
    leaves: list[Tensor] = field(default_factory=list)
    tape_id: int = field(default_factory=lambda: next(_tape_ids))

    def var(self, data) -> Tensor:
        """Register a trainable leaf on this tape (a copy of ``data``)."""
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True, tape=self)
        self.leaves.append(t)
        return t

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        return backward(loss)


# ---------------------------------------------------------------------------
# primitive registry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    forward: Callable  # (arrays, **attrs) -> (out, ctx)
    vjp: Callable  # (g, arrays, out, ctx, **attrs) -> tuple of input grads
    check: Callable | None = None  # (shapes, **attrs) -> None, raises on mismatch


PRIMITIVES: dict[str, Primitive] = {}


def _register(name, check=None):
    def deco(cls_or_pair):
        fwd, vjp = cls_or_pair()
        PRIMITIVES[name] = Primitive(fwd, vjp, check)
        return cls_or_pair

    return deco


def _shape_error(kind: str, *shapes) -> ValueError:
    joined = " and ".join(str(tuple(s)) for s in shapes)
    return ValueError(f"{kind}: incompatible shapes {joined}")


def apply_primitive(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Evaluate primitive ``kind`` and record it if any input requires grad."""
    prim = PRIMITIVES.get(kind)
    if prim is None:
        raise KeyError(f"unknown primitive {kind!r}; known: {sorted(PRIMITIVES)}")
    inputs = tuple(_lift(x) for x in inputs)
    if prim.check is not None:
        prim.check(kind, [x.shape for x in inputs], **attrs)
    arrays = [x.data for x in inputs]
    out_data, ctx = prim.forward(arrays, **attrs)

    tapes = {id(x.tape): x.tape for x in inputs if x.requires_grad}
    if not tapes:
        return Tensor(out_data)
    if len(tapes) > 1:
        raise ValueError(f"{kind}: inputs belong to different tapes")
    (tape,) = tapes.values()
    out = Tensor(out_data, requires_grad=True, tape=tape)

    def vjp(g, _arrays=arrays, _out=out_data, _ctx=ctx):
        return prim.vjp(g, _arrays, _out, _ctx, **attrs)

    tape.nodes.append(_Node(kind, inputs, out, vjp))
    return out


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a map from every grad-requiring tensor on the tape (leaves and
    intermediates) to its gradient. Tensors off the path to ``loss`` get
    zeros. Leaf tensors also receive ``.grad``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    tape = loss.tape
    if not tape.nodes and loss not in tape.leaves:
        raise ValueError("tape is empty")

    grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.output)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for x, gx in zip(node.inputs, in_grads):
            if gx is None or not x.requires_grad:
                continue
            if x in grads:
                grads[x] = grads[x] + gx
            else:
                grads[x] = gx
    for t in tape.leaves:
        t.grad = grads.setdefault(t, np.zeros_like(t.data))
    for node in tape.nodes:
        grads.setdefault(node.output, np.zeros_like(node.output.data))
    return grads


# ---------------------------------------------------------------------------
# shape checks
# ---------------------------------------------------------------------------


def _same_shape(kind, shapes, **_):
    if shapes[0] != shapes[1]:
        raise _shape_error(kind, *shapes)


def _matmul_check(kind, shapes, **_):
    a, b = shapes
    if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
        raise _shape_error(kind, a, b)


def _conv_check(kind, shapes, stride=1, padding=0, **_):
    x, w = shapes
    if stride < 1 or padding < 0:
        raise ValueError(f"{kind}: invalid stride={stride} padding={padding}")
    if len(x) != 4 or len(w) != 4 or x[1] != w[1]:
        raise _shape_error(kind, x, w)
    if x[2] + 2 * padding < w[2] or x[3] + 2 * padding < w[3]:
        raise _shape_error(kind, x, w)


def _pool_check(kind, shapes, kernel=3, stride=1, padding=1, **_):
    if stride < 1 or padding < 0 or kernel < 1:
        raise ValueError(f"{kind}: invalid kernel={kernel} stride={stride} padding={padding}")
    if len(shapes[0]) != 4:
        raise _shape_error(kind, shapes[0])


def _scale_check(kind, shapes, **_):
    if int(np.prod(shapes[1])) != 1:
        raise _shape_error(kind, *shapes)


def _bias_check(kind, shapes, **_):
    x, b = shapes
    if len(b) != 1 or len(x) < 2 or x[1] != b[0]:
        raise _shape_error(kind, x, b)


def _logits_check(kind, shapes, labels=None, **_):
    (x,) = shapes
    if len(x) != 2:
        raise _shape_error(kind, x)
    if labels is not None and np.shape(labels) != (x[0],):
        raise _shape_error(kind, x, np.shape(labels))


def _mse_check(kind, shapes, **_):
    _same_shape(kind, shapes)


def _concat_check(kind, shapes, axis=1, **_):
    ref = list(shapes[0])
    for s in shapes[1:]:
        t = list(s)
        if len(t) != len(ref):
            raise _shape_error(kind, ref, t)
        t[axis] = ref[axis]
        if t != ref:
            raise _shape_error(kind, shapes[0], s)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


@_register("add", check=_same_shape)
def _add():
    def fwd(a, **_):
        return a[0] + a[1], None

    def vjp(g, a, out, ctx, **_):
        return g, g

    return fwd, vjp


@_register("matmul", check=_matmul_check)
def _matmul():
    def fwd(a, **_):
        return a[0] @ a[1], None

    def vjp(g, a, out, ctx, **_):
        return g @ a[1].T, a[0].T @ g

    return fwd, vjp


@_register("relu")
def _relu():
    def fwd(a, **_):
        return np.maximum(a[0], 0.0), None

    def vjp(g, a, out, ctx, **_):
        return (g * (a[0] > 0),)

    return fwd, vjp


@_register("scale", check=_scale_check)
def _scale():
    # x * s where s is a single-element tensor (possibly trainable)
    def fwd(a, **_):
        return a[0] * a[1].reshape(()), None

    def vjp(g, a, out, ctx, **_):
        s = a[1].reshape(())
        return g * s, np.sum(g * a[0]).reshape(a[1].shape)

    return fwd, vjp


@_register("mul_const")
def _mul_const():
    def fwd(a, c=1.0, **_):
        return a[0] * c, None

    def vjp(g, a, out, ctx, c=1.0, **_):
        return (g * c,)

    return fwd, vjp


@_register("sum")
def _sum():
    def fwd(a, **_):
        return np.sum(a[0]).reshape(()), None

    def vjp(g, a, out, ctx, **_):
        return (np.broadcast_to(g, a[0].shape).copy(),)

    return fwd, vjp


@_register("take")
def _take():
    # index along the leading axis
    def fwd(a, index=0, **_):
        return a[0][index].copy(), None

    def vjp(g, a, out, ctx, index=0, **_):
        gx = np.zeros_like(a[0])
        gx[index] = g
        return (gx,)

    return fwd, vjp


@_register("reshape")
def _reshape():
    def fwd(a, shape=(), **_):
        return a[0].reshape(shape), None

    def vjp(g, a, out, ctx, **_):
        return (g.reshape(a[0].shape),)

    return fwd, vjp


@_register("concat", check=_concat_check)
def _concat():
    def fwd(a, axis=1, **_):
        return np.concatenate(a, axis=axis), [x.shape[axis] for x in a]

    def vjp(g, a, out, ctx, axis=1, **_):
        cuts = np.cumsum(ctx)[:-1]
        return tuple(np.split(g, cuts, axis=axis))

    return fwd, vjp


@_register("bias", check=_bias_check)
def _bias():
    def fwd(a, **_):
        x, b = a
        shape = (1, -1) + (1,) * (x.ndim - 2)
        return x + b.reshape(shape), None

    def vjp(g, a, out, ctx, **_):
        axes = (0,) + tuple(range(2, g.ndim))
        return g, g.sum(axis=axes)

    return fwd, vjp


@_register("softmax")
def _softmax():
    def fwd(a, **_):
        z = a[0] - a[0].max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True), None

    def vjp(g, a, out, ctx, **_):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return fwd, vjp


@_register("cross_entropy", check=_logits_check)
def _cross_entropy():
    # mean over the batch of -log softmax(logits)[label]
    def fwd(a, labels=None, **_):
        x = a[0]
        labels = np.asarray(labels, dtype=np.int64)
        z = x - x.max(axis=1, keepdims=True)
        logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
        logp = z - logz
        n = x.shape[0]
        loss = -logp[np.arange(n), labels].mean()
        return np.asarray(loss).reshape(()), np.exp(logp)

    def vjp(g, a, out, probs, labels=None, **_):
        n = probs.shape[0]
        gx = probs.copy()
        gx[np.arange(n), np.asarray(labels, dtype=np.int64)] -= 1.0
        return (gx * (g.reshape(()) / n),)

    return fwd, vjp


@_register("mse", check=_mse_check)
def _mse():
    def fwd(a, **_):
        d = a[0] - a[1]
        return np.asarray(np.mean(d * d)).reshape(()), d

    def vjp(g, a, out, d, **_):
        gd = g.reshape(()) * 2.0 * d / d.size
        return gd, -gd

    return fwd, vjp


@_register("gap")
def _gap():
    def fwd(a, **_):
        return a[0].mean(axis=(2, 3)), None

    def vjp(g, a, out, ctx, **_):
        n, c, h, w = a[0].shape
        return (np.broadcast_to(g[:, :, None, None] / (h * w), a[0].shape).copy(),)

    return fwd, vjp


@_register("batchnorm")
def _batchnorm():
    # per-channel normalization with batch statistics, no affine parameters
    def fwd(a, eps=1e-5, **_):
        x = a[0]
        axes = (0,) + tuple(range(2, x.ndim))
        mu = x.mean(axis=axes, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + eps)
        y = xc * inv
        return y, (y, inv, axes)

    def vjp(g, a, out, ctx, **_):
        y, inv, axes = ctx
        gm = g.mean(axis=axes, keepdims=True)
        gym = (g * y).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return fwd, vjp


def _out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """(N, C, H, W) -> (C, kh, kw, N, OH, OW) view over the padded input.

    Output pixels are innermost so copying the view walks contiguous rows.
    """
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    return np.lib.stride_tricks.as_strided(
        x,
        shape=(c, kh, kw, n, oh, ow),
        strides=(sc, sh, sw, sn, sh * stride, sw * stride),
        writeable=False,
    )


def _col2im(cols: np.ndarray, x_shape, kh, kw, stride, padding) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add (C, kh, kw, N, OH, OW) back to x."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    out = np.zeros((c, n, hp, wp))
    oh, ow = cols.shape[4], cols.shape[5]
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, i, j]
    out = out.transpose(1, 0, 2, 3)
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(out)


@_register("conv2d", check=_conv_check)
def _conv2d():
    def fwd(a, stride=1, padding=0, **_):
        x, w = a
        o, c, kh, kw = w.shape
        cols = _im2col(x, kh, kw, stride, padding)
        n, oh, ow = cols.shape[3:]
        mat = cols.reshape(c * kh * kw, n * oh * ow)
        y = w.reshape(o, -1) @ mat
        return y.reshape(o, n, oh, ow).transpose(1, 0, 2, 3), mat

    def vjp(g, a, out, mat, stride=1, padding=0, **_):
        x, w = a
        o, c, kh, kw = w.shape
        n, _, oh, ow = g.shape
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (g2 @ mat.T).reshape(w.shape)
        if stride == 1 and kh == kw and padding <= kh - 1:
            # correlate the output gradient with the flipped, transposed kernel
            flipped = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx = fwd((g, flipped), 1, kh - 1 - padding)[0]
        else:
            gcols = (w.reshape(o, -1).T @ g2).reshape(c, kh, kw, n, oh, ow)
            gx = _col2im(gcols, x.shape, kh, kw, stride, padding)
        return gx, gw

    return fwd, vjp


@_register("avgpool2d", check=_pool_check)
def _avgpool2d():
    # padding cells are excluded from the divisor
    def fwd(a, kernel=3, stride=1, padding=1, **_):
        x = a[0]
        cols = _im2col(x, kernel, kernel, stride, padding)
        ones = np.ones((1, 1) + x.shape[2:])
        counts = _im2col(ones, kernel, kernel, stride, padding).sum(axis=(1, 2))[0]  # (1, OH, OW)
        y = cols.sum(axis=(1, 2)) / counts
        return y.transpose(1, 0, 2, 3), counts

    def vjp(g, a, out, counts, kernel=3, stride=1, padding=1, **_):
        x = a[0]
        gc = (g.transpose(1, 0, 2, 3) / counts)[:, None, None]
        gcols = np.broadcast_to(gc, (gc.shape[0], kernel, kernel) + gc.shape[3:])
        return (_col2im(gcols, x.shape, kernel, kernel, stride, padding),)

    return fwd, vjp


# ---------------------------------------------------------------------------
# functional front-end
# ---------------------------------------------------------------------------


def add(a, b):
    return apply_primitive("add", [a, b])


def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def relu(x):
    return apply_primitive("relu", [x])


def scale(x, s):
    return apply_primitive("scale", [x, s])


def mul_const(x, c: float):
    return apply_primitive("mul_const", [x], c=float(c))


def sum_all(x):
    return apply_primitive("sum", [x])


def take(x, index: int):
    return apply_primitive("take", [x], index=int(index))


def reshape(x, shape):
    return apply_primitive("reshape", [x], shape=tuple(shape))


def concat(xs, axis: int = 1):
    return apply_primitive("concat", list(xs), axis=axis)


def bias(x, b):
    return apply_primitive("bias", [x, b])


def softmax(x):
    return apply_primitive("softmax", [x])


def cross_entropy(logits, labels):
    return apply_primitive("cross_entropy", [logits], labels=np.asarray(labels))


def mse(pred, target):
    return apply_primitive("mse", [pred, target])


def gap(x):
    return apply_primitive("gap", [x])


def batchnorm(x, eps: float = 1e-5):
    return apply_primitive("batchnorm", [x], eps=float(eps))


def conv2d(x, w, stride: int = 1, padding: int = 0):
    return apply_primitive("conv2d", [x, w], stride=int(stride), padding=int(padding))


def avgpool2d(x, kernel: int = 3, stride: int = 1, padding: int = 1):
    return apply_primitive(
        "avgpool2d", [x], kernel=int(kernel), stride=int(stride), padding=int(padding)
    )


def add_n(xs: Sequence[Tensor]) -> Tensor:
    """Left-to-right sum of a nonempty sequence."""
    it = iter(xs)
    acc = next(it)
    for x in it:
        acc = add(acc, x)
    return acc


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``fn`` and central differences.

    ``fn`` receives a leaf tensor and must return a scalar tensor. The error
    per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)

    tape = Tape()
    leaf = tape.var(x0)
    out = fn(leaf)
    if not np.isfinite(out.data).all():
        raise FloatingPointError("function value is not finite at the base point")
    analytic = backward(out)[leaf]

    def value(x):
        v = fn(Tensor(x)).data
        if not np.isfinite(v).all():
            raise FloatingPointError("function value is not finite during differencing")
        return float(v.reshape(()))

    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        nflat[i] = (value(xp.reshape(x0.shape)) - value(xm.reshape(x0.shape))) / (2 * step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def is_finite(x: Tensor) -> bool:
    return bool(np.isfinite(x.data).all())


def nan_guard(x: Tensor, context: str) -> Tensor:
    if not is_finite(x):
        raise FloatingPointError(f"non-finite value ({context})")
    return x


