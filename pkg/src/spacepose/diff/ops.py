"""Primitive differentiable operations with hand-written adjoints.

All functions take :class:`Node` (or array-likes, treated as constants) and
return a new :class:`Node`. Shapes follow numpy broadcasting for the
elementwise family; adjoints are reduced back to each operand's shape.
"""

from __future__ import annotations

import builtins

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from spacepose.diff.node import Node
from spacepose.errors import ConfigError, NumericError

LEAKY_SLOPE = 0.1
LN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _const(x, like: Node | None = None) -> Node:
    if isinstance(x, Node):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Node(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Node, Node]:
    if isinstance(a, Node):
        return a, _const(b, a)
    b = _const(b)
    return _const(a, b), b


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Node:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return Node.from_op(a.value + b.value, (a, b),
                        lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Node:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return Node.from_op(a.value - b.value, (a, b),
                        lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Node:
    """Hadamard product."""
    a, b = _pair(a, b)
    av, bv = a.value, b.value

    def bw(g):
        return (unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                unbroadcast(g * av, bv.shape) if b.requires_grad else None)

    return Node.from_op(av * bv, (a, b), bw, "mul")


def div(a, b) -> Node:
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise NumericError("division by zero")
    out = av / bv

    def bw(g):
        return (unbroadcast(g / bv, av.shape) if a.requires_grad else None,
                unbroadcast(-g * out / bv, bv.shape) if b.requires_grad else None)

    return Node.from_op(out, (a, b), bw, "div")


def scale(a: Node, k: float) -> Node:
    return Node.from_op(a.value * a.dtype.type(k), (a,), lambda g: (g * k,), "scale")


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return Node.from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Node) -> Node:
    if np.any(a.value <= 0):
        raise NumericError("log of non-positive value")
    av = a.value
    return Node.from_op(np.log(av), (a,), lambda g: (g / av,), "log")


def sqrt(a: Node) -> Node:
    if np.any(a.value < 0):
        raise NumericError("sqrt of negative value")
    out = np.sqrt(a.value)

    def bw(g):
        if np.any(out == 0):
            raise NumericError("sqrt adjoint at zero")
        return (g * 0.5 / out,)

    return Node.from_op(out, (a,), bw, "sqrt")


def sigmoid(a: Node) -> Node:
    x = a.value
    # Split form keeps exp() from overflowing for large |x|.
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return Node.from_op(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return Node.from_op(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def leaky_relu(a: Node, alpha: float = LEAKY_SLOPE) -> Node:
    if not 0 < alpha < 1:
        raise ConfigError(f"leaky_relu slope must lie in (0, 1), got {alpha}")
    x = a.value
    pos = x > 0  # x == 0 takes the alpha branch
    slope = np.where(pos, 1.0, alpha).astype(x.dtype)
    return Node.from_op(x * slope, (a,), lambda g: (g * slope,), "leaky_relu")


def activation(a: Node, kind: str, alpha: float = LEAKY_SLOPE) -> Node:
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "tanh":
        return tanh(a)
    if kind == "leaky_relu":
        return leaky_relu(a, alpha)
    raise ConfigError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- shape ops

def reshape(a: Node, shape) -> Node:
    src = a.shape
    return Node.from_op(a.value.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Node, axes=None) -> Node:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return Node.from_op(a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def slice(a: Node, idx) -> Node:  # noqa: A001 - mirrors the indexing it implements
    src_shape, dtype = a.shape, a.dtype
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (int, np.integer, builtins.slice, type(Ellipsis), type(None))) for p in parts)

    def bw(g):
        full = np.zeros(src_shape, dtype=dtype)
        if basic:
            full[idx] = g  # basic indexing never repeats an element
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Node.from_op(a.value[idx], (a,), bw, "slice")


def concat(nodes: list[Node], axis: int = 0) -> Node:
    if not nodes:
        raise ConfigError("concat of an empty list")
    nodes = [_const(n, nodes[0] if isinstance(nodes[0], Node) else None) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return Node.from_op(out, nodes, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(nodes: list[Node], axis: int = 0) -> Node:
    try:
        out = np.stack([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    n = len(nodes)
    return Node.from_op(out, nodes,
                        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


# ---------------------------------------------------------------- reductions

def sum(a: Node, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return Node.from_op(np.asarray(a.value.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    count = a.value.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def norm2(a: Node, axis=-1, keepdims: bool = False) -> Node:
    """Euclidean norm along ``axis``; the adjoint at the origin is taken as 0."""
    x = a.value
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True))

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, gk * x / safe, 0.0).astype(x.dtype),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return Node.from_op(np.asarray(out), (a,), bw, "norm2")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Node:
    """Batched matrix product following ``numpy.matmul`` for ndim >= 2 operands."""
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ConfigError("matmul operands need ndim >= 2")
    if av.shape[-1] != bv.shape[-2]:
        raise ConfigError(f"matmul inner dims differ: {av.shape} @ {bv.shape}")

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if b.requires_grad else None
        return ga, gb

    return Node.from_op(av @ bv, (a, b), bw, "matmul")


def linear(x: Node, weight: Node, bias: Node | None = None) -> Node:
    """Affine map ``x @ weight + bias`` with ``x`` [N, D], ``weight`` [D, M]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ConfigError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ConfigError(f"linear bias shape {bias.shape} != ({weight.shape[1]},)")
    xv, wv = x.value, weight.value
    out = xv @ wv
    if bias is not None:
        out = out + bias.value

    def bw(g):
        gx = g @ wv.T if x.requires_grad else None
        gw = xv.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Node.from_op(out, parents, bw, "linear")


# ---------------------------------------------------------------- convolution

def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Node, weight: Node, bias: Node | None = None, stride: int = 1, pad: int = 0) -> Node:
    """2-D cross-correlation over NCHW input with an FCkk kernel.

    Patches are gathered channels-last so the copy runs over contiguous memory;
    the result is returned as an NCHW view of an NHWC buffer.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ConfigError(f"conv2d channel mismatch: input {c}, weight {cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError("conv2d kernels must have odd extents")
    if stride < 1 or pad < 0:
        raise ConfigError("conv2d needs stride >= 1 and pad >= 0")
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d output would be empty for input {h}x{w}")
    if bias is not None and bias.shape != (f,):
        raise ConfigError(f"conv2d bias shape {bias.shape} != ({f},)")

    xv, wv = x.value, weight.value
    pointwise = kh == 1 and kw == 1 and stride == 1 and pad == 0
    xh = np.ascontiguousarray(xv.transpose(0, 2, 3, 1))
    if pointwise:
        cols = xh.reshape(-1, c)
    else:
        if pad:
            xh = np.pad(xh, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        win = sliding_window_view(xh, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    wmat = wv.transpose(0, 2, 3, 1).reshape(f, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.value
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = None
        if weight.requires_grad:
            gw = np.ascontiguousarray((g2.T @ cols).reshape(f, kh, kw, c).transpose(0, 3, 1, 2))
        gx = None
        if x.requires_grad:
            dcols = g2 @ wmat
            if pointwise:
                gx = dcols.reshape(n, h, w, c).transpose(0, 3, 1, 2)
            else:
                dcols = dcols.reshape(n, ho, wo, kh, kw, c)
                dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=xv.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
                gx = dxp[:, pad:pad + h, pad:pad + w, :].transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Node.from_op(out, parents, bw, "conv2d")


# ---------------------------------------------------------------- normalisation

def layer_norm(x: Node, gamma: Node, beta: Node, eps: float = LN_EPS) -> Node:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1]
    if d < 2:
        raise ConfigError("layer_norm needs at least 2 features")
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ConfigError(f"layer_norm params must have shape ({d},)")
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gamma.value
    out = xhat * gv + beta.value

    def bw(g):
        red = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gb = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gv
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return Node.from_op(out, (x, gamma, beta), bw, "layer_norm")


class RunningStats:
    """Per-channel running mean/variance owned by a batch-norm layer."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batch_norm(x: Node, gamma: Node, beta: Node, stats: RunningStats, train: bool,
               momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Node:
    """Per-channel normalisation of NCHW input.

    In train mode the batch statistics are used and ``stats`` is updated as
    ``stats = momentum * stats + (1 - momentum) * batch``; in infer mode the
    running statistics are used.
    """
    if x.ndim != 4:
        raise ConfigError(f"batch_norm expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigError(f"batch_norm params must have shape ({c},)")
    xv = x.value
    gv = gamma.value.reshape(1, c, 1, 1)
    bv = beta.value.reshape(1, c, 1, 1)
    if not train:
        inv = (1.0 / np.sqrt(stats.var + eps)).astype(xv.dtype).reshape(1, c, 1, 1)
        xh = (xv - stats.mean.astype(xv.dtype).reshape(1, c, 1, 1)) * inv
        out = xh * gv + bv

        def bw_infer(g):
            red = (0, 2, 3)
            return (g * gv * inv if x.requires_grad else None,
                    (g * xh).sum(axis=red) if gamma.requires_grad else None,
                    g.sum(axis=red) if beta.requires_grad else None)

        return Node.from_op(out, (x, gamma, beta), bw_infer, "batch_norm")

    m = n * h * w
    if m < 2:
        raise NumericError("batch_norm in train mode needs at least 2 values per channel")
    mu = xv.mean(axis=(0, 2, 3), keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gv + bv
    unbiased = var.reshape(c) * (m / (m - 1))
    stats.mean[...] = momentum * stats.mean + (1 - momentum) * mu.reshape(c)
    stats.var[...] = momentum * stats.var + (1 - momentum) * unbiased

    def bw(g):
        red = (0, 2, 3)
        gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gb = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gv
            gx = inv * (dxhat - dxhat.mean(axis=red, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=red, keepdims=True))
        return gx, gg, gb

    return Node.from_op(out, (x, gamma, beta), bw, "batch_norm")


# ---------------------------------------------------------------- losses

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Node, onehot) -> Node:
    """Cross-entropy between softmax(logits) and one-hot rows, summed over the batch."""
    onehot = np.asarray(onehot, dtype=logits.dtype)
    if logits.ndim != 2 or onehot.shape != logits.shape:
        raise ConfigError(f"logits {logits.shape} and targets {onehot.shape} must be matching [N, K]")
    if not (np.isin(onehot, (0, 1)).all() and np.all(onehot.sum(axis=1) == 1)):
        raise ConfigError("targets must be one-hot rows")
    lv = logits.value
    shifted = lv - lv.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -(onehot * logp).sum()
    probs = np.exp(logp)
    return Node.from_op(np.asarray(loss, dtype=lv.dtype), (logits,),
                        lambda g: (g * (probs - onehot),), "softmax_cross_entropy")
