"""Differentiable operations on :class:`Tensor`.

Only what the encoder/decoder/classifier/canonicalizer stack needs. Every op
computes its forward pass eagerly with numpy and attaches a closure that maps
the output gradient to one gradient per parent.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_node

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


# ---------------------------------------------------------------------------
# elementwise / structural
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return make_node(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        scale = float(b)
        return make_node(a.data * a.data.dtype.type(scale), (a,), lambda g: (g * scale,))
    a, b = _coerce(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), backward)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return make_node(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                     lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return make_node(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                     lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def reshape(x: Tensor, shape) -> Tensor:
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x: Tensor, idx) -> Tensor:
    def backward(g):
        out = np.zeros_like(x.data)
        if _needs_add_at(idx):
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return make_node(x.data[idx], (x,), backward)


def _needs_add_at(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def concat(xs: list[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_node(np.concatenate([t.data for t in xs], axis=axis), xs, backward)


def tile_spatial(z: Tensor, size: int) -> Tensor:
    """(N, C) -> (N, C, size, size) by repetition."""
    if z.ndim != 2:
        raise ValueError(f"tile_spatial expects (N, C), got {z.shape}")
    out = np.ascontiguousarray(np.broadcast_to(z.data[:, :, None, None], z.shape + (size, size)))
    return make_node(out, (z,), lambda g: (g.sum(axis=(2, 3)),))


def row_l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm of each row of an (N, D) tensor."""
    sq = (x.data.astype(np.float64) ** 2).sum(axis=1)
    norms = np.sqrt(sq).astype(x.dtype)

    def backward(g):
        safe = np.where(norms > 0, norms, 1).astype(x.dtype)
        scale = np.where(norms > 0, g / safe, 0)
        return (x.data * scale[:, None],)

    return make_node(norms, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return make_node(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (N, D) @ w (D, K) + b (K,)."""
    out = matmul(x, w)
    return out if b is None else add(out, b)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * 9)


def _col2im(cols: np.ndarray, padded_shape, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add (N*ho*wo, C*9) columns into a padded image."""
    n, c = padded_shape[:2]
    cols = cols.reshape(n, ho, wo, c, 3, 3).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for ki in range(3):
        for kj in range(3):
            out[:, :, ki:ki + span_h:stride, kj:kj + span_w:stride] += cols[:, :, ki, kj]
    return out


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int):
    n, c, h, wd = x.shape
    f = w.shape[0]
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, stride, ho, wo)
    out = cols @ w.reshape(f, -1).T
    return out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2), cols, xp.shape


def _conv_input_grad(g: np.ndarray, w: np.ndarray, padded_shape, stride: int) -> np.ndarray:
    n, f, ho, wo = g.shape
    gm = g.transpose(0, 2, 3, 1).reshape(-1, f)
    dcols = gm @ w.reshape(f, -1)
    dxp = _col2im(dcols, padded_shape, stride, ho, wo)
    return dxp[:, :, 1:-1, 1:-1]


def _check_conv(x: Tensor, w: Tensor, b: Tensor | None, in_axis: int):
    if x.ndim != 4:
        raise ValueError(f"expected (N, C, H, W) input, got {x.shape}")
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ValueError(f"expected a 3x3 kernel, got {w.shape}")
    if w.shape[in_axis] != x.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, kernel expects {w.shape[in_axis]}")
    out_ch = w.shape[1 - in_axis]
    if b is not None and b.shape != (out_ch,):
        raise ValueError(f"bias shape {b.shape} does not match {out_ch} output channels")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """3x3 cross-correlation with zero padding 1; ``w`` is (F, C, 3, 3)."""
    _check_conv(x, w, b, in_axis=1)
    out, cols, padded_shape = _conv_forward(x.data, w.data, stride)
    if b is not None:
        out = out + b.data[None, :, None, None]
    f = w.shape[0]

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        dx = _conv_input_grad(g, w.data, padded_shape, stride) if x.requires_grad else None
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return make_node(np.ascontiguousarray(out), parents, backward)


def conv2d_transpose(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2) -> Tensor:
    """Adjoint of a stride-2, pad-1 3x3 convolution; doubles H and W.

    ``w`` is (C_in, F_out, 3, 3). Equivalent to a transposed convolution with
    padding 1 and output padding 1.
    """
    _check_conv(x, w, b, in_axis=0)
    if stride != 2:
        raise ValueError("conv2d_transpose only supports stride 2 (exact spatial doubling)")
    n, c, h, wd = x.shape
    f = w.shape[1]
    ho, wo = 2 * h, 2 * wd
    padded_shape = (n, f, ho + 2, wo + 2)
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    wm = w.data.reshape(c, f * 9)
    out = _col2im(xm @ wm, padded_shape, stride, h, wd)[:, :, 1:-1, 1:-1]
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (1, 1), (1, 1)))
        gcols = _im2col(gp, stride, h, wd)
        dx = (gcols @ wm.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2) if x.requires_grad else None
        dw = (xm.T @ gcols).reshape(w.shape) if w.requires_grad else None
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return make_node(np.ascontiguousarray(out), parents, backward)


# ---------------------------------------------------------------------------
# normalization, activations, pooling, dropout
# ---------------------------------------------------------------------------

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, mode: str = "train",
                momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel batch norm over (N, H, W).

    In train mode the running buffers are updated in place (unbiased variance,
    as in the common framework convention).
    """
    if x.ndim != 4:
        raise ValueError(f"batchnorm2d expects (N, C, H, W), got {x.shape}")
    c = x.shape[1]
    g4 = gamma.data.reshape(1, c, 1, 1)
    if mode == "eval":
        inv = 1.0 / np.sqrt(running_var + eps)
        scale = (g4 * inv.reshape(1, c, 1, 1)).astype(x.dtype)
        xhat = ((x.data - running_mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)).astype(x.dtype)
        out = xhat * g4 + beta.data.reshape(1, c, 1, 1)

        def backward_eval(g):
            return g * scale, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return make_node(out.astype(x.dtype), (x, gamma, beta), backward_eval)
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    if x.shape[0] < 2:
        raise ValueError("batchnorm2d in train mode needs a batch of at least 2")

    m = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=(0, 2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * g4 + beta.data.reshape(1, c, 1, 1)

    running_mean *= 1 - momentum
    running_mean += momentum * mu.reshape(c)
    running_var *= 1 - momentum
    running_var += momentum * var.reshape(c) * (m / max(m - 1, 1))

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * g4
        dx = inv_std / m * (m * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        return dx, dgamma, dbeta

    return make_node(out.astype(x.dtype), (x, gamma, beta), backward)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    pos = x.data > 0
    factor = np.where(pos, 1.0, slope).astype(x.dtype)
    return make_node(x.data * factor, (x,), lambda g: (g * factor,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_node(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x, 0.1)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {kind!r}")


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping 2x2 max pool; ties go to the first element in row-major order."""
    if window != 2:
        raise ValueError("only 2x2 pooling is supported")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return make_node(out, (x,), backward)


def global_maxpool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C), max over space, gradient to the first argmax."""
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gf = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(gf, arg[..., None], g[..., None], axis=-1)
        return (gf.reshape(x.shape),)

    return make_node(out, (x,), backward)


def dropout(x: Tensor, p: float = 0.5, mode: str = "train", rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if mode == "eval" or p == 0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    return make_node(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse_loss(a: Tensor, b) -> Tensor:
    """Mean of squared differences over every element."""
    b = as_tensor(b, dtype=a.dtype)
    if a.shape != b.shape:
        raise ValueError(f"mse_loss shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    value = np.asarray((diff.astype(np.float64) ** 2).mean(), dtype=a.dtype)

    def backward(g):
        ga = (2.0 / n) * g * diff
        return ga.astype(a.dtype), (-ga).astype(b.dtype)

    return make_node(value, (a, b), backward)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} are incompatible")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    n = labels.size
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    value = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return (((g / n) * d).astype(logits.dtype),)

    return make_node(value, (logits,), backward)
