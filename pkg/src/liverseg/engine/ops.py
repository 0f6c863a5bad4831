"""Differentiable ops: convolution, batch norm, resize, softmax, losses.

All ops consume and produce float64 :class:`Tensor` values, never mutate
their inputs (batch_norm's running-statistics buffers are the one documented
exception), and use a fixed summation order so repeated runs are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import EngineError, Tensor, _op_result

__all__ = [
    "ConvParams", "BatchNormState", "conv2d", "batch_norm", "relu", "add",
    "mul", "scale", "sum_all", "bilinear_resize", "bilinear_array",
    "softmax_channels", "cross_entropy_loss",
]


@dataclass(frozen=True)
class ConvParams:
    """Static description of one 2D convolution."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    dilation: int = 1
    padding: str | tuple[int, int] = "same"

    def __post_init__(self):
        kh, kw = self.kernel
        if kh < 1 or kw < 1 or kh % 2 == 0 or kw % 2 == 0:
            raise EngineError(f"kernel extents must be odd and positive, got {self.kernel}")
        if self.stride not in (1, 2):
            raise EngineError(f"stride must be 1 or 2, got {self.stride}")
        if self.dilation < 1:
            raise EngineError(f"dilation must be >= 1, got {self.dilation}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise EngineError("channel counts must be positive")
        if self.padding != "same":
            ph, pw = self.padding
            if ph < 0 or pw < 0:
                raise EngineError("explicit padding must be non-negative")

    def pad(self) -> tuple[int, int]:
        if self.padding == "same":
            # Odd kernels only, so this is exact: output extent equals
            # input extent at stride 1 for any dilation.
            kh, kw = self.kernel
            return (self.dilation * (kh - 1)) // 2, (self.dilation * (kw - 1)) // 2
        return self.padding

    def out_extent(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        ph, pw = self.pad()
        oh = (h + 2 * ph - self.dilation * (kh - 1) - 1) // self.stride + 1
        ow = (w + 2 * pw - self.dilation * (kw - 1) - 1) // self.stride + 1
        return oh, ow


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None,
           p: ConvParams) -> Tensor:
    """2D convolution via patch gathering and one dense product.

    bias=None omits the bias term entirely (the usual choice when batch
    norm follows, where a bias would be cancelled by mean subtraction).
    """
    if x.ndim != 4:
        raise EngineError(f"conv2d input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    kh, kw = p.kernel
    if c != p.in_channels:
        raise EngineError(f"input has {c} channels, ConvParams expects {p.in_channels}")
    if weight.shape != (p.out_channels, p.in_channels, kh, kw):
        raise EngineError(f"weight shape {weight.shape} does not match {p}")
    if bias is not None and bias.shape != (p.out_channels,):
        raise EngineError(f"bias shape {bias.shape} does not match {p}")

    oh, ow = p.out_extent(h, w)
    if oh < 1 or ow < 1:
        raise EngineError(f"conv2d output extent {(oh, ow)} is not positive")

    ph, pw = p.pad()
    s, d = p.stride, p.dilation
    ekh, ekw = d * (kh - 1) + 1, d * (kw - 1) + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    # All windows, then pick the strided output grid and the dilated taps.
    win = sliding_window_view(xp, (ekh, ekw), axis=(2, 3))
    win = win[:, :, ::s, ::s, ::d, ::d]
    assert win.shape == (n, c, oh, ow, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    wmat = weight.data.reshape(p.out_channels, c * kh * kw)
    y = cols @ wmat.T
    if bias is not None:
        y = y + bias.data
    out = y.reshape(n, oh, ow, p.out_channels).transpose(0, 3, 1, 2)

    need_x, need_w = x.requires_grad, weight.requires_grad
    need_b = bias is not None and bias.requires_grad

    def backward_fn(g: np.ndarray):
        g_cols = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, p.out_channels)
        dw = (g_cols.T @ cols).reshape(weight.shape) if need_w else None
        db = g_cols.sum(axis=0) if need_b else None
        dx = None
        if need_x:
            dcols = (g_cols @ wmat).reshape(n, oh, ow, c, kh, kw)
            dcols = dcols.transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                hi = i * d
                for j in range(kw):
                    wj = j * d
                    dxp[:, :, hi:hi + s * (oh - 1) + 1:s,
                        wj:wj + s * (ow - 1) + 1:s] += dcols[:, :, :, :, i, j]
            dx = dxp[:, :, ph:ph + h, pw:pw + w]
        if bias is None:
            return dx, dw
        return dx, dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _op_result(out, parents, backward_fn)


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer (per-channel)."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def for_channels(cls, c: int, momentum: float = 0.1) -> "BatchNormState":
        return cls(np.zeros(c), np.ones(c), momentum)


# Fixed constants of the normalization, not tunables.
BN_EPS = 1e-5


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               mode: str, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization over the batch and spatial axes.

    Train mode normalizes with the current batch's biased moments and folds
    them into ``state`` (the only mutation in the engine); eval mode
    normalizes with the stored running statistics.
    """
    if mode not in ("train", "eval"):
        raise EngineError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim != 4:
        raise EngineError(f"batch_norm input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise EngineError("gamma/beta must have one entry per channel")
    if state.mean.shape != (c,) or state.var.shape != (c,):
        raise EngineError("running statistics do not match channel count")

    m = n * h * w
    if mode == "train":
        if m == 0:
            raise EngineError("batch_norm train mode needs a non-empty batch")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))  # biased, matches the normalizer
        mom = state.momentum
        state.mean = (1.0 - mom) * state.mean + mom * mean
        state.var = (1.0 - mom) * state.var + mom * var
    else:
        mean = state.mean.copy()
        var = state.var.copy()

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    if mode == "train":

        def backward_fn(g: np.ndarray):
            dbeta = g.sum(axis=(0, 2, 3))
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dxhat = g * gamma.data[None, :, None, None]
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            return dx, dgamma, dbeta

    else:

        def backward_fn(g: np.ndarray):
            dbeta = g.sum(axis=(0, 2, 3))
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dx = g * (gamma.data * inv)[None, :, None, None]
            return dx, dgamma, dbeta

    return _op_result(out, (x, gamma, beta), backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward_fn(g):
        return (g * mask,)

    return _op_result(np.where(mask, x.data, 0.0), (x,), backward_fn)


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise EngineError(f"add shapes differ: {x.shape} vs {y.shape}")

    def backward_fn(g):
        return g, g

    return _op_result(x.data + y.data, (x, y), backward_fn)


def mul(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise EngineError(f"mul shapes differ: {x.shape} vs {y.shape}")

    def backward_fn(g):
        return g * y.data, g * x.data

    return _op_result(x.data * y.data, (x, y), backward_fn)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    if not np.isfinite(c):
        raise EngineError("scale factor must be finite")

    def backward_fn(g):
        return (g * c,)

    return _op_result(x.data * c, (x,), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    def backward_fn(g):
        return (np.full(x.shape, float(g)),)

    return _op_result(x.data.sum(), (x,), backward_fn)


def _axis_plan(n_in: int, n_out: int):
    """Half-pixel-center sampling plan: (left index, right index, right weight).

    Returns None when the axis keeps its extent; callers skip the pass so an
    identity resize is bit-exact.
    """
    if n_out == n_in:
        return None
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, float(n_in - 1))
    i0 = np.minimum(pos.astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, pos - i0


def _lerp_take(a: np.ndarray, plan, axis: int) -> np.ndarray:
    i0, i1, w1 = plan
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i1, axis=axis)
    shape = [1] * a.ndim
    shape[axis] = -1
    # lo + w*(hi-lo) rather than (1-w)*lo + w*hi: keeps constant runs and
    # w=0 taps bit-exact.
    return lo + w1.reshape(shape) * (hi - lo)


def bilinear_array(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the trailing two axes with half-pixel-center bilinear sampling."""
    if out_h < 1 or out_w < 1:
        raise EngineError("resize target extents must be positive")
    plan_h = _axis_plan(a.shape[-2], out_h)
    plan_w = _axis_plan(a.shape[-1], out_w)
    out = np.asarray(a, dtype=np.float64)
    if plan_h is None and plan_w is None:
        return out.copy()
    if plan_h is not None:
        out = _lerp_take(out, plan_h, out.ndim - 2)
    if plan_w is not None:
        out = _lerp_take(out, plan_w, out.ndim - 1)
    return out


def _scatter_axis(g: np.ndarray, plan, axis: int, n_in: int) -> np.ndarray:
    i0, i1, w1 = plan
    shape = [1] * g.ndim
    shape[axis] = -1
    w1 = w1.reshape(shape)
    out_shape = list(g.shape)
    out_shape[axis] = n_in
    dx = np.zeros(out_shape)
    idx0 = [slice(None)] * g.ndim
    idx1 = [slice(None)] * g.ndim
    idx0[axis] = i0
    idx1[axis] = i1
    np.add.at(dx, tuple(idx0), g * (1.0 - w1))
    np.add.at(dx, tuple(idx1), g * w1)
    return dx


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Differentiable bilinear resize of an NCHW tensor's spatial axes."""
    if x.ndim != 4:
        raise EngineError(f"bilinear_resize input must be NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise EngineError("resize target extents must be positive")
    plan_h = _axis_plan(h, out_h)
    plan_w = _axis_plan(w, out_w)

    out = x.data
    if plan_h is not None:
        out = _lerp_take(out, plan_h, 2)
    if plan_w is not None:
        out = _lerp_take(out, plan_w, 3)
    if plan_h is None and plan_w is None:
        out = out.copy()

    def backward_fn(g):
        dx = g
        if plan_w is not None:
            dx = _scatter_axis(dx, plan_w, 3, w)
        if plan_h is not None:
            dx = _scatter_axis(dx, plan_h, 2, h)
        return (dx,)

    return _op_result(out, (x,), backward_fn)


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax across the channel axis of an NCHW tensor."""
    if x.ndim != 4:
        raise EngineError(f"softmax_channels input must be NCHW, got {x.shape}")
    if x.shape[1] < 2:
        raise EngineError("softmax needs at least two channels")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        inner = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - inner),)

    return _op_result(p, (x,), backward_fn)


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-pixel negative log-likelihood of integer class labels.

    ``labels`` is a plain integer array of shape (N, H, W) with values in
    [0, C); the softmax is folded in for numerical stability.
    """
    if logits.ndim != 4:
        raise EngineError(f"cross_entropy logits must be NCHW, got {logits.shape}")
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise EngineError("labels must be integers")
    if labels.shape != (n, h, w):
        raise EngineError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise EngineError(f"labels must lie in [0, {c})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    picked = np.take_along_axis(logp, labels[:, None, :, :], axis=1)[:, 0]
    count = n * h * w
    loss = -picked.sum() / count

    def backward_fn(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, labels[:, None, :, :], 1.0, axis=1)
        return ((p - onehot) * (float(g) / count),)

    return _op_result(np.float64(loss), (logits,), backward_fn)
