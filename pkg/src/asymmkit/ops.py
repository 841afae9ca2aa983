"""Forward and backward kernels for the primitive layers.

Convolutions are computed as a sum over kernel offsets: for each (a, b) in
the k x k window the shifted input slice is contracted with ``W[:, :, a, b]``
over the input channels and accumulated into a zero-initialised output in
row-major offset order.  Grouped convolutions run that same kernel once per
group, and the depthwise fast path reproduces its arithmetic exactly (with one
input channel per group the contraction is a single product), so a grouped
result is bitwise equal to the concatenation of per-group convolutions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import TensorError, check_tensor, _debug

ACTIVATIONS = ("relu", "hswish", "hsigmoid")


@dataclass(frozen=True)
class ConvParams:
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    padding: Optional[int] = None  # None -> kernel // 2
    groups: int = 1

    def __post_init__(self):
        if self.padding is None:
            object.__setattr__(self, "padding", self.kernel // 2)
        for name in ("in_channels", "out_channels", "kernel", "stride", "groups"):
            if getattr(self, name) < 1:
                raise TensorError(f"ConvParams.{name} must be >= 1")
        if self.padding < 0:
            raise TensorError("ConvParams.padding must be >= 0")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise TensorError(
                f"channels ({self.in_channels}, {self.out_channels}) not divisible "
                f"by groups={self.groups}"
            )

    @classmethod
    def depthwise(cls, channels: int, kernel: int, stride: int = 1) -> "ConvParams":
        return cls(channels, channels, kernel, stride, groups=channels)

    @classmethod
    def pointwise(cls, in_channels: int, out_channels: int) -> "ConvParams":
        return cls(in_channels, out_channels, 1, 1)

    @property
    def is_depthwise(self) -> bool:
        return self.groups > 1 and self.groups == self.in_channels == self.out_channels

    @property
    def is_pointwise(self) -> bool:
        return self.kernel == 1 and self.groups == 1

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)

    def out_size(self, size: int) -> int:
        return (size + 2 * self.padding - self.kernel) // self.stride + 1


def _check_conv(x: np.ndarray, w: np.ndarray, p: ConvParams) -> tuple[int, int]:
    check_tensor(x, "x")
    if x.shape[1] != p.in_channels:
        raise TensorError(f"conv: input has {x.shape[1]} channels, params say {p.in_channels}")
    if w.shape != p.weight_shape:
        raise TensorError(f"conv: weight shape {w.shape}, expected {p.weight_shape}")
    if w.dtype != x.dtype:
        raise TensorError(f"conv: weight dtype {w.dtype} != input dtype {x.dtype}")
    ho, wo = p.out_size(x.shape[2]), p.out_size(x.shape[3])
    if ho < 1 or wo < 1:
        raise TensorError(f"conv: empty output for input {x.shape} with {p}")
    return ho, wo


def _pad_cnhw(x: np.ndarray, pad: int) -> np.ndarray:
    """(n, c, h, w) -> zero-padded (c, n, h + 2pad, w + 2pad)."""
    xt = x.transpose(1, 0, 2, 3)
    if pad:
        xt = np.pad(xt, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return xt


def _window(xp: np.ndarray, a: int, b: int, s: int, ho: int, wo: int) -> np.ndarray:
    return xp[:, :, a:a + s * (ho - 1) + 1:s, b:b + s * (wo - 1) + 1:s]


def _dense_forward(xp, w, s, ho, wo):
    # xp: (C, N, Hp, Wp); returns (O, N, ho, wo)
    c, n = xp.shape[:2]
    o, _, k, _ = w.shape
    out = np.zeros((o, n * ho * wo), dtype=xp.dtype)
    for a in range(k):
        for b in range(k):
            cols = _window(xp, a, b, s, ho, wo).reshape(c, -1)
            out += w[:, :, a, b] @ cols
    return out.reshape(o, n, ho, wo)


def _depthwise_forward(xp, w, s, ho, wo):
    c, n = xp.shape[:2]
    k = w.shape[2]
    out = np.zeros((c, n, ho, wo), dtype=xp.dtype)
    for a in range(k):
        for b in range(k):
            out += w[:, 0, a, b][:, None, None, None] * _window(xp, a, b, s, ho, wo)
    return out


def conv2d_forward(x: np.ndarray, w: np.ndarray, p: ConvParams) -> np.ndarray:
    """Bias-free 2-D convolution of an NCHW tensor."""
    ho, wo = _check_conv(x, w, p)
    xp = _pad_cnhw(x, p.padding)
    g = p.groups
    if g == 1:
        out = _dense_forward(xp, w, p.stride, ho, wo)
    elif p.in_channels == g and p.out_channels == g:
        out = _depthwise_forward(xp, w, p.stride, ho, wo)
    else:
        cg, og = p.in_channels // g, p.out_channels // g
        out = np.concatenate(
            [_dense_forward(xp[i * cg:(i + 1) * cg], w[i * og:(i + 1) * og], p.stride, ho, wo)
             for i in range(g)],
            axis=0,
        )
    return _debug(np.ascontiguousarray(out.transpose(1, 0, 2, 3)), "conv2d_forward")


def _dense_backward(xp, w, gt, s, ho, wo):
    c = xp.shape[0]
    o, _, k, _ = w.shape
    g2 = gt.reshape(o, -1)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for a in range(k):
        for b in range(k):
            win = _window(xp, a, b, s, ho, wo)
            gw[:, :, a, b] = g2 @ win.reshape(c, -1).T
            _window(gxp, a, b, s, ho, wo)[...] += (w[:, :, a, b].T @ g2).reshape(win.shape)
    return gxp, gw


def _depthwise_backward(xp, w, gt, s, ho, wo):
    k = w.shape[2]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for a in range(k):
        for b in range(k):
            gw[:, 0, a, b] = np.einsum("cnhw,cnhw->c", gt, _window(xp, a, b, s, ho, wo))
            _window(gxp, a, b, s, ho, wo)[...] += w[:, 0, a, b][:, None, None, None] * gt
    return gxp, gw


def conv2d_backward(x: np.ndarray, w: np.ndarray, p: ConvParams, grad_out: np.ndarray):
    """Gradients ``(grad_x, grad_w)`` of :func:`conv2d_forward`."""
    ho, wo = _check_conv(x, w, p)
    expected = (x.shape[0], p.out_channels, ho, wo)
    if grad_out.shape != expected:
        raise TensorError(f"conv backward: grad_out {grad_out.shape}, expected {expected}")
    xp = _pad_cnhw(x, p.padding)
    gt = grad_out.transpose(1, 0, 2, 3)
    g = p.groups
    if g == 1:
        gxp, gw = _dense_backward(xp, w, gt, p.stride, ho, wo)
    elif p.in_channels == g and p.out_channels == g:
        gxp, gw = _depthwise_backward(xp, w, gt, p.stride, ho, wo)
    else:
        cg, og = p.in_channels // g, p.out_channels // g
        parts = [
            _dense_backward(xp[i * cg:(i + 1) * cg], w[i * og:(i + 1) * og],
                            gt[i * og:(i + 1) * og], p.stride, ho, wo)
            for i in range(g)
        ]
        gxp = np.concatenate([gp for gp, _ in parts], axis=0)
        gw = np.concatenate([gwi for _, gwi in parts], axis=0)
    pad = p.padding
    h, wd = x.shape[2:]
    gx = gxp[:, :, pad:pad + h, pad:pad + wd].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(gx), gw


# ---------------------------------------------------------------- batch norm


@dataclass
class BatchNormState:
    """Per-channel affine parameters plus running statistics.

    ``running_mean`` and ``running_var`` are updated in place during
    train-mode forwards as ``momentum * running + (1 - momentum) * batch``.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64, **kw) -> "BatchNormState":
        return cls(
            np.ones(channels, dtype), np.zeros(channels, dtype),
            np.zeros(channels, dtype), np.ones(channels, dtype), **kw,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass
class BatchNormCache:
    mode: str
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray = field(repr=False)


def batchnorm_forward(x: np.ndarray, state: BatchNormState, mode: str = "train"):
    """Returns ``(y, cache)``; in train mode also updates running buffers."""
    check_tensor(x)
    if x.shape[1] != state.channels:
        raise TensorError(f"batchnorm: {x.shape[1]} channels, state has {state.channels}")
    if mode == "train":
        n, _, h, w = x.shape
        if n * h * w < 2:
            raise TensorError("batchnorm: train mode needs at least 2 values per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean[...] = m * state.running_mean + (1 - m) * mean
        state.running_var[...] = m * state.running_var + (1 - m) * var
    elif mode == "infer":
        mean, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = xhat * state.gamma[None, :, None, None] + state.beta[None, :, None, None]
    return _debug(y, "batchnorm_forward"), BatchNormCache(mode, xhat, inv_std, state.gamma)


def batchnorm_backward(cache: BatchNormCache, grad_out: np.ndarray):
    """Gradients ``(grad_x, grad_gamma, grad_beta)``."""
    g = grad_out
    ggamma = np.einsum("nchw,nchw->c", g, cache.xhat)
    gbeta = g.sum(axis=(0, 2, 3))
    scale = (cache.gamma * cache.inv_std)[None, :, None, None]
    if cache.mode == "infer":
        return g * scale, ggamma, gbeta
    m = g.shape[0] * g.shape[2] * g.shape[3]
    gx = scale * (g - gbeta[None, :, None, None] / m
                  - cache.xhat * (ggamma / m)[None, :, None, None])
    return gx, ggamma, gbeta


# ---------------------------------------------------------------- activations


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "hsigmoid":
        return np.clip(x + 3, 0, 6) / 6
    if kind == "hswish":
        return x * (np.clip(x + 3, 0, 6) / 6)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(x: np.ndarray, kind: str, grad_out: np.ndarray) -> np.ndarray:
    # Kinks take the zero-slope side: relu'(0) = 0, hsigmoid' = 0 at x = +-3.
    if kind == "relu":
        return grad_out * (x > 0)
    inside = (x > -3) & (x < 3)
    if kind == "hsigmoid":
        return grad_out * inside / 6
    if kind == "hswish":
        d = np.where(inside, (2 * x + 3) / 6, (x >= 3).astype(x.dtype))
        return grad_out * d
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- squeeze-excite


def _se_parts(x, reduce_w, expand_w):
    check_tensor(x)
    n, c = x.shape[:2]
    mid = reduce_w.shape[0]
    if reduce_w.shape != (mid, c, 1, 1) or expand_w.shape != (c, mid, 1, 1):
        raise TensorError(
            f"squeeze_excite: weights {reduce_w.shape}/{expand_w.shape} "
            f"do not fit {c} channels"
        )
    pooled = x.mean(axis=(2, 3))                      # (n, c)
    z = pooled @ reduce_w[:, :, 0, 0].T               # (n, mid)
    a = np.maximum(z, 0)
    u = a @ expand_w[:, :, 0, 0].T                    # (n, c)
    gate = np.clip(u + 3, 0, 6) / 6
    return pooled, z, a, u, gate


def squeeze_excite(x: np.ndarray, reduce_w: np.ndarray, expand_w: np.ndarray) -> np.ndarray:
    """Channel gating: pool, 1x1 reduce, relu, 1x1 expand, hsigmoid, scale."""
    *_, gate = _se_parts(x, reduce_w, expand_w)
    return _debug(x * gate[:, :, None, None], "squeeze_excite")


def squeeze_excite_backward(x, reduce_w, expand_w, grad_out):
    """Gradients ``(grad_x, grad_reduce_w, grad_expand_w)``."""
    pooled, z, a, u, gate = _se_parts(x, reduce_w, expand_w)
    h, w = x.shape[2:]
    g_gate = np.einsum("nchw,nchw->nc", grad_out, x)
    g_u = g_gate * ((u > -3) & (u < 3)) / 6
    g_expand = (g_u.T @ a)[:, :, None, None]
    g_a = g_u @ expand_w[:, :, 0, 0]
    g_z = g_a * (z > 0)
    g_reduce = (g_z.T @ pooled)[:, :, None, None]
    g_pooled = g_z @ reduce_w[:, :, 0, 0]
    gx = grad_out * gate[:, :, None, None] + (g_pooled / (h * w))[:, :, None, None]
    return gx, g_reduce, g_expand


# ---------------------------------------------------------------- loss


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits)
    if logits.ndim == 4:
        logits = logits.reshape(logits.shape[0], -1)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise TensorError(f"labels shape {labels.shape}, expected ({n},)")
    if np.any(labels < 0) or np.any(labels >= k):
        raise TensorError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n
