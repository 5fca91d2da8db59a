"""Neural network layers over the autodiff tensor core.

Convolution uses an im2col + GEMM formulation; the matching col2im scatter
drives the backward pass. Everything operates on NCHW tensors.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .tensor import Parameter, ShapeMismatchError, Tensor, default_dtype

__all__ = [
    "Conv2d",
    "BatchNorm2d",
    "Linear",
    "conv2d",
    "batchnorm2d",
    "maxpool2d",
    "bilinear_upsample_x2",
    "resize_bilinear",
    "spatial_softmax",
    "l2_normalize",
    "cross_entropy",
    "linear",
    "global_avg_pool",
    "he_init",
]


def he_init(shape, seed: int) -> Tensor:
    """Gaussian init with std sqrt(2 / fan_in), deterministic per seed."""
    shape = tuple(int(s) for s in shape)
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    rng = np.random.default_rng(seed)
    data = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    return Tensor(data)


def _require_nchw(x: Tensor, name: str) -> tuple:
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"{name} expects an N x C x H x W tensor, got shape {x.shape}")
    return x.data.shape


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (square kernel). Output extent: floor((H + 2p - k)/s) + 1."""
    n, c, h, w = _require_nchw(x, "conv2d")
    c_out, c_in, kh, kw = weight.data.shape
    if kh != kw:
        raise ValueError("conv2d supports square kernels only")
    if c != c_in:
        raise ShapeMismatchError(f"conv2d input has {c} channels, weight expects {c_in}")
    k, s, p = kh, int(stride), int(padding)
    h_out = (h + 2 * p - k) // s + 1
    w_out = (w + 2 * p - k) // s + 1
    if h_out < 1 or w_out < 1:
        raise ShapeMismatchError(f"conv2d output would be empty for input {h}x{w}, k={k}, s={s}, p={p}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    # [n, h_out, w_out, c*k*k] so each output position is one GEMM row
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, h_out * w_out, c * k * k)
    wmat = weight.data.reshape(c_out, -1)
    out = cols @ wmat.T + bias.data
    out = out.transpose(0, 2, 1).reshape(n, c_out, h_out, w_out)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n, h_out * w_out, c_out)
        gb = g.sum(axis=(0, 2, 3))
        gw = np.matmul(gmat.transpose(0, 2, 1), cols).sum(axis=0).reshape(weight.data.shape)
        gcols = (gmat @ wmat).reshape(n, h_out, w_out, c, k, k).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=g.dtype)
        for di in range(k):
            for dj in range(k):
                gxp[:, :, di : di + s * h_out : s, dj : dj + s * w_out : s] += gcols[:, :, :, :, di, dj]
        gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
        return gx, gw, gb

    return Tensor._result(out, (x, weight, bias), backward)


class Conv2d:
    """Convolution layer holding weight [C_out x C_in x k x k] and bias [C_out]."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, seed: int = 0):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(he_init((out_channels, in_channels, kernel_size, kernel_size), seed))
        self.bias = Parameter(np.zeros(out_channels, dtype=default_dtype()))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def named_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


def batchnorm2d(x: Tensor, bn: "BatchNorm2d", train: bool = False) -> Tensor:
    """Per-channel batch normalization.

    Train mode normalizes by batch statistics (biased variance) and updates the
    running stats with the layer momentum; eval mode normalizes by the stored
    running stats. `eps` keeps degenerate zero-variance channels finite.
    """
    n, c, h, w = _require_nchw(x, "batchnorm2d")
    if c != bn.num_features:
        raise ShapeMismatchError(f"batchnorm2d input has {c} channels, layer expects {bn.num_features}")
    eps = bn.eps
    axes = (0, 2, 3)
    count = n * h * w
    if train:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = bn.momentum
        unbiased = var * count / (count - 1) if count > 1 else var
        # in place so external references to the stat arrays stay valid
        bn.running_mean *= 1 - m
        bn.running_mean += m * mu
        bn.running_var *= 1 - m
        bn.running_var += m * unbiased
    else:
        mu = bn.running_mean
        var = bn.running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = bn.gamma.data[None, :, None, None] * xhat + bn.beta.data[None, :, None, None]
    gamma = bn.gamma

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        scale = (gamma.data * inv)[None, :, None, None]
        if train:
            dx = scale * (g - dbeta[None, :, None, None] / count
                          - xhat * dgamma[None, :, None, None] / count)
        else:
            dx = scale * g
        return dx, dgamma, dbeta

    return Tensor._result(out, (x, bn.gamma, bn.beta), backward)


class BatchNorm2d:
    """Batch normalization layer with learnable affine and running statistics."""

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(num_features, dtype=default_dtype()))
        self.beta = Parameter(np.zeros(num_features, dtype=default_dtype()))
        self.running_mean = np.zeros(num_features, dtype=default_dtype())
        self.running_var = np.ones(num_features, dtype=default_dtype())

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return batchnorm2d(x, self, train)

    def named_parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def named_buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


def maxpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k max filter (stride = k). Extents must divide by k."""
    n, c, h, w = _require_nchw(x, "maxpool2d")
    if h % k or w % k:
        raise ShapeMismatchError(f"maxpool2d window {k} does not divide extents {h}x{w}")
    ho, wo = h // k, w // k
    tiles = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = tiles.argmax(axis=-1)  # first maximum in row-major window order
    out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gt = np.zeros_like(tiles)
        np.put_along_axis(gt, idx[..., None], g[..., None], axis=-1)
        return (gt.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return Tensor._result(out, (x,), backward)


def _interp_axis(n_in: int, n_out: int):
    """Half-pixel-center sampling vectors: source index floor, neighbor, weights."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = np.minimum(src - i0, 1.0)
    w0 = 1.0 - w1
    return i0, i1, w0, w1


def _resize_bilinear_array(x: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    *lead, h, w = x.shape
    i0, i1, wr0, wr1 = _interp_axis(h, h_out)
    j0, j1, wc0, wc1 = _interp_axis(w, w_out)
    wr0 = wr0.astype(x.dtype)
    wr1 = wr1.astype(x.dtype)
    wc0 = wc0.astype(x.dtype)
    wc1 = wc1.astype(x.dtype)
    rows = x[..., i0, :] * wr0[:, None] + x[..., i1, :] * wr1[:, None]
    return rows[..., j0] * wc0 + rows[..., j1] * wc1


def resize_bilinear(x: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    """Bilinear resize of a [... x H x W] array (no autodiff; used for data prep)."""
    return _resize_bilinear_array(np.asarray(x), h_out, w_out)


def bilinear_upsample_x2(x: Tensor) -> Tensor:
    """Double both spatial extents by bilinear interpolation (half-pixel centers)."""
    n, c, h, w = _require_nchw(x, "bilinear_upsample_x2")
    ho, wo = h * 2, w * 2
    i0, i1, wr0, wr1 = _interp_axis(h, ho)
    j0, j1, wc0, wc1 = _interp_axis(w, wo)
    dt = x.data.dtype
    wr0, wr1, wc0, wc1 = (v.astype(dt) for v in (wr0, wr1, wc0, wc1))
    rows = x.data[:, :, i0, :] * wr0[:, None] + x.data[:, :, i1, :] * wr1[:, None]
    out = rows[:, :, :, j0] * wc0 + rows[:, :, :, j1] * wc1

    def backward(g):
        # transpose of the two gathers: scatter-add along W then along H
        grows_t = np.zeros((w, n, c, ho), dtype=g.dtype)
        np.add.at(grows_t, j0, (g * wc0).transpose(3, 0, 1, 2))
        np.add.at(grows_t, j1, (g * wc1).transpose(3, 0, 1, 2))
        grows = grows_t.transpose(1, 2, 3, 0)
        gx_t = np.zeros((h, n, c, w), dtype=g.dtype)
        np.add.at(gx_t, i0, (grows * wr0[:, None]).transpose(2, 0, 1, 3))
        np.add.at(gx_t, i1, (grows * wr1[:, None]).transpose(2, 0, 1, 3))
        return (gx_t.transpose(1, 2, 0, 3),)

    return Tensor._result(out, (x,), backward)


def spatial_softmax(e: Tensor) -> Tensor:
    """Softmax over all h*w positions of a single-channel map, per sample."""
    n, c, h, w = _require_nchw(e, "spatial_softmax")
    if c != 1:
        raise ShapeMismatchError(f"spatial_softmax expects a single-channel map, got {c} channels")
    flat = e.data.reshape(n, -1)
    z = flat - flat.max(axis=1, keepdims=True)
    ez = np.exp(z)
    s = ez / ez.sum(axis=1, keepdims=True)
    out = s.reshape(e.data.shape)

    def backward(g):
        gf = g.reshape(n, -1)
        dot = (gf * s).sum(axis=1, keepdims=True)
        return ((s * (gf - dot)).reshape(e.data.shape),)

    return Tensor._result(out, (e,), backward)


def l2_normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale to unit Euclidean norm per sample: v / max(||v||, eps).

    For rank-1 input the whole vector is one sample; otherwise the norm is
    taken over all non-batch dimensions.
    """
    axes = tuple(range(1, v.data.ndim)) if v.data.ndim > 1 else (0,)
    norm = np.sqrt((v.data * v.data).sum(axis=axes, keepdims=True))
    denom = np.maximum(norm, eps)
    out = v.data / denom

    def backward(g):
        active = norm > eps
        corr = v.data * (g * v.data).sum(axis=axes, keepdims=True) / (denom ** 3)
        return (g / denom - np.where(active, corr, 0.0),)

    return Tensor._result(out, (v,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Summed negative log-likelihood with a fused, stable log-softmax.

    Returns the batch sum; divide by N for the per-sample mean.
    """
    if logits.data.ndim != 2:
        raise ShapeMismatchError(f"cross_entropy expects N x K logits, got shape {logits.shape}")
    n, k = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeMismatchError(f"labels shape {labels.shape} does not match batch size {n}")
    labels = labels.astype(np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=1, keepdims=True)) + m
    nll = lse[:, 0] - z[np.arange(n), labels]
    out = np.asarray(nll.sum(), dtype=z.dtype)

    def backward(g):
        p = np.exp(z - lse)
        p[np.arange(n), labels] -= 1.0
        return (p * g,)

    return Tensor._result(out, (logits,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ W^T + b with W of shape [out_features x in_features]."""
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"linear expects N x C input, got shape {x.shape}")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ShapeMismatchError(
            f"linear input width {x.data.shape[1]} does not match weight {weight.data.shape}")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return Tensor._result(out, (x, weight, bias), backward)


class Linear:
    def __init__(self, in_features: int, out_features: int, seed: int = 0):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(he_init((out_features, in_features), seed))
        self.bias = Parameter(np.zeros(out_features, dtype=default_dtype()))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def named_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over spatial positions: [N x C x H x W] -> [N x C]."""
    n, c, h, w = _require_nchw(x, "global_avg_pool")
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape),)

    return Tensor._result(out, (x,), backward)
