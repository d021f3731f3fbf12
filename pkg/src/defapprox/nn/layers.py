"""Layer definitions, emulated forward kernels and exact backward rules.

Tensors are numpy arrays in NCHW (images) or NF (vectors) layout.

Two forward flavours exist. The *emulated* kernels route every scalar
product through a ``MulBackend`` and accumulate each dot product in
ascending input index with binary32 adds, so results are bit-reproducible
and independent of batch partitioning. The *fast* kernels use BLAS in a
caller-chosen dtype and back training and exact gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractError
from .backends import MulBackend

# max scalar products materialized per backend call
PRODUCT_BUDGET = 1 << 21


@dataclass(frozen=True)
class Conv2d:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    pad: int = 0

    has_weights = True

    def __post_init__(self):
        if min(self.in_ch, self.out_ch, self.kernel, self.stride) < 1 or self.pad < 0:
            raise ContractError(f"invalid Conv2d parameters: {self}")

    def weight_shapes(self):
        return (self.out_ch, self.in_ch, self.kernel, self.kernel), (self.out_ch,)

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_ch:
            raise ContractError(f"Conv2d expects ({self.in_ch}, H, W) input, got {shape}")
        h = (shape[1] + 2 * self.pad - self.kernel) // self.stride + 1
        w = (shape[2] + 2 * self.pad - self.kernel) // self.stride + 1
        if h < 1 or w < 1:
            raise ContractError(f"input {shape} too small for kernel {self.kernel}")
        return (self.out_ch, h, w)


@dataclass(frozen=True)
class MaxPool:
    kernel: int
    stride: int = 0  # 0 means stride == kernel

    has_weights = False

    @property
    def step(self):
        return self.stride or self.kernel

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ContractError(f"MaxPool expects (C, H, W) input, got {shape}")
        h = (shape[1] - self.kernel) // self.step + 1
        w = (shape[2] - self.kernel) // self.step + 1
        if h < 1 or w < 1:
            raise ContractError(f"input {shape} too small for pool {self.kernel}")
        return (shape[0], h, w)


@dataclass(frozen=True)
class ReLU:
    has_weights = False

    def output_shape(self, shape):
        return tuple(shape)


@dataclass(frozen=True)
class Flatten:
    has_weights = False

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int

    has_weights = True

    def weight_shapes(self):
        return (self.out_features, self.in_features), (self.out_features,)

    def output_shape(self, shape):
        if tuple(shape) != (self.in_features,):
            raise ContractError(f"Dense expects ({self.in_features},) input, got {shape}")
        return (self.out_features,)


LAYER_TYPES = {cls.__name__: cls for cls in (Conv2d, MaxPool, ReLU, Flatten, Dense)}


def _im2col(x, kernel, stride, pad):
    """(N, C, H, W) -> (N, L, C*k*k) patches, K ordered as (c, kh, kw)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * kernel * kernel)
    return cols, ho, wo


def _ordered_sum(products):
    """Sum over axis 0 one term at a time, in ascending index order."""
    acc = products[0].copy()
    for k in range(1, products.shape[0]):
        acc += products[k]
    return acc


def _emulated_contract(w_k, x_k, backend, batch_axis):
    """Products of weights (K, ...) and activations (K, N, ...) summed over K.

    Chunks the batch axis so no call materializes more than
    ``PRODUCT_BUDGET`` products.
    """
    n = x_k.shape[batch_axis]
    per_item = int(np.prod(np.broadcast_shapes(w_k.shape, x_k.shape))) // max(n, 1)
    chunk = max(1, PRODUCT_BUDGET // max(per_item, 1))
    outs = []
    for start in range(0, n, chunk):
        xs = x_k[:, start : start + chunk]
        prods = backend.multiply(w_k, xs)
        outs.append(_ordered_sum(np.asarray(prods, dtype=np.float32)))
    return np.concatenate(outs, axis=0) if outs else np.zeros((0,), np.float32)


def conv2d_forward(x, weight, bias, stride=1, pad=0, backend=MulBackend.EXACT):
    x = np.asarray(x, dtype=np.float32)
    weight = np.asarray(weight, dtype=np.float32)
    bias = np.asarray(bias, dtype=np.float32)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1] or weight.shape[2] != weight.shape[3]:
        raise ContractError(f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ContractError(f"conv2d bias shape {bias.shape} != ({weight.shape[0]},)")
    out_ch, _, k, _ = weight.shape
    cols, ho, wo = _im2col(x, k, stride, pad)
    w_k = weight.reshape(out_ch, -1).T[:, None, :, None]  # (K, 1, O, 1)
    x_k = cols.transpose(2, 0, 1)[:, :, None, :]  # (K, N, 1, L)
    acc = _emulated_contract(w_k, x_k, backend, batch_axis=1)  # (N, O, L)
    out = acc + bias[None, :, None]
    return out.reshape(x.shape[0], out_ch, ho, wo)


def dense_forward(x, weight, bias, backend=MulBackend.EXACT):
    x = np.asarray(x, dtype=np.float32)
    weight = np.asarray(weight, dtype=np.float32)
    bias = np.asarray(bias, dtype=np.float32)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ContractError(f"dense shape mismatch: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    w_k = weight.T[:, None, :]  # (I, 1, O)
    x_k = x.T[:, :, None]  # (I, N, 1)
    acc = _emulated_contract(w_k, x_k, backend, batch_axis=1)  # (N, O)
    return acc + bias[None, :]


def _pool_windows(x, kernel, step):
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::step, ::step]
    return win.reshape(*win.shape[:4], kernel * kernel)


def maxpool_forward(x, kernel, stride=0):
    x = np.asarray(x)
    if x.ndim != 4:
        raise ContractError(f"maxpool expects NCHW input, got shape {x.shape}")
    step = stride or kernel
    if x.shape[2] < kernel or x.shape[3] < kernel:
        raise ContractError(f"input {x.shape} too small for pool {kernel}")
    return _pool_windows(x, kernel, step).max(axis=-1)


def relu_forward(x):
    x = np.asarray(x)
    return np.where(x > 0, x, np.zeros_like(x))


def softmax(logits):
    """Row-wise softmax with max subtraction; computed in float64."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# fast exact kernels (BLAS) and their backward rules


def fast_forward(layer, x, params):
    if isinstance(layer, Conv2d):
        w, b = params
        cols, ho, wo = _im2col(x, layer.kernel, layer.stride, layer.pad)
        out = cols @ w.reshape(layer.out_ch, -1).T + b  # (N, L, O)
        return out.transpose(0, 2, 1).reshape(x.shape[0], layer.out_ch, ho, wo)
    if isinstance(layer, Dense):
        w, b = params
        return x @ w.T + b
    return forward_parameterless(layer, x)


def forward_parameterless(layer, x):
    if isinstance(layer, MaxPool):
        return maxpool_forward(x, layer.kernel, layer.step)
    if isinstance(layer, ReLU):
        return relu_forward(x)
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1)
    raise TypeError(f"unknown layer {layer!r}")


def _col2im(dcols, x_shape, kernel, stride, pad, ho, wo):
    n, c, h, w = x_shape
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    d = dcols.reshape(n, ho, wo, c, kernel, kernel)
    for i in range(kernel):
        for j in range(kernel):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return dx


def backward(layer, x, dy, params, need_params=True):
    """Exact backward rule for one layer evaluated at input ``x``.

    Returns ``(dx, param_grads)``; ``param_grads`` is ``None`` for layers
    without weights or when ``need_params`` is false.
    """
    if isinstance(layer, Conv2d):
        w, _ = params
        cols, ho, wo = _im2col(x, layer.kernel, layer.stride, layer.pad)
        dy_l = dy.reshape(dy.shape[0], layer.out_ch, ho * wo)  # (N, O, L)
        w2 = w.reshape(layer.out_ch, -1)
        dcols = np.einsum("nol,ok->nlk", dy_l, w2, optimize=True)
        dx = _col2im(dcols, x.shape, layer.kernel, layer.stride, layer.pad, ho, wo)
        grads = None
        if need_params:
            dw = np.einsum("nol,nlk->ok", dy_l, cols, optimize=True).reshape(w.shape)
            grads = (dw, dy_l.sum(axis=(0, 2)))
        return dx, grads
    if isinstance(layer, Dense):
        w, _ = params
        dx = dy @ w
        grads = (dy.T @ x, dy.sum(axis=0)) if need_params else None
        return dx, grads
    if isinstance(layer, ReLU):
        return dy * (x > 0), None
    if isinstance(layer, Flatten):
        return dy.reshape(x.shape), None
    if isinstance(layer, MaxPool):
        k, s = layer.kernel, layer.step
        arg = _pool_windows(x, k, s).argmax(axis=-1)  # first occurrence on ties
        dx = np.zeros_like(x, dtype=dy.dtype)
        ho, wo = dy.shape[2], dy.shape[3]
        for i in range(k):
            for j in range(k):
                mask = arg == i * k + j
                dx[:, :, i : i + s * ho : s, j : j + s * wo : s] += dy * mask
        return dx, None
    raise TypeError(f"unknown layer {layer!r}")
