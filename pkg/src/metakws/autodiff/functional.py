"""Neural-network building blocks composed from differentiable tensor ops."""

from typing import Tuple, Union

import numpy as np

from .tensor import (Tensor, _result, amax, as_tensor, crop, exp, fast_sum, im2col, is_grad_enabled,
                     log, matmul, reshape, stop_gradient, sum_to, tsum)

Padding = Union[str, int, Tuple[Tuple[int, int], Tuple[int, int]]]


def same_padding(size: int, kernel: int, stride: int) -> Tuple[int, int]:
    """TensorFlow-style "same" padding: output = ceil(size / stride), extra pad at the end."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def conv_output_size(size: int, kernel: int, stride: int, padding="same") -> int:
    """Output length along one axis; ``padding`` is "same", "valid", an int, or a (before, after) pair."""
    if padding == "same":
        return -(-size // stride)
    if padding == "valid":
        pad = 0
    elif isinstance(padding, int):
        pad = 2 * padding
    else:
        pad = sum(padding)
    return (size + pad - kernel) // stride + 1


def _resolve_pads(h: int, w: int, kh: int, kw: int, stride: int, padding: Padding):
    if padding == "same":
        return same_padding(h, kh, stride), same_padding(w, kw, stride)
    if padding == "valid":
        return (0, 0), (0, 0)
    if isinstance(padding, int):
        return (padding, padding), (padding, padding)
    return tuple(padding[0]), tuple(padding[1])


def conv2d(x: Tensor, weight: Tensor, bias: Tensor = None, stride: int = 1,
           padding: Padding = "valid") -> Tensor:
    """2-D convolution (cross-correlation) on NHWC input.

    Args:
        x: input of shape (B, H, W, C).
        weight: kernel of shape (kh, kw, C, F).
        bias: optional (F,) offset.
        stride: stride along both spatial axes.
        padding: "valid", "same", an int, or ((top, bottom), (left, right)).

    Returns:
        Tensor of shape (B, OH, OW, F).
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise ValueError(f"conv2d: incompatible shapes {x.shape} and {weight.shape}")
    b, h, w, _ = x.shape
    kh, kw, c, f = weight.shape
    pads = _resolve_pads(h, w, kh, kw, stride, padding)
    oh = (h + sum(pads[0]) - kh) // stride + 1
    ow = (w + sum(pads[1]) - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape}")
    cols = im2col(x, kh, kw, stride, pads)
    out = matmul(cols, reshape(weight, (kh * kw * c, f)))
    if bias is not None:
        out = out + bias
    return reshape(out, (b, oh, ow, f))


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling on NHWC input (floor mode)."""
    b, h, w, c = x.shape
    h2, w2 = h // size, w // size
    if (h2 * size, w2 * size) != (h, w):
        x = crop(x, (slice(None), slice(0, h2 * size), slice(0, w2 * size), slice(None)))
    x = reshape(x, (b, h2, size, w2, size, c))
    return amax(x, axis=(2, 4))


def _bn_stats(x: Tensor, axes, eps: float):
    mu = x.mean(axis=axes, keepdims=True)
    centered = x - mu
    inv_std = ((centered * centered).mean(axis=axes, keepdims=True) + eps) ** -0.5
    return centered * inv_std, inv_std


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over every axis but the last using the statistics of this batch.

    Fused forward; the backward rule is written in tensor ops and, when a
    graph is being recorded, re-derives the statistics from ``x`` so the
    gradient is itself differentiable.
    """
    axes = tuple(range(x.ndim - 1))
    xd = x.data
    count = xd.size // xd.shape[-1]
    mu = fast_sum(xd, axes, keepdims=True) / count
    xc = xd - mu
    inv = 1.0 / np.sqrt(fast_sum(xc * xc, axes, keepdims=True) / count + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g, needs):
        if is_grad_enabled():
            xhat_t, inv_t = _bn_stats(x, axes, eps)
        else:
            xhat_t, inv_t = Tensor(xhat), Tensor(inv)
        gx = gg = gb = None
        if needs[0]:
            dxhat = g * gamma
            gx = inv_t * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                          - xhat_t * (dxhat * xhat_t).mean(axis=axes, keepdims=True))
        if needs[1]:
            gg = sum_to(g * xhat_t, gamma.shape)
        if needs[2]:
            gb = sum_to(g, beta.shape)
        return gx, gg, gb

    return _result(out, (x, gamma, beta), backward)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))


def linear(x: Tensor, weight: Tensor, bias: Tensor = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in_features, out_features)."""
    out = matmul(x, weight)
    return out + bias if bias is not None else out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    # the max shift is a constant; log-softmax is invariant to it
    shift = stop_gradient(amax(stop_gradient(x), axis=axis, keepdims=True))
    z = x - shift
    return z - log(tsum(exp(z), axis=axis, keepdims=True))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(x, axis=axis))


def one_hot(labels, n_classes: int, dtype=None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes), dtype=dtype or np.float32)
    out[np.arange(labels.size), labels] = 1.0
    return out


__all__ = [
    "as_tensor", "batch_norm", "conv2d", "conv_output_size", "flatten", "linear",
    "log_softmax", "max_pool2d", "one_hot", "same_padding", "softmax",
]
