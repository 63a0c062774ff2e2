"""Differentiable layer functions on batched ``(B, C, D, H, W)`` tensors."""

import numpy as np

from . import kernels
from .tensor import Tensor, as_tensor, record


def _triple(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 3:
            raise ValueError(f"expected 3 per-axis values, got {v}")
        return tuple(int(x) for x in v)
    return (int(v),) * 3


def same_padding(kernel_size, dilation):
    """Per-axis padding that keeps spatial extents at stride 1 (odd kernels only)."""
    ks = _triple(kernel_size)
    if any(k % 2 == 0 for k in ks):
        raise ValueError(f"'same' padding needs an odd kernel, got {ks}")
    return tuple(dilation * (k - 1) // 2 for k in ks)


def _check_conv_args(x, weight, dilation, stride):
    if x.ndim != 5:
        raise ValueError(f"conv3d expects (B, C, D, H, W) input, got {x.shape}")
    if weight.ndim != 5:
        raise ValueError(f"conv3d expects (C_out, C_in, L, M, N) weights, got {weight.shape}")
    if dilation < 1 or stride < 1:
        raise ValueError(f"dilation and stride must be positive, got r={dilation} s={stride}")


def conv3d(x, weight, bias=None, dilation=1, stride=1, padding="same"):
    """Dilated 3D convolution with zero padding.

    Tap ``(l, m, n)`` of the kernel reads input voxel
    ``(i*s + r*l - p, j*s + r*m - p, k*s + r*n - p)``; with ``padding="same"``
    this is the centered atrous convolution and output extents equal input
    extents.
    """
    _check_conv_args(x, weight, dilation, stride)
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv3d: input has {x.shape[1]} channels, kernel expects {weight.shape[1]}"
        )
    if isinstance(padding, str):
        if padding != "same":
            raise ValueError(f"unknown padding mode {padding!r}")
        pad = same_padding(weight.shape[2:], dilation)
    else:
        pad = _triple(padding)
    if any(p < 0 for p in pad):
        raise ValueError(f"padding must be non-negative, got {pad}")

    out = kernels.conv3d_forward(x.data, weight.data, dilation, stride, pad)
    parents = [x, weight]
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)
        parents.append(bias)

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gx = kernels.conv3d_grad_input(g, weight.data, x.shape, dilation, stride, pad)
        if weight.requires_grad:
            gw = kernels.conv3d_grad_weight(g, x.data, weight.shape, dilation, stride, pad)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    return record(out, parents, backward, "conv3d")


def conv3d_transpose(x, weight, bias=None, stride=2):
    """Transpose of the stride-2, 3x3x3, padding-1 convolution.

    ``weight`` has shape ``(C_in, C_out, 3, 3, 3)``: it is the kernel of the
    forward convolution mapping ``C_out`` channels down to ``C_in``. Output
    spatial extents are exactly twice the input extents.
    """
    if stride != 2 or tuple(weight.shape[2:]) != (3, 3, 3):
        raise ValueError(
            f"conv3d_transpose supports stride 2 with a 3x3x3 kernel only, "
            f"got stride {stride}, kernel {tuple(weight.shape[2:])}"
        )
    if x.ndim != 5 or x.shape[1] != weight.shape[0]:
        raise ValueError(
            f"conv3d_transpose: input {x.shape} incompatible with kernel {weight.shape}"
        )
    pad = (1, 1, 1)
    B, _, D, H, W = x.shape
    out_shape = (B, weight.shape[1], 2 * D, 2 * H, 2 * W)
    out = kernels.conv3d_grad_input(x.data, weight.data, out_shape, 1, 2, pad)
    parents = [x, weight]
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)
        parents.append(bias)

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gx = kernels.conv3d_forward(g, weight.data, 1, 2, pad)
        if weight.requires_grad:
            gw = kernels.conv3d_grad_weight(x.data, g, weight.shape, 1, 2, pad)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    return record(out, parents, backward, "conv3d_transpose")


def max_pool3d(x, stride=2):
    """2x2x2 max pooling with stride 2; ties route gradient to the first tap."""
    if stride != 2:
        raise ValueError(f"max_pool3d supports stride 2 only, got {stride}")
    if any(n % 2 for n in x.shape[2:]):
        raise ValueError(f"max_pool3d needs even spatial extents, got {x.shape[2:]}")
    out, idx = kernels.max_pool3d_forward(x.data)
    return record(out, (x,), lambda g: (kernels.max_pool3d_backward(g, idx),), "max_pool3d")


def relu(x):
    mask = x.data > 0
    return record(np.where(mask, x.data, 0).astype(x.dtype), (x,),
                  lambda g: (g * mask,), "relu")


def stable_sigmoid(v):
    """Logistic function evaluated without overflow for any finite input."""
    v = np.asarray(v)
    out = np.empty_like(v, dtype=np.result_type(v, np.float32))
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x):
    s = stable_sigmoid(x.data).astype(x.dtype)
    return record(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def global_avg_pool(x):
    """Spatial mean per channel: ``(B, C, D, H, W) -> (B, C)``."""
    if x.ndim < 3:
        raise ValueError(f"global_avg_pool expects spatial axes, got {x.shape}")
    axes = tuple(range(2, x.ndim))
    n = int(np.prod(x.shape[2:]))
    spatial = (1,) * len(axes)

    def backward(g):
        return (np.broadcast_to(g.reshape(g.shape + spatial) / n, x.shape).copy(),)

    return record(x.data.mean(axis=axes), (x,), backward, "global_avg_pool")


def fully_connected(x, weight, bias=None):
    """``x @ W.T + b`` for ``x`` of shape ``(B, in)`` or ``(in,)``."""
    if weight.ndim != 2:
        raise ValueError(f"fully_connected weight must be 2-D, got {weight.shape}")
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"fully_connected: input length {x.shape[-1]} vs weight {weight.shape}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"fully_connected: bias {bias.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gx = g @ weight.data
        if x.ndim == 1:
            gw = np.outer(g, x.data)
        else:
            gw = g.T @ x.data
        grads = [gx, gw]
        if bias is not None:
            grads.append(g if g.ndim == 1 else g.sum(axis=0))
        return tuple(grads)

    return record(np.ascontiguousarray(out), parents, backward, "fully_connected")


def batch_norm3d(x, gamma, beta, state):
    """Batch normalization over (batch x spatial) per channel.

    ``state`` is a :class:`~voxsegnet.layers.BatchNorm3d`-like object carrying
    ``training``, ``momentum``, ``eps``, ``running_mean`` and ``running_var``.
    In training mode batch statistics are used and the running estimates
    updated; the first update adopts the batch statistics directly.
    """
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"batch_norm3d: {C} input channels vs parameters {gamma.shape}")
    axes = (0, 2, 3, 4)
    bshape = (1, C, 1, 1, 1)
    if state.training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if state.running_mean is None:
            state.running_mean = mean.copy()
            state.running_var = var.copy()
        else:
            m = state.momentum
            state.running_mean = m * state.running_mean + (1 - m) * mean
            state.running_var = m * state.running_var + (1 - m) * var
    else:
        if state.running_mean is None:
            raise RuntimeError("batch_norm3d in eval mode before any running statistics exist")
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)

    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    training = state.training
    n = x.data.size // C

    def backward(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (inv_std.reshape(bshape) / n) * (
                n * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return record(out, (x, gamma, beta), backward, "batch_norm3d")


def softmax_cross_entropy_masked(logits, labels, mask):
    """Mean negative log-likelihood of the true part label over occupied voxels.

    ``logits`` is ``(B, K, D, H, W)``; ``labels`` holds part ids ``1..K``
    (ignored where ``mask`` is false); ``mask`` is the ``(B, D, H, W)``
    occupancy. The gradient is exactly zero at unoccupied voxels.
    """
    x = logits.data
    K = x.shape[1]
    mask = np.asarray(mask, dtype=bool)
    labels = np.asarray(labels)
    if mask.shape != (x.shape[0],) + x.shape[2:]:
        raise ValueError(f"mask shape {mask.shape} does not match logits {x.shape}")
    m = int(mask.sum())
    if m == 0:
        raise ValueError("softmax_cross_entropy_masked: empty mask")
    lab = labels[mask]
    if lab.min() < 1 or lab.max() > K:
        raise ValueError(f"label out of range 1..{K} at an occupied voxel")

    # gather occupied voxels as (m, K)
    z = np.moveaxis(x, 1, -1)[mask]
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(m)
    loss = -(z[rows, lab - 1] - logsum).sum() / m

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, lab - 1] -= 1.0
        p *= g[0] / m
        full = np.zeros(x.shape[:1] + x.shape[2:] + (K,), dtype=x.dtype)
        full[mask] = p
        return (np.ascontiguousarray(np.moveaxis(full, -1, 1)),)

    return record(np.array([loss], dtype=x.dtype), (logits,), backward, "softmax_xent")


def softmax(logits):
    """Plain (non-differentiable) channel softmax, for inspection."""
    x = as_tensor(logits).data
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


__all__ = [
    "Tensor", "conv3d", "conv3d_transpose", "max_pool3d", "relu", "sigmoid",
    "stable_sigmoid", "global_avg_pool", "fully_connected", "batch_norm3d",
    "softmax_cross_entropy_masked", "softmax", "same_padding",
]
