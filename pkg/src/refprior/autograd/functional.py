"""Fused neural-network primitives with hand-written backward passes.

Convolution uses cross-correlation semantics (no kernel flip), the usual deep
learning convention, and is computed by im2col + matrix product.
"""

import math

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, concat, matmul, reshape, softmax, transpose


def conv_output_size(size, kernel, stride=1, padding=0, dilation=1):
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _im2col(xp, kh, kw, stride, dilation, ho, wo):
    """Padded ``[N,C,H,W]`` -> columns ``[C*kh*kw, N*ho*wo]``."""
    n, c = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        y0 = i * dilation
        y1 = y0 + stride * (ho - 1) + 1
        for j in range(kw):
            x0 = j * dilation
            x1 = x0 + stride * (wo - 1) + 1
            cols[:, i, j] = xt[:, :, y0:y1:stride, x0:x1:stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _col2im(cols, padded_shape, kh, kw, stride, dilation, ho, wo):
    n, c = padded_shape[:2]
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((c, n) + tuple(padded_shape[2:]), dtype=cols.dtype)
    for i in range(kh):
        y0 = i * dilation
        y1 = y0 + stride * (ho - 1) + 1
        for j in range(kw):
            x0 = j * dilation
            x1 = x0 + stride * (wo - 1) + 1
            out[:, :, y0:y1:stride, x0:x1:stride] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1):
    """2-D cross-correlation of ``x[N,C_in,H,W]`` with ``weight[C_out,C_in,kH,kW]``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, wc_in, kh, kw = weight.shape
    if c_in != wc_in:
        raise ShapeError(
            f"conv2d channel mismatch: input {tuple(x.shape)} has C_in={c_in} "
            f"but weight {tuple(weight.shape)} expects C_in={wc_in}"
        )
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, kernel {weight.shape}")

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xd, kh, kw, stride, dilation, ho, wo)
    w2 = weight.data.reshape(c_out, -1)
    out = w2 @ cols
    if bias is not None:
        out += bias.data.reshape(c_out, 1)
    out = np.ascontiguousarray(out.reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3))
    padded_shape = xd.shape

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(c_out, n * ho * wo)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gx = _col2im(w2.T @ g2, padded_shape, kh, kw, stride, dilation, ho, wo)
            if padding:
                gx = gx[:, :, padding:padding + h, padding:padding + w]
            gx = np.ascontiguousarray(gx)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)


def linear(x, weight, bias=None):
    """Affine map over the trailing dimension: ``x @ weight.T + bias``."""
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in:
        raise ShapeError(
            f"linear expects trailing dimension {d_in} (weight {tuple(weight.shape)}), "
            f"got input {tuple(x.shape)}"
        )
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, d_out)
        gw = g2.T @ xd.reshape(-1, d_in)
        gx = g @ wd if x.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)


def group_norm(x, groups, gamma, beta, eps=1e-5):
    """Per-(sample, group) standardisation followed by a per-channel affine map."""
    if eps <= 0:
        raise ValueError("group_norm eps must be positive")
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    centred = xg - mu
    var = (centred * centred).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (centred * inv).reshape(n, c, h, w)
    gd = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gd + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = (g * gd).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        gx = inv * (
            dxhat
            - dxhat.mean(axis=2, keepdims=True)
            - xh * (dxhat * xh).mean(axis=2, keepdims=True)
        )
        return gx.reshape(n, c, h, w), ggamma, gbeta

    return Tensor._from_op(out, (x, gamma, beta), backward)


def nearest_upsample(x, out_h, out_w):
    """Replicate each source cell into an integer-sized block."""
    n, c, h, w = x.shape
    if out_h < h or out_w < w or out_h % h or out_w % w:
        raise ShapeError(
            f"nearest_upsample needs integer factors: {h}x{w} -> {out_h}x{out_w}"
        )
    fh, fw = out_h // h, out_w // w
    out = x.data
    if fh > 1:
        out = np.repeat(out, fh, axis=2)
    if fw > 1:
        out = np.repeat(out, fw, axis=3)
    if out is x.data:
        out = out.copy()

    def backward(g):
        return (g.reshape(n, c, h, fh, w, fw).sum(axis=(3, 5)),)

    return Tensor._from_op(out, (x,), backward)


def global_avg_pool(x):
    """``[N,C,H,W] -> [N,C,1,1]``."""
    return x.mean(axis=(2, 3), keepdims=True)


def self_attention(tokens, heads, w_qkv, b_qkv, w_out, b_out):
    """Multi-head scaled dot-product self-attention with a residual connection.

    ``tokens`` is ``[N, L, D]``; ``w_qkv`` is ``[3D, D]`` producing queries, keys
    and values in that order; ``w_out`` is ``[D, D]``. No positional encoding
    is added, so the block is permutation-equivariant over tokens.
    """
    n, length, d = tokens.shape
    if heads < 1 or d % heads:
        raise ShapeError(f"self_attention: model dim {d} not divisible by {heads} heads")
    dh = d // heads
    qkv = linear(tokens, w_qkv, b_qkv)
    qkv = transpose(reshape(qkv, (n, length, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    mixed = matmul(attn, v)
    mixed = reshape(transpose(mixed, (0, 2, 1, 3)), (n, length, d))
    return linear(mixed, w_out, b_out) + tokens


def cat_channels(tensors):
    return concat(tensors, axis=1)
