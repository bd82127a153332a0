"""Differentiable operations used by the network.

All functions take and return :class:`~cov3d.tensor.Tensor` objects and
allocate fresh outputs. Spatial operations expect ``(N, C, D, H, W)``.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from cov3d import kernels
from cov3d.tensor import Tensor


def _triple(v, name: str) -> tuple[int, int, int]:
    if isinstance(v, int):
        v = (v, v, v)
    v = tuple(int(a) for a in v)
    if len(v) != 3:
        raise ValueError(f"{name} must be an int or a 3-tuple, got {v!r}")
    return v


def _out_extent(size: int, k: int, s: int, p: int, ceil_mode: bool = False) -> int:
    span = size + 2 * p - k
    if span < 0:
        return 0
    if ceil_mode:
        out = -(-span // s) + 1
        # last window must start inside the input or the left padding
        if (out - 1) * s >= size + p:
            out -= 1
        return out
    return span // s + 1


_AXES = ("depth", "height", "width")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------
def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0,
           groups: int = 1) -> Tensor:
    """Grouped 3D cross-correlation with zero padding.

    ``weight`` has shape ``(Cout, Cin // groups, kd, kh, kw)``.
    """
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    if x.ndim != 5:
        raise ValueError(f"conv3d input must be 5D (N, C, D, H, W), got shape {x.shape}")
    if weight.ndim != 5:
        raise ValueError(f"conv3d weight must be 5D, got shape {weight.shape}")
    if groups < 1:
        raise ValueError(f"groups must be positive, got {groups}")
    n, cin, d, h, w = x.shape
    cout, cg, kd, kh, kw = weight.shape
    if cin % groups:
        raise ValueError(f"input channels (Cin={cin}) not divisible by groups={groups}")
    if cout % groups:
        raise ValueError(f"output channels (Cout={cout}) not divisible by groups={groups}")
    if cg != cin // groups:
        raise ValueError(f"weight expects {cg * groups} input channels (Cin), input has {cin}")
    if min(stride) < 1 or min(padding) < 0:
        raise ValueError(f"invalid stride {stride} or padding {padding}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} does not match Cout={cout}")
    dims = []
    for axis, size, k, s, p in zip(_AXES, (d, h, w), (kd, kh, kw), stride, padding):
        o = _out_extent(size, k, s, p)
        if o < 1:
            raise ValueError(f"conv3d output {axis} would be {o} (input {axis}={size}, kernel={k}, "
                             f"padding={p})")
        dims.append(o)
    od, oh, ow = dims
    sd, sh, sw = stride
    pd, ph, pw = padding
    xp = x.data
    if any(padding):
        xp = np.pad(xp, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    dp, hp, wp = xp.shape[2:]
    pointwise = (kd, kh, kw) == (1, 1, 1) and stride == (1, 1, 1)
    g_count = groups
    cout_g = cout // g_count
    kdim = cg * kd * kh * kw
    length = od * oh * ow
    if pointwise:
        cols = xp.reshape(n, g_count, kdim, length)
    else:
        cols = kernels.vol2col(xp, kd, kh, kw, sd, sh, sw, od, oh, ow).reshape(n, g_count, kdim, length)
    wm = weight.data.reshape(g_count, cout_g, kdim)
    out = np.matmul(wm[None], cols).reshape(n, cout, od, oh, ow)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1, 1)

    def backward(g):
        g2 = g.reshape(n, g_count, cout_g, length)
        gw = None
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wm.transpose(0, 2, 1)[None], g2)
            if pointwise:
                gxp = gcols.reshape(n, cin, dp, hp, wp)
            else:
                gxp = kernels.col2vol(gcols.reshape(n, cin, kd, kh, kw, od, oh, ow),
                                      dp, hp, wp, sd, sh, sw)
            gx = gxp[:, :, pd:pd + d, ph:ph + h, pw:pw + w]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward, "conv3d")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------
def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = 0.1,
              eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over every non-channel axis.

    In training mode the running statistics are updated in place
    (exponential moving average, unbiased variance).
    """
    if x.ndim < 2:
        raise ValueError(f"batchnorm input needs a channel axis, got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta shape must be ({c},), got {gamma.shape}/{beta.shape}")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ValueError(f"running stats must have shape ({c},)")
    if eps <= 0:
        raise ValueError("epsilon must be positive")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    m = x.size // c
    xd = x.data
    if training:
        if m < 2:
            raise ValueError(f"batchnorm in train mode needs at least 2 values per channel, got {m}")
        mu = xd.mean(axis=axes)
        centered = xd - mu.reshape(bshape)
        var = (centered * centered).mean(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1.0))
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
        centered = xd - mu.reshape(bshape)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = centered * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if training:
                s1 = dxhat.mean(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).mean(axis=axes).reshape(bshape)
                gx = (dxhat - s1 - xhat * s2) * inv_std.reshape(bshape)
            else:
                gx = dxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return Tensor.from_op(out, (x, gamma, beta), backward, "batchnorm")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} out of range for {x.ndim}D input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (x,), backward, "softmax")


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------
def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over all spatial axes: ``(N, C, ...) -> (N, C)``."""
    if x.ndim < 3:
        raise ValueError(f"global_avg_pool needs spatial axes, got shape {x.shape}")
    n, c = x.shape[:2]
    spatial = x.shape[2:]
    count = int(np.prod(spatial))
    out = x.data.reshape(n, c, count).mean(axis=2)

    def backward(g):
        return (np.broadcast_to((g / count).reshape((n, c) + (1,) * len(spatial)), x.shape).copy(),)

    return Tensor.from_op(out, (x,), backward, "global_avg_pool")


def _pool_geometry(x: Tensor, kernel, stride, padding, ceil_mode):
    if x.ndim != 5:
        raise ValueError(f"pooling input must be 5D (N, C, D, H, W), got shape {x.shape}")
    kernel = _triple(kernel, "kernel")
    stride = kernel if stride is None else _triple(stride, "stride")
    padding = _triple(padding, "padding")
    if min(kernel) < 1 or min(stride) < 1 or min(padding) < 0:
        raise ValueError(f"degenerate pooling window: kernel={kernel}, stride={stride}, padding={padding}")
    if any(2 * p > k for p, k in zip(padding, kernel)):
        raise ValueError(f"padding {padding} must be at most half the kernel {kernel}")
    dims, extra = [], []
    for axis, size, k, s, p in zip(_AXES, x.shape[2:], kernel, stride, padding):
        if k > size + 2 * p:
            raise ValueError(f"pooling kernel {k} exceeds {axis} extent {size} (padding {p})")
        o = _out_extent(size, k, s, p, ceil_mode)
        dims.append(o)
        extra.append(max(0, (o - 1) * s + k - (size + 2 * p)))
    return kernel, stride, padding, tuple(dims), tuple(extra)


def avg_pool3d(x: Tensor, kernel, stride=None, padding=0, ceil_mode: bool = False) -> Tensor:
    """Windowed mean; padded and overhanging positions are excluded from the count."""
    kernel, stride, padding, (od, oh, ow), extra = _pool_geometry(x, kernel, stride, padding, ceil_mode)
    n, c, d, h, w = x.shape
    kd, kh, kw = kernel
    sd, sh, sw = stride
    pads = [(p, p + e) for p, e in zip(padding, extra)]
    xp = np.pad(x.data, [(0, 0), (0, 0)] + pads)
    ones = np.pad(np.ones((1, 1, d, h, w), dtype=x.dtype), [(0, 0), (0, 0)] + pads)
    dp, hp, wp = xp.shape[2:]
    k3 = kd * kh * kw
    counts = kernels.vol2col(ones, kd, kh, kw, sd, sh, sw, od, oh, ow).reshape(1, 1, k3, od, oh, ow).sum(axis=2)
    cols = kernels.vol2col(xp, kd, kh, kw, sd, sh, sw, od, oh, ow).reshape(n, c, k3, od, oh, ow)
    out = cols.sum(axis=2) / counts
    (pd, _), (ph, _), (pw, _) = pads

    def backward(g):
        gc = np.broadcast_to((g / counts)[:, :, None], (n, c, k3, od, oh, ow))
        gc = np.ascontiguousarray(gc).reshape(n, c, kd, kh, kw, od, oh, ow)
        gxp = kernels.col2vol(gc, dp, hp, wp, sd, sh, sw)
        return (gxp[:, :, pd:pd + d, ph:ph + h, pw:pw + w],)

    return Tensor.from_op(out.astype(x.dtype), (x,), backward, "avg_pool3d")


def max_pool3d(x: Tensor, kernel, stride=None, padding=0, ceil_mode: bool = False) -> Tensor:
    """Windowed max; padding never wins (filled with -inf)."""
    kernel, stride, padding, (od, oh, ow), extra = _pool_geometry(x, kernel, stride, padding, ceil_mode)
    n, c, d, h, w = x.shape
    pads = [(p, p + e) for p, e in zip(padding, extra)]
    xp = x.data
    if any(p or e for p, e in pads):
        xp = np.pad(xp, [(0, 0), (0, 0)] + pads, constant_values=-np.inf)
    dp, hp, wp = xp.shape[2:]
    out, arg = kernels.maxpool_forward(xp, *kernel, *stride, od, oh, ow)
    (pd, _), (ph, _), (pw, _) = pads

    def backward(g):
        gxp = kernels.maxpool_backward(np.ascontiguousarray(g), arg, dp, hp, wp)
        return (gxp[:, :, pd:pd + d, ph:ph + h, pw:pw + w],)

    return Tensor.from_op(out, (x,), backward, "max_pool3d")


# ---------------------------------------------------------------------------
# dense and loss
# ---------------------------------------------------------------------------
def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, groups: int = 1) -> Tensor:
    """Grouped affine map ``(N, Fin) -> (N, Fout)``.

    ``weight`` has shape ``(Fout, Fin // groups)``; group ``g`` maps input
    block ``g`` to output block ``g`` only.
    """
    if x.ndim != 2:
        raise ValueError(f"dense input must be 2D (N, Fin), got shape {x.shape}")
    if groups < 1:
        raise ValueError(f"groups must be positive, got {groups}")
    n, fin = x.shape
    fout, fin_g = weight.shape
    if fin % groups or fout % groups:
        raise ValueError(f"Fin={fin} and Fout={fout} must both be divisible by groups={groups}")
    if fin_g != fin // groups:
        raise ValueError(f"weight expects Fin={fin_g * groups}, input has Fin={fin}")
    if bias is not None and bias.shape != (fout,):
        raise ValueError(f"bias shape {bias.shape} does not match Fout={fout}")
    fout_g = fout // groups
    xg = x.data.reshape(n, groups, fin_g).transpose(1, 0, 2)          # (G, N, Fin_g)
    wg = weight.data.reshape(groups, fout_g, fin_g)                   # (G, Fout_g, Fin_g)
    out = np.matmul(xg, wg.transpose(0, 2, 1)).transpose(1, 0, 2).reshape(n, fout)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gg = g.reshape(n, groups, fout_g).transpose(1, 0, 2)          # (G, N, Fout_g)
        gx = np.matmul(gg, wg).transpose(1, 0, 2).reshape(n, fin) if x.requires_grad else None
        gw = np.matmul(gg.transpose(0, 2, 1), xg).reshape(fout, fin_g) if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward, "dense")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise ValueError(f"logits must be 2D (N, C), got shape {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got {labels.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise ValueError(f"label {bad} out of range [0, {c})")
    z = logits.data.astype(np.float64) - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - z[rows, labels])
    probs = np.exp(z - lse[:, None])

    def backward(g):
        gl = probs.copy()
        gl[rows, labels] -= 1.0
        return ((gl * (g / n)).astype(logits.dtype),)

    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")
