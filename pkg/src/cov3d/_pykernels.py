"""Pure numpy implementations of the hot kernels.

Used when the compiled extension is unavailable, or when
``COV3D_PURE_PYTHON=1`` is set. Signatures mirror :mod:`cov3d._ckernels`.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def vol2col(xp, kd, kh, kw, sd, sh, sw, od, oh, ow):
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, : (od - 1) * sd + 1 : sd, : (oh - 1) * sh + 1 : sh, : (ow - 1) * sw + 1 : sw]
    # (N, C, od, oh, ow, kd, kh, kw) -> (N, C, kd, kh, kw, od, oh, ow)
    return np.ascontiguousarray(win.transpose(0, 1, 5, 6, 7, 2, 3, 4))


def col2vol(cols, dp, hp, wp, sd, sh, sw):
    n, c, kd, kh, kw, od, oh, ow = cols.shape
    out = np.zeros((n, c, dp, hp, wp), dtype=cols.dtype)
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                out[:, :, a : a + (od - 1) * sd + 1 : sd, b : b + (oh - 1) * sh + 1 : sh,
                    e : e + (ow - 1) * sw + 1 : sw] += cols[:, :, a, b, e]
    return out


def maxpool_forward(xp, kd, kh, kw, sd, sh, sw, od, oh, ow):
    n, c, dp, hp, wp = xp.shape
    cols = vol2col(xp, kd, kh, kw, sd, sh, sw, od, oh, ow).reshape(n, c, kd * kh * kw, od, oh, ow)
    local = np.argmax(cols, axis=2)
    vals = np.take_along_axis(cols, local[:, :, None], axis=2)[:, :, 0]
    a, rem = np.divmod(local, kh * kw)
    b, e = np.divmod(rem, kw)
    zz = np.arange(od)[:, None, None] * sd + a
    yy = np.arange(oh)[None, :, None] * sh + b
    xx = np.arange(ow)[None, None, :] * sw + e
    idx = ((zz * hp + yy) * wp + xx).astype(np.int64)
    return np.ascontiguousarray(vals), idx


def maxpool_backward(gout, arg, dp, hp, wp):
    n, c = gout.shape[:2]
    gin = np.zeros((n * c, dp * hp * wp), dtype=gout.dtype)
    rows = np.repeat(np.arange(n * c), gout[0, 0].size)
    np.add.at(gin, (rows, arg.reshape(-1)), gout.reshape(-1))
    return gin.reshape(n, c, dp, hp, wp)


def _axis_weights(size_in, size_out):
    t = np.arange(size_out)
    if size_out == 1 or size_in == 1:
        zeros = np.zeros(size_out, dtype=np.intp)
        return zeros, zeros, np.zeros(size_out)
    pos = t * (size_in - 1) / float(size_out - 1)
    i0 = np.minimum(np.floor(pos).astype(np.intp), size_in - 1)
    i1 = np.minimum(i0 + 1, size_in - 1)
    frac = np.where(i0 >= size_in - 1, 0.0, pos - i0)
    return i0, i1, frac


def resize_trilinear(vol, td, th, tw):
    sd, sh, sw = vol.shape
    z0, z1, fz = _axis_weights(sd, td)
    y0, y1, fy = _axis_weights(sh, th)
    x0, x1, fx = _axis_weights(sw, tw)
    v = vol.astype(np.float64)
    fx = fx[None, None, :]
    fy = fy[None, :, None]
    fz = fz[:, None, None]

    def lerp_x(zi, yi):
        return v[np.ix_(zi, yi, x0)] * (1.0 - fx) + v[np.ix_(zi, yi, x1)] * fx

    c0 = lerp_x(z0, y0) * (1.0 - fy) + lerp_x(z0, y1) * fy
    c1 = lerp_x(z1, y0) * (1.0 - fy) + lerp_x(z1, y1) * fy
    return (c0 * (1.0 - fz) + c1 * fz).astype(np.float32)
