# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the tensor engine and volume resampling.

Every function here has a numpy twin in :mod:`cov3d._pykernels` with the
same signature and the same results (bit-identical for the copy kernels,
rounding-level for the interpolating ones).
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor
from libc.string cimport memcpy

cnp.import_array()

ctypedef fused real:
    float
    double


cdef void _vol2col(real[:, :, :, ::1] xp, real[:, :, :, :, :, :, ::1] cols,
                   Py_ssize_t sd, Py_ssize_t sh, Py_ssize_t sw) noexcept nogil:
    cdef Py_ssize_t kd = cols.shape[1], kh = cols.shape[2], kw = cols.shape[3]
    cdef Py_ssize_t od = cols.shape[4], oh = cols.shape[5], ow = cols.shape[6]
    cdef Py_ssize_t m, a, b, e, z, y, x
    cdef real* src
    cdef real* dst
    for m in range(cols.shape[0]):
        for a in range(kd):
            for b in range(kh):
                for e in range(kw):
                    for z in range(od):
                        for y in range(oh):
                            src = &xp[m, a + z * sd, b + y * sh, e]
                            dst = &cols[m, a, b, e, z, y, 0]
                            if sw == 1:
                                memcpy(dst, src, ow * sizeof(real))
                            else:
                                for x in range(ow):
                                    dst[x] = src[x * sw]


cdef void _col2vol(real[:, :, :, :, :, :, ::1] cols, real[:, :, :, ::1] xp,
                   Py_ssize_t sd, Py_ssize_t sh, Py_ssize_t sw) noexcept nogil:
    cdef Py_ssize_t kd = cols.shape[1], kh = cols.shape[2], kw = cols.shape[3]
    cdef Py_ssize_t od = cols.shape[4], oh = cols.shape[5], ow = cols.shape[6]
    cdef Py_ssize_t m, a, b, e, z, y, x
    cdef real* src
    cdef real* dst
    for m in range(cols.shape[0]):
        for a in range(kd):
            for b in range(kh):
                for e in range(kw):
                    for z in range(od):
                        for y in range(oh):
                            src = &cols[m, a, b, e, z, y, 0]
                            dst = &xp[m, a + z * sd, b + y * sh, e]
                            if sw == 1:
                                for x in range(ow):
                                    dst[x] += src[x]
                            else:
                                for x in range(ow):
                                    dst[x * sw] += src[x]


def vol2col(xp, int kd, int kh, int kw, int sd, int sh, int sw, int od, int oh, int ow):
    """Gather conv windows of a padded volume into a column buffer.

    Output layout is ``(N, C, kd, kh, kw, od, oh, ow)``.
    """
    n, c, dp, hp, wp = xp.shape
    src = xp.reshape(n * c, dp, hp, wp)
    out = np.empty((n * c, kd, kh, kw, od, oh, ow), dtype=xp.dtype)
    cdef float[:, :, :, ::1] xf
    cdef double[:, :, :, ::1] xd
    cdef float[:, :, :, :, :, :, ::1] cf
    cdef double[:, :, :, :, :, :, ::1] cd
    if xp.dtype == np.float32:
        xf = src
        cf = out
        with nogil:
            _vol2col(xf, cf, sd, sh, sw)
    else:
        xd = src
        cd = out
        with nogil:
            _vol2col(xd, cd, sd, sh, sw)
    return out.reshape(n, c, kd, kh, kw, od, oh, ow)


def col2vol(cols, int dp, int hp, int wp, int sd, int sh, int sw):
    """Scatter-add a column buffer back onto a padded volume (adjoint of vol2col)."""
    n, c, kd, kh, kw, od, oh, ow = cols.shape
    src = np.ascontiguousarray(cols).reshape(n * c, kd, kh, kw, od, oh, ow)
    out = np.zeros((n * c, dp, hp, wp), dtype=cols.dtype)
    cdef float[:, :, :, ::1] xf
    cdef double[:, :, :, ::1] xd
    cdef float[:, :, :, :, :, :, ::1] cf
    cdef double[:, :, :, :, :, :, ::1] cd
    if cols.dtype == np.float32:
        cf = src
        xf = out
        with nogil:
            _col2vol(cf, xf, sd, sh, sw)
    else:
        cd = src
        xd = out
        with nogil:
            _col2vol(cd, xd, sd, sh, sw)
    return out.reshape(n, c, dp, hp, wp)


def maxpool_forward(real[:, :, :, :, ::1] xp, int kd, int kh, int kw,
                    int sd, int sh, int sw, int od, int oh, int ow):
    """Windowed max over a padded volume.

    Returns ``(values, argmax)`` where argmax holds the flat index of the
    winning voxel inside each padded ``(D, H, W)`` volume; ties go to the
    first voxel in window scan order.
    """
    cdef Py_ssize_t n_batch = xp.shape[0], n_chan = xp.shape[1]
    cdef Py_ssize_t hp = xp.shape[3], wp = xp.shape[4]
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n_batch, n_chan, od, oh, ow), dtype=dtype)
    idx = np.empty((n_batch, n_chan, od, oh, ow), dtype=np.int64)
    cdef real[:, :, :, :, ::1] vals = out
    cdef cnp.int64_t[:, :, :, :, ::1] arg = idx
    cdef Py_ssize_t n, c, a, b, e, z, y, x, zz, yy, xx, best_i
    cdef real best, cur
    with nogil:
        for n in range(n_batch):
            for c in range(n_chan):
                for z in range(od):
                    for y in range(oh):
                        for x in range(ow):
                            best_i = -1
                            best = 0
                            for a in range(kd):
                                zz = z * sd + a
                                for b in range(kh):
                                    yy = y * sh + b
                                    for e in range(kw):
                                        xx = x * sw + e
                                        cur = xp[n, c, zz, yy, xx]
                                        if best_i < 0 or cur > best:
                                            best = cur
                                            best_i = (zz * hp + yy) * wp + xx
                            vals[n, c, z, y, x] = best
                            arg[n, c, z, y, x] = best_i
    return out, idx


def maxpool_backward(real[:, :, :, :, ::1] gout, cnp.int64_t[:, :, :, :, ::1] arg,
                     int dp, int hp, int wp):
    """Route output gradients to the argmax voxels of a padded volume."""
    cdef Py_ssize_t n_batch = gout.shape[0], n_chan = gout.shape[1]
    cdef Py_ssize_t od = gout.shape[2], oh = gout.shape[3], ow = gout.shape[4]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n_batch, n_chan, dp * hp * wp), dtype=dtype)
    cdef real[:, :, ::1] gin = out
    cdef Py_ssize_t n, c, z, y, x
    with nogil:
        for n in range(n_batch):
            for c in range(n_chan):
                for z in range(od):
                    for y in range(oh):
                        for x in range(ow):
                            gin[n, c, arg[n, c, z, y, x]] += gout[n, c, z, y, x]
    return out.reshape(n_batch, n_chan, dp, hp, wp)


cdef inline void _axis_weights(Py_ssize_t t, Py_ssize_t size_in, Py_ssize_t size_out,
                               Py_ssize_t *i0, Py_ssize_t *i1, double *frac) noexcept nogil:
    cdef double pos
    if size_out == 1 or size_in == 1:
        i0[0] = 0
        i1[0] = 0
        frac[0] = 0.0
        return
    pos = t * (size_in - 1) / <double>(size_out - 1)
    i0[0] = <Py_ssize_t>floor(pos)
    if i0[0] >= size_in - 1:
        i0[0] = size_in - 1
        i1[0] = size_in - 1
        frac[0] = 0.0
        return
    i1[0] = i0[0] + 1
    frac[0] = pos - i0[0]


def resize_trilinear(float[:, :, ::1] vol, int td, int th, int tw):
    """Align-corners trilinear resampling of a ``(D, H, W)`` float32 volume."""
    cdef Py_ssize_t sd = vol.shape[0], sh = vol.shape[1], sw = vol.shape[2]
    out = np.empty((td, th, tw), dtype=np.float32)
    cdef float[:, :, ::1] res = out
    cdef Py_ssize_t z, y, x, z0, z1, y0, y1, x0, x1
    cdef double fz, fy, fx, c00, c01, c10, c11, c0, c1
    with nogil:
        for z in range(td):
            _axis_weights(z, sd, td, &z0, &z1, &fz)
            for y in range(th):
                _axis_weights(y, sh, th, &y0, &y1, &fy)
                for x in range(tw):
                    _axis_weights(x, sw, tw, &x0, &x1, &fx)
                    c00 = vol[z0, y0, x0] * (1.0 - fx) + vol[z0, y0, x1] * fx
                    c01 = vol[z0, y1, x0] * (1.0 - fx) + vol[z0, y1, x1] * fx
                    c10 = vol[z1, y0, x0] * (1.0 - fx) + vol[z1, y0, x1] * fx
                    c11 = vol[z1, y1, x0] * (1.0 - fx) + vol[z1, y1, x1] * fx
                    c0 = c00 * (1.0 - fy) + c01 * fy
                    c1 = c10 * (1.0 - fy) + c11 * fy
                    res[z, y, x] = <float>(c0 * (1.0 - fz) + c1 * fz)
    return out
