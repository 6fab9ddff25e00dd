# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels. Same signatures as ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, ceil, floor

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col3d(real[:, :, :, :, ::1] xp, int k, int stride, out_shape):
    cdef Py_ssize_t B = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t Do = out_shape[0], Ho = out_shape[1], Wo = out_shape[2]
    cdef Py_ssize_t P = Do * Ho * Wo
    dtype = np.float32 if real is float else np.float64
    cols_arr = np.empty((B, C * k * k * k, P), dtype=dtype)
    cdef real[:, :, ::1] cols = cols_arr
    cdef Py_ssize_t b, c, a, bb, cc, oz, oy, ox, row, col, iz, iy
    with nogil:
        for b in range(B):
            for c in range(C):
                for a in range(k):
                    for bb in range(k):
                        for cc in range(k):
                            row = ((c * k + a) * k + bb) * k + cc
                            col = 0
                            for oz in range(Do):
                                iz = oz * stride + a
                                for oy in range(Ho):
                                    iy = oy * stride + bb
                                    for ox in range(Wo):
                                        cols[b, row, col] = xp[b, c, iz, iy, ox * stride + cc]
                                        col = col + 1
    return cols_arr


def col2im3d(real[:, :, ::1] cols, padded_shape, int k, int stride, out_shape):
    cdef Py_ssize_t B = padded_shape[0], C = padded_shape[1]
    cdef Py_ssize_t Do = out_shape[0], Ho = out_shape[1], Wo = out_shape[2]
    dtype = np.float32 if real is float else np.float64
    xp_arr = np.zeros(padded_shape, dtype=dtype)
    cdef real[:, :, :, :, ::1] xp = xp_arr
    cdef Py_ssize_t b, c, a, bb, cc, oz, oy, ox, row, col, iz, iy
    with nogil:
        for b in range(B):
            for c in range(C):
                for a in range(k):
                    for bb in range(k):
                        for cc in range(k):
                            row = ((c * k + a) * k + bb) * k + cc
                            col = 0
                            for oz in range(Do):
                                iz = oz * stride + a
                                for oy in range(Ho):
                                    iy = oy * stride + bb
                                    for ox in range(Wo):
                                        xp[b, c, iz, iy, ox * stride + cc] += cols[b, row, col]
                                        col = col + 1
    return xp_arr


def maxpool3d_forward(real[:, :, :, :, ::1] x, int w):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t Do = x.shape[2] // w, Ho = x.shape[3] // w, Wo = x.shape[4] // w
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((B, C, Do, Ho, Wo), dtype=dtype)
    idx_arr = np.empty((B, C, Do, Ho, Wo), dtype=np.int64)
    cdef real[:, :, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, c, oz, oy, ox, dz, dy, dx, j, best_j
    cdef real v, best
    with nogil:
        for b in range(B):
            for c in range(C):
                for oz in range(Do):
                    for oy in range(Ho):
                        for ox in range(Wo):
                            best = x[b, c, oz * w, oy * w, ox * w]
                            best_j = 0
                            j = 0
                            for dz in range(w):
                                for dy in range(w):
                                    for dx in range(w):
                                        v = x[b, c, oz * w + dz, oy * w + dy, ox * w + dx]
                                        if v > best:
                                            best = v
                                            best_j = j
                                        j = j + 1
                            out[b, c, oz, oy, ox] = best
                            idx[b, c, oz, oy, ox] = best_j
    return out_arr, idx_arr


def maxpool3d_backward(real[:, :, :, :, ::1] g, cnp.int64_t[:, :, :, :, ::1] idx, int w, in_shape):
    cdef Py_ssize_t B = g.shape[0], C = g.shape[1]
    cdef Py_ssize_t Do = g.shape[2], Ho = g.shape[3], Wo = g.shape[4]
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.zeros(in_shape, dtype=dtype)
    cdef real[:, :, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, c, oz, oy, ox, j, w2 = w * w
    with nogil:
        for b in range(B):
            for c in range(C):
                for oz in range(Do):
                    for oy in range(Ho):
                        for ox in range(Wo):
                            j = idx[b, c, oz, oy, ox]
                            gx[b, c, oz * w + j // w2, oy * w + (j // w) % w, ox * w + j % w] = g[b, c, oz, oy, ox]
    return gx_arr


def neighborhood_max(real[:, :, :, ::1] grid, double[:, :, ::1] centers, double sigma, double trunc):
    cdef Py_ssize_t B = centers.shape[0], N = centers.shape[1], D = grid.shape[1]
    value_arr = np.zeros((B, N), dtype=np.float64)
    index_arr = np.full((B, N), -1, dtype=np.int64)
    weight_arr = np.zeros((B, N), dtype=np.float64)
    cdef double[:, ::1] value = value_arr
    cdef cnp.int64_t[:, ::1] index = index_arr
    cdef double[:, ::1] weight = weight_arr
    cdef double inv2s2 = 1.0 / (2.0 * sigma * sigma), t2 = trunc * trunc
    cdef double cx, cy, cz, d2, wgt, prod, best
    cdef Py_ssize_t b, n, z, y, x, z0, z1, y0, y1, x0, x1, best_i
    with nogil:
        for b in range(B):
            for n in range(N):
                cx = centers[b, n, 0]
                cy = centers[b, n, 1]
                cz = centers[b, n, 2]
                z0 = <Py_ssize_t>ceil(cz - trunc)
                z1 = <Py_ssize_t>floor(cz + trunc)
                y0 = <Py_ssize_t>ceil(cy - trunc)
                y1 = <Py_ssize_t>floor(cy + trunc)
                x0 = <Py_ssize_t>ceil(cx - trunc)
                x1 = <Py_ssize_t>floor(cx + trunc)
                if z0 < 0: z0 = 0
                if y0 < 0: y0 = 0
                if x0 < 0: x0 = 0
                if z1 > D - 1: z1 = D - 1
                if y1 > D - 1: y1 = D - 1
                if x1 > D - 1: x1 = D - 1
                best = -1.0
                best_i = -1
                wgt = 0.0
                for z in range(z0, z1 + 1):
                    for y in range(y0, y1 + 1):
                        for x in range(x0, x1 + 1):
                            d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy) + (z - cz) * (z - cz)
                            if d2 > t2:
                                continue
                            prod = grid[b, z, y, x] * exp(-d2 * inv2s2)
                            if prod > best:
                                best = prod
                                best_i = (z * D + y) * D + x
                                wgt = exp(-d2 * inv2s2)
                if best_i >= 0:
                    value[b, n] = best
                    index[b, n] = best_i
                    weight[b, n] = wgt
    return value_arr, index_arr, weight_arr
