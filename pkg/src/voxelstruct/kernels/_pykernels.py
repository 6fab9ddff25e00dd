"""NumPy implementations of the hot kernels.

Used when the compiled extension is unavailable or when
``VOXELSTRUCT_PURE_PYTHON=1`` is set. Signatures match ``_ckernels``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col3d(xp, k, stride, out_shape):
    """Unfold a padded [B,C,D,H,W] array into [B, C*k^3, Do*Ho*Wo] columns."""
    B, C = xp.shape[:2]
    Do, Ho, Wo = out_shape
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    win = win[:, :, : (Do - 1) * stride + 1 : stride,
              : (Ho - 1) * stride + 1 : stride,
              : (Wo - 1) * stride + 1 : stride]
    # [B,C,Do,Ho,Wo,k,k,k] -> [B,C,k,k,k,Do,Ho,Wo]
    cols = win.transpose(0, 1, 5, 6, 7, 2, 3, 4)
    return np.ascontiguousarray(cols).reshape(B, C * k ** 3, Do * Ho * Wo)


def col2im3d(cols, padded_shape, k, stride, out_shape):
    """Adjoint of ``im2col3d``: scatter-add columns back into a padded array."""
    B, C = padded_shape[:2]
    Do, Ho, Wo = out_shape
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    c6 = cols.reshape(B, C, k, k, k, Do, Ho, Wo)
    ez, ey, ex = (Do - 1) * stride + 1, (Ho - 1) * stride + 1, (Wo - 1) * stride + 1
    for a in range(k):
        for b in range(k):
            for c in range(k):
                xp[:, :, a:a + ez:stride, b:b + ey:stride, c:c + ex:stride] += c6[:, :, a, b, c]
    return xp


def maxpool3d_forward(x, w):
    """Non-overlapping max pool. Returns (out, argmax) with argmax the
    window-local index in (dz, dy, dx) row-major order, first index on ties."""
    B, C, D, H, W = x.shape
    v = x.reshape(B, C, D // w, w, H // w, w, W // w, w)
    v = v.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(B, C, D // w, H // w, W // w, w ** 3)
    idx = np.argmax(v, axis=-1)
    out = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int64)


def maxpool3d_backward(g, idx, w, in_shape):
    B, C, D, H, W = in_shape
    Do, Ho, Wo = D // w, H // w, W // w
    buf = np.zeros((B, C, Do, Ho, Wo, w ** 3), dtype=g.dtype)
    np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
    buf = buf.reshape(B, C, Do, Ho, Wo, w, w, w).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    return buf.reshape(B, C, D, H, W)


def neighborhood_max(grid, centers, sigma, trunc):
    """Gaussian-weighted max over the truncated ball around each center.

    grid: [B, D, D, D] indexed [z, y, x]; centers: [B, N, 3] voxel-space (x, y, z).
    Returns (value [B,N], flat index [B,N] (-1 if the ball is empty),
    weight [B,N]). Scan order is ascending flat index; strict '>' keeps the
    first maximum.
    """
    B, N = centers.shape[:2]
    D = grid.shape[1]
    value = np.zeros((B, N), dtype=np.float64)
    index = np.full((B, N), -1, dtype=np.int64)
    weight = np.zeros((B, N), dtype=np.float64)
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    t2 = trunc * trunc
    for b in range(B):
        flat = grid[b].reshape(-1)
        for n in range(N):
            cx, cy, cz = centers[b, n]
            lo = [max(0, int(np.ceil(c - trunc))) for c in (cz, cy, cx)]
            hi = [min(D - 1, int(np.floor(c + trunc))) for c in (cz, cy, cx)]
            if lo[0] > hi[0] or lo[1] > hi[1] or lo[2] > hi[2]:
                continue
            zz, yy, xx = np.meshgrid(np.arange(lo[0], hi[0] + 1),
                                     np.arange(lo[1], hi[1] + 1),
                                     np.arange(lo[2], hi[2] + 1), indexing="ij")
            d2 = (xx - cx) ** 2 + (yy - cy) ** 2 + (zz - cz) ** 2
            inside = d2 <= t2
            if not inside.any():
                continue
            lin = ((zz * D + yy) * D + xx)[inside]
            w = np.exp(-d2[inside] * inv2s2)
            prod = flat[lin] * w
            j = int(np.argmax(prod))
            value[b, n] = prod[j]
            index[b, n] = lin[j]
            weight[b, n] = w[j]
    return value, index, weight
