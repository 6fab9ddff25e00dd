"""Independent reference implementations used only by the tests."""
import math

import numpy as np


def bce_loop(pred, target, clamp=1e-7):
    total = 0.0
    B = pred.shape[0]
    for b in range(B):
        for p, t in zip(pred[b].ravel().tolist(), target[b].ravel().tolist()):
            p = min(max(p, clamp), 1 - clamp)
            total -= t * math.log(p) + (1 - t) * math.log(1 - p)
    return total / B


def kl_monte_carlo(mu, logvar, n, rng):
    """E_q[log q(z) - log p(z)] for diagonal Gaussians, averaged over rows."""
    out = 0.0
    for m, lv in zip(mu, logvar):
        sd = np.exp(0.5 * lv)
        z = m + sd * rng.standard_normal((n, m.size))
        logq = -0.5 * (((z - m) / sd) ** 2 + lv + np.log(2 * np.pi)).sum(axis=1)
        logp = -0.5 * (z ** 2 + np.log(2 * np.pi)).sum(axis=1)
        out += float(np.mean(logq - logp))
    return out / len(mu)


def consistency_brute(grid, points, sigma, trunc):
    """Full-grid scan: every voxel's distance to every landmark, no windowing."""
    D = grid.shape[0]
    z, y, x = np.meshgrid(np.arange(D), np.arange(D), np.arange(D), indexing="ij")
    per = []
    for p in np.asarray(points).reshape(-1, 3):
        c = np.clip(p, 0, 1) * D - 0.5
        d2 = (x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2
        prod = np.where(d2 <= trunc * trunc, grid * np.exp(-d2 / (2 * sigma * sigma)), -np.inf)
        m = prod.max()
        per.append(0.0 if m == -np.inf else float(m))
    return np.array(per)


def iou_count(a, b):
    """Set-based IoU of voxel index tuples."""
    sa = {tuple(i) for i in np.argwhere(a)}
    sb = {tuple(i) for i in np.argwhere(b)}
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)
