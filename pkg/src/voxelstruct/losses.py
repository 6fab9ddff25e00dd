"""Shape, structure and shape-structure consistency losses."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from . import tensor as T
from .tensor import Tensor

BCE_CLAMP = 1e-7


@dataclass
class LossWeights:
    alpha1: float = 0.1
    alpha2: float = 27.0
    struct_correctness_weight: float = 1.0
    struct_robustness_weight: float = 1.0
    kl_weight: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be non-negative, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ConsistencyScore:
    per_landmark: np.ndarray  # [N] or [B, N]
    total: np.ndarray | float


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------- VAE terms

def recon_loss(pred, target) -> Tensor:
    """Batch mean of the per-item summed binary cross-entropy."""
    pred = _t(pred)
    tgt = np.asarray(target.data if isinstance(target, Tensor) else target)
    if pred.shape != tgt.shape:
        raise T.DimensionError(f"recon_loss: pred {pred.shape} vs target {tgt.shape}")
    if not np.all((tgt == 0) | (tgt == 1)):
        raise ValueError("recon_loss: target must be binary")
    tgt = tgt.astype(pred.dtype)
    p = T.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    ll = tgt * T.log(p) + (1.0 - tgt) * T.log(1.0 - p)
    B = pred.shape[0]
    return ll.sum() * (-1.0 / B)


def kl_loss(mu, logvar) -> Tensor:
    """Closed-form KL(N(mu, exp(logvar)) || N(0, I)), averaged over the batch."""
    mu, logvar = _t(mu), _t(logvar)
    if mu.shape != logvar.shape:
        raise T.DimensionError(f"kl_loss: mu {mu.shape} vs logvar {logvar.shape}")
    terms = mu * mu + T.exp(logvar) - 1.0 - logvar
    return terms.sum() * (0.5 / mu.shape[0])


# ---------------------------------------------------------------- structure

def point_distance(diff: Tensor) -> Tensor:
    """Euclidean norm over the last axis; the gradient at zero distance is zero."""
    v = diff.data
    d = np.sqrt((v * v).sum(axis=-1))
    safe = np.where(d > 0, d, 1.0)

    def vjp(g, n):
        return ((g / safe * (d > 0))[..., None] * v,)

    return T.make("norm", d, (diff,), vjp)


def _mean_landmark_distance(pred: Tensor, truth) -> Tensor:
    """Per-batch mean over items and landmarks of Euclidean distance."""
    B = pred.shape[0]
    return point_distance((pred - truth).reshape(B, -1, 3)).mean()


def struct_loss(pred_clean, pred_recon, truth, w: LossWeights | None = None) -> Tensor:
    """Correctness term on clean shapes plus robustness term on reconstructions.

    ``pred_recon`` may be None, in which case only the correctness term is used.
    """
    w = w or LossWeights()
    pred_clean = _t(pred_clean)
    truth = np.asarray(truth.data if isinstance(truth, Tensor) else truth, dtype=pred_clean.dtype)
    if pred_clean.shape != truth.shape or pred_clean.data.ndim != 2 or pred_clean.shape[1] % 3:
        raise T.DimensionError(f"struct_loss: pred {pred_clean.shape} vs truth {truth.shape}")
    loss = _mean_landmark_distance(pred_clean, truth) * w.struct_correctness_weight
    if pred_recon is not None:
        pred_recon = _t(pred_recon)
        if pred_recon.shape != truth.shape:
            raise T.DimensionError(f"struct_loss: recon pred {pred_recon.shape} vs truth {truth.shape}")
        loss = loss + _mean_landmark_distance(pred_recon, truth) * w.struct_robustness_weight
    return loss


# ---------------------------------------------------------------- consistency

def effective_sigma(grid_dim: int, sigma_at_64: float = 2.0) -> float:
    """Gaussian width in voxels, keeping the physical extent of sigma=2 at 64^3."""
    return max(1.0, sigma_at_64 * grid_dim / 64.0)


def landmarks_to_voxel(points: np.ndarray, D: int) -> np.ndarray:
    """Normalized (x,y,z) -> voxel-space coordinates with centers at integers."""
    return np.clip(points, 0.0, 1.0) * D - 0.5


def consistency_measure(s, landmarks, sigma: float | None = None, trunc: float | None = None) -> ConsistencyScore:
    """Per-landmark max of occupancy times a truncated Gaussian around the landmark.

    ``s`` is one grid [D,D,D] (indexed [z,y,x]) or a batch; ``landmarks`` is
    [N,3] / [3N] or the batched equivalent, in normalized coordinates.
    """
    grid = np.asarray(s.data if isinstance(s, Tensor) else s)
    single = grid.ndim == 3
    if single:
        grid = grid[None]
    D = grid.shape[-1]
    pts = np.asarray(landmarks.data if isinstance(landmarks, Tensor) else landmarks, dtype=np.float64)
    pts = pts.reshape(grid.shape[0], -1, 3)
    sigma = effective_sigma(D) if sigma is None else sigma
    trunc = 2.0 * sigma if trunc is None else trunc
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    centers = np.ascontiguousarray(landmarks_to_voxel(pts, D))
    value, _, _ = kernels.neighborhood_max(np.ascontiguousarray(grid), centers, float(sigma), float(trunc))
    total = value.sum(axis=1)
    if single:
        return ConsistencyScore(value[0], float(total[0]))
    return ConsistencyScore(value, total)


def consistency_values(s, landmarks, sigma: float, trunc: float) -> Tensor:
    """Differentiable per-landmark measure [B, N].

    The argmax voxel is fixed during backward (as in max-pooling); gradients
    reach the grid at that voxel and the landmark through the Gaussian weight.
    """
    s, landmarks = _t(s), _t(landmarks)
    grid = np.ascontiguousarray(s.data)
    B, D = grid.shape[0], grid.shape[-1]
    raw = landmarks.data.reshape(B, -1, 3).astype(np.float64)
    N = raw.shape[1]
    inside = (raw >= 0.0) & (raw <= 1.0)
    centers = np.ascontiguousarray(landmarks_to_voxel(raw, D))
    value, idx, weight = kernels.neighborhood_max(grid, centers, float(sigma), float(trunc))
    found = idx >= 0
    safe = np.where(found, idx, 0)
    vz, rem = np.divmod(safe, D * D)
    vy, vx = np.divmod(rem, D)
    vox = np.stack([vx, vy, vz], axis=-1).astype(np.float64)
    occ = grid.reshape(B, -1)[np.arange(B)[:, None], safe] * found
    inv_s2 = 1.0 / (sigma * sigma)
    dtype = s.dtype
    lshape = landmarks.shape

    def vjp(g, n):
        gs = gl = None
        if n[0]:
            gs = np.zeros(grid.shape, dtype=dtype).reshape(B, -1)
            # landmarks sharing an argmax voxel accumulate
            np.add.at(gs, (np.repeat(np.arange(B), N)[found.ravel()], idx[found]),
                      (g * weight)[found].astype(dtype))
            gs = gs.reshape(grid.shape)
        if n[1]:
            # d/dc of s * exp(-|v-c|^2 / 2s^2) = s * w * (v - c) / s^2; dc/dp = D inside the clamp
            dval = (occ * weight * found)[..., None] * (vox - centers) * inv_s2
            gl = (g[..., None] * dval * D * inside).reshape(lshape).astype(dtype)
        return gs, gl

    return T.make("consistency", value.astype(dtype), (s, landmarks), vjp)


def consistency_loss(s, landmarks, sigma: float | None = None, trunc: float | None = None,
                     eps: float = 1e-6) -> Tensor:
    """Batch mean of 1 / (M + eps) with M the summed per-landmark measure."""
    s = _t(s)
    D = s.shape[-1]
    sigma = effective_sigma(D) if sigma is None else sigma
    trunc = 2.0 * sigma if trunc is None else trunc
    M = consistency_values(s, landmarks, sigma, trunc).sum(axis=1)
    return (1.0 / (M + eps)).mean()


def shape_total_loss(recon, kl, consist, w: LossWeights | None = None) -> Tensor:
    w = w or LossWeights()
    return (_t(recon) + _t(kl) * w.kl_weight) * w.alpha1 + _t(consist) * w.alpha2
