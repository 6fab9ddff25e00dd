"""Evaluation protocols and artifact export."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import spearmanr

from . import losses as L
from . import nets
from .dataset import crop, dilate, sparsify
from .nets import LANDMARK_NAMES, NetConfig

# Reference numbers reported at 64^3 on ShapeNet chairs; kept for comparison
# only, they are not reproduced by desk-scale runs.
REFERENCE_COMPLETION_IOU = {
    "dense": {"shape_only": 0.22, "structure_aware": 0.25},
    "sparse": {"shape_only": 0.05, "structure_aware": 0.14},
}
REFERENCE_CONSISTENCY = {
    "overall": (0.18, 0.53),
    "back-topleft": (0.20, 0.57),
    "back-topright": (0.23, 0.58),
    "leg-frontright": (0.09, 0.39),
    "leg-frontleft": (0.12, 0.40),
    "leg-backleft": (0.16, 0.43),
    "leg-backright": (0.07, 0.46),
    "seat-backleft": (0.26, 0.63),
    "seat-backright": (0.25, 0.64),
    "seat-frontleft": (0.23, 0.59),
    "seat-frontright": (0.24, 0.59),
}


def _binary(a, threshold):
    return np.asarray(a) > threshold if np.asarray(a).dtype.kind == "f" else np.asarray(a) != 0


def iou_flagged(a, b, threshold: float = 0.5) -> tuple[float, bool]:
    """(IoU, both_empty). Float grids are binarized at ``threshold``."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"iou: shape mismatch {a.shape} vs {b.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    ba, bb = _binary(a, threshold), _binary(b, threshold)
    union = np.count_nonzero(ba | bb)
    if union == 0:
        return 1.0, True
    return np.count_nonzero(ba & bb) / union, False


def iou(a, b, threshold: float = 0.5) -> float:
    """Intersection over union of the thresholded grids; two empty grids give 1.0."""
    return iou_flagged(a, b, threshold)[0]


# ---------------------------------------------------------------- reports

@dataclass
class EvalReport:
    protocol: str
    rows: list[dict]
    aggregates: dict = field(default_factory=dict)
    config_hash: str = ""
    seeds: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_rows(cls, protocol, rows, config_hash="", seeds=(), group_by: str | None = None,
                  extra: dict | None = None) -> "EvalReport":
        return cls(protocol, rows, aggregate(rows, group_by), config_hash, list(seeds), extra or {})

    def columns(self) -> list[str]:
        cols: list[str] = []
        for r in self.rows:
            cols += [k for k in r if k not in cols]
        return cols

    def write(self, out_dir, stem: str | None = None) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or self.protocol
        csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
        cols = self.columns()
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                w.writerow([_fmt(r.get(c, "")) for c in cols])
        doc = {"protocol": self.protocol, "config_hash": self.config_hash, "seeds": self.seeds,
               "n_rows": len(self.rows), "aggregates": self.aggregates, **self.extra}
        json_path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")
        return csv_path, json_path


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _numeric_cols(rows, skip=()):
    cols = []
    for r in rows:
        for k, v in r.items():
            if k in cols or k in skip or isinstance(v, (bool, np.bool_, str)):
                continue
            if isinstance(v, (int, float, np.integer, np.floating)):
                cols.append(k)
    return cols


def _stats(rows, cols):
    out = {}
    for c in cols:
        v = np.array([float(r[c]) for r in rows if c in r])
        out[c] = {"mean": float(v.mean()), "std": float(v.std()), "n": int(v.size)}
    return out


def aggregate(rows: Sequence[dict], group_by: str | None = None) -> dict:
    """Mean/std/n of every numeric column, optionally per value of ``group_by``."""
    skip = {"id", "seed", "sample", group_by} - {None}
    cols = _numeric_cols(rows, skip)
    if group_by is None:
        return _stats(rows, cols)
    groups: dict = {}
    for r in rows:
        groups.setdefault(str(r[group_by]), []).append(r)
    return {g: _stats(rs, cols) for g, rs in groups.items()}


# ---------------------------------------------------------------- degradation

@dataclass
class Degradation:
    sparsify: float = 0.0
    dilate: int = 0
    crop_axis: str | None = None
    crop_side: str = "low"
    crop_fraction: float = 0.0

    def apply(self, grid: np.ndarray, seed: int) -> np.ndarray:
        g = np.asarray(grid)
        if self.crop_axis is not None and self.crop_fraction > 0:
            g = crop(g, self.crop_axis, self.crop_side, self.crop_fraction)
        if self.sparsify > 0:
            g = sparsify(g, self.sparsify, seed)
        if self.dilate > 0:
            g = dilate(g, self.dilate)
        return g

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _recon_batch(enc, gen, grids, cfg: NetConfig, batch: int = 64) -> np.ndarray:
    dt = next(iter(gen.values())).dtype
    out = [nets.reconstruct(enc, gen, np.asarray(grids[i:i + batch], dtype=dt), cfg)
           for i in range(0, len(grids), batch)]
    return np.concatenate(out) if out else np.zeros((0,) + (cfg.grid_dim,) * 3)


def completion_eval(enc: Mapping, gen: Mapping, shapes: np.ndarray, cfg: NetConfig,
                    degradation: Degradation | None = None, threshold: float = 0.5,
                    seed: int = 0, ids: Sequence[int] | None = None,
                    config_hash: str = "") -> EvalReport:
    """Degrade, encode (mean), generate, and score IoU against the clean shape.

    The degradation of sample ``ids[j]`` uses seed ``seed * 1_000_003 + ids[j]``.
    """
    degradation = degradation or Degradation()
    shapes = np.asarray(shapes)
    ids = list(range(len(shapes))) if ids is None else [int(i) for i in ids]
    degraded = np.stack([degradation.apply(g, seed * 1_000_003 + i) for g, i in zip(shapes, ids)]) \
        if len(shapes) else shapes
    recon = _recon_batch(enc, gen, degraded, cfg)
    rows = []
    for i, r, g in zip(ids, recon, shapes):
        v, empty = iou_flagged(r, g, threshold)
        rows.append({"id": i, "seed": seed, "iou": v, "both_empty": empty})
    return EvalReport.from_rows("complete", rows, config_hash, [seed],
                                extra={"degradation": degradation.to_dict(), "threshold": threshold})


def sparseness_sweep(models: Mapping[str, tuple], shapes: np.ndarray, cfg: NetConfig,
                     levels: Sequence[float], seeds: Sequence[int] = (0,), threshold: float = 0.5,
                     config_hash: str = "") -> EvalReport:
    """Mean completion IoU for each (model, level) over samples and seeds.

    ``models`` maps a name to (enc, gen). The JSON aggregates carry each
    model's Spearman correlation between level and mean IoU.
    """
    for lv in levels:
        if not 0.0 <= lv <= 1.0:
            raise ValueError(f"sparseness level {lv} outside [0, 1]")
    rows, trend = [], {}
    for name, (enc, gen) in models.items():
        means = []
        for lv in levels:
            vals = []
            for sd in seeds:
                rep = completion_eval(enc, gen, shapes, cfg, Degradation(sparsify=lv), threshold, sd)
                vals += [r["iou"] for r in rep.rows]
            v = np.array(vals)
            rows.append({"model": name, "level": float(lv), "mean_iou": float(v.mean()),
                         "std_iou": float(v.std()), "n": int(v.size)})
            means.append(v.mean())
        rho = spearmanr(levels, means).statistic if len(levels) > 1 else float("nan")
        trend[name] = None if not np.isfinite(rho) else float(rho)
    return EvalReport.from_rows("sweep", rows, config_hash, list(seeds), group_by="model",
                                extra={"spearman_rho": trend, "levels": [float(x) for x in levels]})


def paired_sweep_rows(report: EvalReport, a: str, b: str) -> list[dict]:
    """Per-level comparison rows (b minus a) for two models of a sweep."""
    by = {(r["model"], r["level"]): r["mean_iou"] for r in report.rows}
    levels = sorted({r["level"] for r in report.rows})
    return [{"level": lv, a: by[(a, lv)], b: by[(b, lv)], "delta": by[(b, lv)] - by[(a, lv)]}
            for lv in levels]


# ---------------------------------------------------------------- interpolation

@dataclass
class InterpolationTrack:
    endpoints: tuple
    ts: np.ndarray
    codes: np.ndarray        # [K, Z]
    grids: np.ndarray        # [K, D, D, D]
    landmarks: np.ndarray | None = None   # [K, 10, 3]

    def smoothness(self, threshold: float = 0.5) -> float:
        """Mean IoU between consecutive frames."""
        return float(np.mean([iou(self.grids[i], self.grids[i + 1], threshold)
                              for i in range(len(self.grids) - 1)]))


def interpolate(enc: Mapping, gen: Mapping, a: np.ndarray, b: np.ndarray, K: int, cfg: NetConfig,
                det: Mapping | None = None, endpoint_ids=(0, 1)) -> InterpolationTrack:
    """Straight-line path between the encoder means of two shapes."""
    if K < 2:
        raise ValueError("interpolate needs K >= 2")
    dt = next(iter(enc.values())).dtype
    mu = nets.encode_mean(enc, np.stack([a, b]).astype(dt), cfg)
    ts = np.arange(K) / (K - 1)
    codes = ((1.0 - ts)[:, None] * mu[0] + ts[:, None] * mu[1]).astype(dt)
    grids = nets.generate(gen, codes, cfg).data
    lms = None
    if det is not None:
        lms = nets.detect(det, grids, cfg).data.reshape(K, -1, 3)
    return InterpolationTrack(tuple(endpoint_ids), ts, codes, grids, lms)


# ---------------------------------------------------------------- consistency

def prior_samples(n: int, latent_dim: int, seed: int, dtype=np.float32) -> np.ndarray:
    return np.random.default_rng([int(seed), 0x5EED]).standard_normal((n, latent_dim)).astype(dtype)


def consistency_report(gen: Mapping, det: Mapping, cfg: NetConfig, n_samples: int, seed: int,
                       config_hash: str = "", batch: int = 64) -> EvalReport:
    """Per-landmark consistency of generated shapes with their detected landmarks.

    Rows hold one prior sample each: the 10 per-landmark scores in the fixed
    landmark order plus ``mean`` (their average). Aggregates: per-landmark
    means, ``overall`` (mean over samples and landmarks) and ``total_M``
    (mean of the summed score).
    """
    dt = next(iter(gen.values())).dtype
    z = prior_samples(n_samples, cfg.latent_dim, seed, dt)
    per = []
    for i in range(0, n_samples, batch):
        s = nets.generate(gen, z[i:i + batch], cfg).data
        lm = nets.detect(det, s, cfg).data
        per.append(L.consistency_measure(s, lm).per_landmark)
    per = np.concatenate(per) if per else np.zeros((0, len(LANDMARK_NAMES)))
    rows = []
    for j, vals in enumerate(per):
        row = {"sample": j}
        row.update({name: float(v) for name, v in zip(LANDMARK_NAMES, vals)})
        row["mean"] = float(vals.mean())
        rows.append(row)
    agg = {name: float(per[:, k].mean()) for k, name in enumerate(LANDMARK_NAMES)}
    agg["overall"] = float(per.mean())
    agg["total_M"] = float(per.sum(axis=1).mean())
    return EvalReport("consistency", rows, agg, config_hash, [seed],
                      extra={"reference": {k: {"shape_only": v[0], "structure_aware": v[1]}
                                           for k, v in REFERENCE_CONSISTENCY.items()}})


# ---------------------------------------------------------------- export

def _write_pgm(path: Path, img: np.ndarray):
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.astype(np.uint8).tobytes())


def export_views(grid: np.ndarray, out_prefix, threshold: float = 0.5) -> list[Path]:
    """Three mid-axis slices as binary PGM and an ``x y z value`` point file.

    Slices are taken at index D//2 along z, y and x; pixel value is
    round(255 * occupancy). Points list voxel centers in normalized
    coordinates for voxels above ``threshold``.
    """
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 3 or len(set(g.shape)) != 1:
        raise ValueError(f"export_views expects a cubic grid, got {g.shape}")
    D = g.shape[0]
    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    m = D // 2
    slices = {"z": g[m, :, :], "y": g[:, m, :], "x": g[:, :, m]}
    paths = []
    for ax, sl in slices.items():
        p = prefix.with_name(f"{prefix.name}_{ax}.pgm")
        # rows top-to-bottom show decreasing z / y for readability
        _write_pgm(p, np.rint(np.clip(sl[::-1], 0.0, 1.0) * 255))
        paths.append(p)
    pts = prefix.with_name(f"{prefix.name}_points.txt")
    zz, yy, xx = np.nonzero(g > threshold)
    with open(pts, "w") as fh:
        for x, y, z in zip(xx, yy, zz):
            fh.write(f"{(x + 0.5) / D:.6f} {(y + 0.5) / D:.6f} {(z + 0.5) / D:.6f} {g[z, y, x]:.6f}\n")
    paths.append(pts)
    return paths


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)

