"""Procedural chairs with analytic landmarks, voxel I/O and degradations.

Coordinates are normalized to the unit box: x is width (left = low x),
y is depth (front = low y, the back rest sits at high y), z is height.
Grids are stored as arrays indexed ``[z, y, x]`` so C-order flattening puts
x fastest.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .nets import LANDMARK_NAMES

# 1/16 and 15/16: lattice planes for every power-of-two D >= 16
FLOOR = 0.0625
CEIL = 0.9375
BOX_LO = 0.05
BOX_HI = 0.95
BACK_STYLES = ("full-panel", "two-post", "slatted")
LEG_STYLES = ("straight", "tapered")


@dataclass
class ChairParams:
    seat_width: float
    seat_depth: float
    seat_thickness: float
    seat_height: float
    leg_thickness: float
    back_height: float
    back_thickness: float
    back_style: str = "full-panel"
    leg_style: str = "straight"
    n_legs: int = 4
    unit: float = 1.0 / 32  # lattice spacing the extents were snapped to

    def to_dict(self) -> dict:
        return asdict(self)

    # derived extents
    @property
    def x0(self):
        return 0.5 - self.seat_width / 2

    @property
    def x1(self):
        return 0.5 + self.seat_width / 2

    @property
    def y0(self):
        return 0.5 - self.seat_depth / 2

    @property
    def y1(self):
        return 0.5 + self.seat_depth / 2

    @property
    def seat_top(self):
        return self.seat_height + self.seat_thickness

    @property
    def top(self):
        return self.seat_top + self.back_height


@dataclass
class Sample:
    shape: np.ndarray
    landmarks: np.ndarray | None
    params: ChairParams | None
    id: int
    meta: dict = field(default_factory=dict)


@dataclass
class DatasetSplit:
    train: list
    test: list
    annotated_train: list
    annotated_test: list
    seed: int


def min_thickness(dim: int) -> float:
    return 2.0 / dim


def check_params(p: ChairParams, dim: int = 32) -> bool:
    t = min_thickness(dim) - 1e-12
    lo, hi = BOX_LO - 1e-12, BOX_HI + 1e-12
    return (
        lo <= p.x0 and p.x1 <= hi and lo <= p.y0 and p.y1 <= hi
        and p.top <= hi and p.seat_height > FLOOR
        and p.back_height > 0
        and min(p.seat_thickness, p.leg_thickness, p.back_thickness) >= t
    )


def sample_chair(seed: int, dim: int = 32, hard: bool = False) -> ChairParams:
    """Draw chair parameters from fixed uniform ranges; deterministic per seed.

    Every extent is snapped to the 1/dim lattice so box faces sit on voxel
    boundaries; thicknesses are at least two voxels. With ``hard`` some
    chairs get zero or five legs.
    """
    rng = np.random.default_rng([seed, 0xC4A1])
    t = min_thickness(dim)

    def snap(v, lo=0.0):
        return max(lo, round(v * dim) / dim)

    seat_width = 2 * snap(rng.uniform(0.40, 0.62) / 2)
    seat_depth = 2 * snap(rng.uniform(0.40, 0.62) / 2)
    seat_thickness = snap(rng.uniform(t, t + 0.05), t)
    seat_height = snap(rng.uniform(0.28, 0.42))
    leg_thickness = snap(rng.uniform(t, t + 0.05), t)
    back_thickness = snap(rng.uniform(t, t + 0.04), t)
    room = CEIL - seat_height - seat_thickness
    back_height = snap(rng.uniform(0.6 * room, room), 1.0 / dim)
    back_style = BACK_STYLES[rng.integers(len(BACK_STYLES))]
    leg_style = LEG_STYLES[rng.integers(len(LEG_STYLES))]
    n_legs = 4
    if hard:
        n_legs = (0, 4, 5)[rng.integers(3)]
    return ChairParams(seat_width, seat_depth, seat_thickness, seat_height, leg_thickness,
                       back_height, back_thickness, back_style, leg_style, n_legs, 1.0 / dim)


def chair_boxes(p: ChairParams) -> list[tuple]:
    """Axis-aligned boxes (x0, x1, y0, y1, z0, z1) making up the chair."""
    u = p.unit
    boxes = []
    lt = p.leg_thickness
    x0, x1, y0, y1 = p.x0, p.x1, p.y0, p.y1
    boxes.append((x0, x1, y0, y1, p.seat_height, p.seat_top))
    if p.n_legs == 4:
        for lx, ly in ((x0, y0), (x1 - lt, y0), (x0, y1 - lt), (x1 - lt, y1 - lt)):
            if p.leg_style == "tapered":
                # upper half full width, lower half narrowed around the same axis
                mid = round((FLOOR + (p.seat_height - FLOOR) / 2) / u) * u
                thin = lt - 2 * u if lt >= 4 * u - 1e-12 else lt
                inset = (lt - thin) / 2
                boxes.append((lx, lx + lt, ly, ly + lt, mid, p.seat_height))
                boxes.append((lx + inset, lx + inset + thin, ly + inset, ly + inset + thin, FLOOR, mid))
            else:
                boxes.append((lx, lx + lt, ly, ly + lt, FLOOR, p.seat_height))
    elif p.n_legs == 5:
        cx, cy = 0.5, 0.5
        boxes.append((cx - lt / 2, cx + lt / 2, cy - lt / 2, cy + lt / 2, FLOOR + lt, p.seat_height))
        reach = min(p.seat_width, p.seat_depth) / 2
        for k in range(5):
            a = 2 * np.pi * k / 5
            ex, ey = cx + reach * np.cos(a), cy + reach * np.sin(a)
            boxes.append((min(cx, ex) - lt / 2, max(cx, ex) + lt / 2,
                          min(cy, ey) - lt / 2, max(cy, ey) + lt / 2, FLOOR, FLOOR + lt))
    else:
        # solid base down to the floor
        inset = lt
        boxes.append((x0 + inset, x1 - inset, y0 + inset, y1 - inset, FLOOR, p.seat_height))
    bt = p.back_thickness
    zb, zt = p.seat_top, p.top
    yb0 = y1 - bt
    if p.back_style == "full-panel":
        boxes.append((x0, x1, yb0, y1, zb, zt))
    else:
        rail = max(2 * u, bt)
        boxes.append((x0, x0 + lt, yb0, y1, zb, zt))
        boxes.append((x1 - lt, x1, yb0, y1, zb, zt))
        boxes.append((x0, x1, yb0, y1, zt - rail, zt))
        if p.back_style == "slatted":
            span = (x1 - lt) - (x0 + lt)
            sw = 2 * u
            n = 2 if span > 4 * sw else 1
            for k in range(n):
                cx = round((x0 + lt + span * (k + 1) / (n + 1)) / u) * u
                boxes.append((cx - sw / 2, cx + sw / 2, yb0, y1, zb, zt - rail))
    return boxes


def voxelize(p: ChairParams, D: int) -> np.ndarray:
    """Union of the chair's boxes rasterized by a voxel-center-inside test."""
    if D < 16:
        raise ValueError(f"voxelize needs D >= 16, got {D}")
    c = (np.arange(D) + 0.5) / D
    grid = np.zeros((D, D, D), dtype=np.uint8)
    for bx0, bx1, by0, by1, bz0, bz1 in chair_boxes(p):
        mx = (c >= bx0) & (c <= bx1)
        my = (c >= by0) & (c <= by1)
        mz = (c >= bz0) & (c <= bz1)
        grid |= (mz[:, None, None] & my[None, :, None] & mx[None, None, :]).astype(np.uint8)
    return grid


def analytic_landmarks(p: ChairParams) -> np.ndarray | None:
    """The 10 named landmarks in fixed order, or None for non-four-legged chairs."""
    if p.n_legs != 4:
        return None
    lt, h = p.leg_thickness, p.seat_top
    x0, x1, y0, y1 = p.x0, p.x1, p.y0, p.y1
    yb = y1 - p.back_thickness / 2
    pts = [
        (x0, yb, p.top),                       # back-topleft
        (x1, yb, p.top),                       # back-topright
        (x1 - lt / 2, y0 + lt / 2, FLOOR),     # leg-frontright
        (x0 + lt / 2, y0 + lt / 2, FLOOR),     # leg-frontleft
        (x0 + lt / 2, y1 - lt / 2, FLOOR),     # leg-backleft
        (x1 - lt / 2, y1 - lt / 2, FLOOR),     # leg-backright
        (x0, y1, h),                           # seat-backleft
        (x1, y1, h),                           # seat-backright
        (x0, y0, h),                           # seat-frontleft
        (x1, y0, h),                           # seat-frontright
    ]
    return np.clip(np.array(pts, dtype=np.float64), 0.0, 1.0)


def landmark_surface_distance(grid: np.ndarray, landmarks: np.ndarray) -> np.ndarray:
    """Voxel-unit distance from each landmark to the nearest occupied voxel center."""
    D = grid.shape[0]
    occ = np.argwhere(grid)[:, ::-1].astype(np.float64)  # (x, y, z)
    if occ.size == 0:
        return np.full(len(landmarks), np.inf)
    v = np.asarray(landmarks).reshape(-1, 3) * D - 0.5
    d2 = ((v[:, None, :] - occ[None]) ** 2).sum(axis=-1)
    return np.sqrt(d2.min(axis=1))


def make_sample(sample_id: int, seed: int, D: int, hard: bool = False) -> Sample:
    params = sample_chair(seed * 1_000_003 + sample_id, D, hard)
    return Sample(voxelize(params, D), analytic_landmarks(params), params, sample_id)


# ---------------------------------------------------------------- augmentation / degradation

def augment_scale(s: Sample, sx: float, sy: float, sz: float) -> Sample:
    """Scale about the box center: nearest-neighbor grid resampling under the
    inverse map, forward map for landmarks (clamped to [0,1])."""
    for f in (sx, sy, sz):
        if not 0.7 <= f < 1.3:
            raise ValueError(f"scale factor {f} outside [0.7, 1.3)")
    grid = s.shape
    D = grid.shape[0]
    c = (np.arange(D) + 0.5) / D
    idx = []
    for f in (sz, sy, sx):
        src = np.floor((0.5 + (c - 0.5) / f) * D).astype(np.int64)
        idx.append(src)
    iz, iy, ix = idx
    valid = ((iz >= 0) & (iz < D))[:, None, None] & ((iy >= 0) & (iy < D))[None, :, None] \
        & ((ix >= 0) & (ix < D))[None, None, :]
    out = grid[np.clip(iz, 0, D - 1)[:, None, None], np.clip(iy, 0, D - 1)[None, :, None],
               np.clip(ix, 0, D - 1)[None, None, :]] * valid
    out = out.astype(grid.dtype)
    # occupied voxels whose scaled center leaves the box are lost
    occ = np.argwhere(grid)
    fwd = 0.5 + ((occ + 0.5) / D - 0.5) * np.array([sz, sy, sx])
    clipped = bool(np.any((fwd < 0) | (fwd > 1)))
    lm = None
    if s.landmarks is not None:
        lm = 0.5 + (np.asarray(s.landmarks) - 0.5) * np.array([sx, sy, sz])
        clipped = clipped or bool(np.any((lm < 0) | (lm > 1)))
        lm = np.clip(lm, 0.0, 1.0)
    meta = dict(s.meta, scale=(sx, sy, sz), clipped=clipped)
    return Sample(out, lm, s.params, s.id, meta)


def sparsify(s: np.ndarray, level: float, seed: int) -> np.ndarray:
    """Zero each occupied voxel independently with probability ``level``."""
    if not 0.0 <= level <= 1.0:
        raise ValueError("level must be in [0, 1]")
    rng = np.random.default_rng(seed)
    keep = rng.random(s.shape) >= level
    return (s * keep).astype(s.dtype)


def dilate(s: np.ndarray, iterations: int) -> np.ndarray:
    """6-neighborhood binary dilation repeated ``iterations`` times."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    if iterations == 0:
        return s.copy()
    st = ndimage.generate_binary_structure(3, 1)
    return ndimage.binary_dilation(s > 0, structure=st, iterations=iterations).astype(s.dtype)


def crop(s: np.ndarray, axis: str, side: str, fraction: float) -> np.ndarray:
    """Remove an axis-aligned slab covering ``fraction`` (<= 1/3) of the box."""
    if not 0.0 <= fraction <= 1.0 / 3.0 + 1e-12:
        raise ValueError("crop fraction must be in [0, 1/3]")
    D = s.shape[0]
    n = int(round(fraction * D))
    out = s.copy()
    ax = {"z": 0, "y": 1, "x": 2}[axis]
    sl = [slice(None)] * 3
    sl[ax] = slice(0, n) if side == "low" else slice(D - n, D)
    out[tuple(sl)] = 0
    return out


def make_split(n_total: int, test_frac: float = 0.2, annotated_frac: float = 0.24,
               seed: int = 0) -> DatasetSplit:
    if not 0 < test_frac < 1 or not 0 <= annotated_frac < 1:
        raise ValueError("fractions must lie in (0, 1)")
    rng = np.random.default_rng([seed, 0x5917])
    perm = rng.permutation(n_total)
    n_test = int(round(n_total * test_frac))
    test, train = sorted(perm[:n_test].tolist()), sorted(perm[n_test:].tolist())
    # round up so small datasets keep at least one annotated sample per split
    n_at = math.ceil(len(train) * annotated_frac - 1e-9)
    n_ae = math.ceil(len(test) * annotated_frac - 1e-9)
    if annotated_frac > 0 and (n_at == 0 or n_ae == 0):
        raise ValueError(f"n_total={n_total} too small for non-empty annotated sets")
    ann_train = sorted(rng.permutation(train)[:n_at].tolist())
    ann_test = sorted(rng.permutation(test)[:n_ae].tolist())
    return DatasetSplit(train, test, ann_train, ann_test, seed)


# ---------------------------------------------------------------- files

VOXB_MAGIC = b"VOXB1"
VOXF_MAGIC = b"VOXF1"


def write_voxels(path, grid: np.ndarray) -> None:
    D = grid.shape[0]
    if grid.shape != (D, D, D):
        raise ValueError(f"expected a cubic grid, got {grid.shape}")
    if grid.dtype.kind in "biu":
        payload = VOXB_MAGIC + struct.pack("<I", D) + np.ascontiguousarray(grid, dtype=np.uint8).tobytes()
    else:
        payload = VOXF_MAGIC + struct.pack("<I", D) + np.ascontiguousarray(grid, dtype="<f4").tobytes()
    Path(path).write_bytes(payload)


def read_voxels(path) -> np.ndarray:
    """Load a VOXB1 (uint8) or VOXF1 (float32) grid; external data uses the same format."""
    buf = Path(path).read_bytes()
    magic = buf[:5]
    (D,) = struct.unpack_from("<I", buf, 5)
    if magic == VOXB_MAGIC:
        arr = np.frombuffer(buf, dtype=np.uint8, count=D ** 3, offset=9)
        if not np.all(arr <= 1):
            raise ValueError(f"{path}: binary grid contains values other than 0/1")
    elif magic == VOXF_MAGIC:
        arr = np.frombuffer(buf, dtype="<f4", count=D ** 3, offset=9).astype(np.float32)
    else:
        raise ValueError(f"{path}: unknown voxel file magic {magic!r}")
    return arr.reshape(D, D, D).copy()


def write_landmarks(path, points: np.ndarray) -> None:
    doc = {"order": list(LANDMARK_NAMES),
           "points": [[float(v) for v in p] for p in np.asarray(points).reshape(-1, 3)]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def read_landmarks(path) -> np.ndarray:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if list(doc["order"]) != list(LANDMARK_NAMES):
        raise ValueError(f"{path}: landmark order does not match {LANDMARK_NAMES}")
    pts = np.asarray(doc["points"], dtype=np.float64)
    if pts.shape != (10, 3):
        raise ValueError(f"{path}: expected 10 points")
    return pts


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def generate_dataset(out_dir, count: int, dim: int, seed: int, annotated_frac: float = 0.24,
                     test_frac: float = 0.2, hard: bool = False, threads: int = 1) -> dict:
    """Write shapes, landmark files for annotated samples, and manifest.json."""
    out = Path(out_dir)
    (out / "shapes").mkdir(parents=True, exist_ok=True)
    (out / "landmarks").mkdir(exist_ok=True)
    split = make_split(count, test_frac, annotated_frac, seed)
    annotated = set(split.annotated_train) | set(split.annotated_test)
    test = set(split.test)

    def build(i):
        return make_sample(i, seed, dim, hard)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            samples = list(pool.map(build, range(count)))
    else:
        samples = [build(i) for i in range(count)]

    config = {"count": count, "dim": dim, "seed": seed, "annotated_frac": annotated_frac,
              "test_frac": test_frac, "hard": hard}
    entries = []
    for smp in samples:
        i = smp.id
        shape_rel = f"shapes/{i:06d}.voxb"
        write_voxels(out / shape_rel, smp.shape)
        is_ann = i in annotated and smp.landmarks is not None
        lm_rel = None
        if is_ann:
            lm_rel = f"landmarks/{i:06d}.json"
            write_landmarks(out / lm_rel, smp.landmarks)
        entries.append({"id": i, "shape": shape_rel, "landmarks": lm_rel,
                        "split": "test" if i in test else "train", "annotated": is_ann})
    manifest = {"format": "voxelstruct-dataset/1", "generator_seed": seed, "config": config,
                "config_hash": config_hash(config), "samples": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


@dataclass
class LoadedData:
    ids: np.ndarray
    shapes: np.ndarray          # [n, D, D, D] uint8
    landmarks: np.ndarray       # [n, 10, 3], NaN where absent
    annotated: np.ndarray       # [n] bool
    split: np.ndarray           # [n] "train"/"test"
    manifest: dict

    def subset(self, mask) -> "LoadedData":
        return LoadedData(self.ids[mask], self.shapes[mask], self.landmarks[mask],
                          self.annotated[mask], self.split[mask], self.manifest)

    @property
    def train(self):
        return self.subset(self.split == "train")

    @property
    def test(self):
        return self.subset(self.split == "test")

    @property
    def labeled(self):
        return self.subset(self.annotated)


def load_dataset(data_dir) -> LoadedData:
    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    ids, shapes, lms, ann, split = [], [], [], [], []
    for e in manifest["samples"]:
        ids.append(e["id"])
        shapes.append(read_voxels(root / e["shape"]))
        if e["landmarks"]:
            lms.append(read_landmarks(root / e["landmarks"]))
        else:
            lms.append(np.full((10, 3), np.nan))
        ann.append(bool(e["annotated"]))
        split.append(e["split"])
    return LoadedData(np.array(ids), np.stack(shapes), np.stack(lms), np.array(ann),
                      np.array(split), manifest)


def in_memory_dataset(count: int, dim: int, seed: int, hard: bool = False):
    """(shapes [n,D,D,D] uint8, landmarks [n,10,3]) without touching disk."""
    samples = [make_sample(i, seed, dim, hard) for i in range(count)]
    shapes = np.stack([s.shape for s in samples])
    lms = np.stack([s.landmarks if s.landmarks is not None else np.full((10, 3), np.nan)
                    for s in samples])
    return shapes, lms
