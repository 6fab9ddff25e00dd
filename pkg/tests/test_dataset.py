import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage
from oracles import iou_count

from voxelstruct import dataset as ds
from voxelstruct.nets import LANDMARK_NAMES


def test_sample_chair_deterministic():
    assert ds.sample_chair(11) == ds.sample_chair(11)
    assert ds.sample_chair(11) != ds.sample_chair(12)


def test_sample_chair_invariants_sweep():
    for seed in range(1000):
        assert ds.check_params(ds.sample_chair(seed, 32), 32), seed


def test_sample_chair_style_variety():
    assert len({ds.sample_chair(s).back_style for s in range(5)}) >= 2


def test_voxelize_seat_at_height():
    p = ds.ChairParams(0.5, 0.5, 0.0625, 0.5, 0.0625, 0.25, 0.0625)
    g = ds.voxelize(p, 32)
    z = int(0.5 * 32)
    assert g[z, 16, 16] == 1  # seat footprint center at seat height
    assert g[z, 16, :].sum() >= 0.5 * 32 - 1


def test_voxelize_occupancy_range():
    fr = [ds.voxelize(ds.sample_chair(s, 32), 32).mean() for s in range(200)]
    assert min(fr) >= 0.01 and max(fr) <= 0.30


def test_voxelize_resolution_consistency():
    for s in range(50):
        p = ds.sample_chair(s, 32)
        a, b = ds.voxelize(p, 32).mean(), ds.voxelize(p, 64).mean()
        assert abs(b - a) / a < 0.2


def test_voxelize_rejects_small_grid():
    with pytest.raises(ValueError):
        ds.voxelize(ds.sample_chair(0), 8)


def test_landmarks_construction():
    p = ds.sample_chair(3, 32)
    lm = ds.analytic_landmarks(p)
    assert lm.shape == (10, 3)
    assert np.allclose(lm[2:6, 2], ds.FLOOR)
    assert np.allclose(lm[6:10, 2], p.seat_height + p.seat_thickness)
    assert np.all(lm[:2, 2] > lm[6:, 2].max())


def test_landmarks_near_surface_sweep():
    for s in range(500):
        p = ds.sample_chair(s, 32)
        d = ds.landmark_surface_distance(ds.voxelize(p, 32), ds.analytic_landmarks(p))
        assert d.max() <= 1.0, s


def test_hard_chairs_have_no_landmarks():
    ps = [ds.sample_chair(s, 32, hard=True) for s in range(30)]
    assert {p.n_legs for p in ps} == {0, 4, 5}
    for p in ps:
        assert (ds.analytic_landmarks(p) is None) == (p.n_legs != 4)
        assert ds.voxelize(p, 32).sum() > 0


# ---------------------------------------------------------------- augmentation

def _sample(seed=0, D=32):
    return ds.make_sample(seed, 0, D)


def test_augment_identity():
    s = _sample()
    a = ds.augment_scale(s, 1.0, 1.0, 1.0)
    assert np.array_equal(a.shape, s.shape)
    assert np.array_equal(a.landmarks, s.landmarks)


def test_augment_landmark_arithmetic():
    s = ds.Sample(np.zeros((16, 16, 16), np.uint8), np.tile([0.5, 0.5, 0.8], (10, 1)), None, 0)
    a = ds.augment_scale(s, 1.0, 1.0, 1.25)
    assert a.landmarks[0, 2] == pytest.approx(0.875, abs=1e-15)


def test_augment_landmarks_affine_random(rng):
    for _ in range(1000):
        lm = rng.random((10, 3))
        f = rng.uniform(0.7, 1.3, 3)
        s = ds.Sample(np.zeros((16, 16, 16), np.uint8), lm, None, 0)
        out = ds.augment_scale(s, *f).landmarks
        assert np.max(np.abs(out - np.clip(0.5 + (lm - 0.5) * f, 0, 1))) <= 1e-12


def _near(a, b):
    """Every voxel of a lies within one voxel (26-neighborhood) of b."""
    return np.all(a <= ndimage.binary_dilation(b, np.ones((3, 3, 3), bool)))


@pytest.mark.parametrize("f", np.linspace(0.8, 1.2, 9))
def test_augment_round_trip_moves_surfaces_at_most_one_voxel(f):
    for seed in range(10):
        s = _sample(seed)
        fwd = ds.augment_scale(s, f, f, f)
        back = ds.augment_scale(fwd, 1 / f, 1 / f, 1 / f).shape.astype(bool)
        g = s.shape.astype(bool)
        assert _near(back, g)
        if not fwd.meta["clipped"]:
            assert _near(g, back)
            if f > 1:
                assert np.array_equal(back, g)  # enlarging first loses nothing


def test_augment_round_trip_iou_enlarging():
    for seed in range(5):
        s = _sample(seed)
        for f in (1.05, 1.1):
            back = ds.augment_scale(ds.augment_scale(s, f, f, f), 1 / f, 1 / f, 1 / f)
            assert iou_count(back.shape, s.shape) >= 0.85


def test_augment_flags_clipping():
    s = _sample(1)
    assert not ds.augment_scale(s, 0.9, 0.9, 0.9).meta["clipped"]
    assert ds.augment_scale(s, 1.29, 1.29, 1.29).meta["clipped"]


def test_augment_rejects_out_of_range():
    with pytest.raises(ValueError):
        ds.augment_scale(_sample(), 1.3, 1.0, 1.0)


# ---------------------------------------------------------------- degradations

def test_sparsify_extremes():
    g = _sample().shape
    assert np.array_equal(ds.sparsify(g, 0.0, 1), g)
    assert ds.sparsify(g, 1.0, 1).sum() == 0
    assert np.array_equal(ds.sparsify(g, 0.3, 5), ds.sparsify(g, 0.3, 5))


def test_sparsify_half_concentration():
    g = np.ones((16, 16, 16), np.uint8)
    for seed in range(10):
        frac = ds.sparsify(g, 0.5, seed).sum() / g.sum()
        assert 0.45 <= frac <= 0.55


def test_sparsify_composition_in_expectation():
    g = np.ones((16, 16, 16), np.uint8)
    a, b = 0.3, 0.4
    twice = np.mean([ds.sparsify(ds.sparsify(g, a, 2 * i), b, 2 * i + 1).mean() for i in range(100)])
    once = np.mean([ds.sparsify(g, 1 - (1 - a) * (1 - b), 1000 + i).mean() for i in range(100)])
    assert abs(twice - once) <= 0.02
    assert abs(twice - (1 - a) * (1 - b)) <= 0.02


def test_dilate():
    g = np.zeros((8, 8, 8), np.uint8)
    g[4, 4, 4] = 1
    assert np.array_equal(ds.dilate(g, 0), g)
    assert ds.dilate(g, 1).sum() == 7
    assert ds.dilate(g, 2).sum() == 25


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 3))
def test_dilate_monotone(seed, it):
    g = (np.random.default_rng(seed).random((8, 8, 8)) > 0.9).astype(np.uint8)
    d = ds.dilate(g, it)
    assert np.all(d >= g)


def test_crop_removes_slab():
    g = np.ones((12, 12, 12), np.uint8)
    c = ds.crop(g, "x", "low", 1 / 3)
    assert c[:, :, :4].sum() == 0 and c[:, :, 4:].all()
    with pytest.raises(ValueError):
        ds.crop(g, "x", "low", 0.5)


# ---------------------------------------------------------------- splits

def test_split_sizes():
    sp = ds.make_split(1000, seed=3)
    assert (len(sp.train), len(sp.test), len(sp.annotated_train)) == (800, 200, 192)
    assert not set(sp.train) & set(sp.test)
    assert set(sp.annotated_train) <= set(sp.train)
    assert set(sp.annotated_test) <= set(sp.test)


def test_split_seeds():
    assert ds.make_split(100, seed=1) == ds.make_split(100, seed=1)
    a, b = ds.make_split(100, seed=1), ds.make_split(100, seed=2)
    assert a.train != b.train and len(a.train) == len(b.train)


def test_split_too_small():
    with pytest.raises(ValueError):
        ds.make_split(2, 0.2, 0.24)  # test split rounds to empty


# ---------------------------------------------------------------- files

def test_voxel_file_round_trip(tmp_path):
    g = _sample().shape
    ds.write_voxels(tmp_path / "a.voxb", g)
    raw = (tmp_path / "a.voxb").read_bytes()
    assert raw[:5] == b"VOXB1" and len(raw) == 9 + 32 ** 3
    assert np.array_equal(ds.read_voxels(tmp_path / "a.voxb"), g)
    f = np.random.default_rng(0).random((16, 16, 16)).astype(np.float32)
    ds.write_voxels(tmp_path / "b.voxf", f)
    assert (tmp_path / "b.voxf").read_bytes()[:5] == b"VOXF1"
    assert np.array_equal(ds.read_voxels(tmp_path / "b.voxf"), f)


def test_landmark_file(tmp_path):
    lm = _sample().landmarks
    ds.write_landmarks(tmp_path / "l.json", lm)
    doc = json.loads((tmp_path / "l.json").read_text())
    assert doc["order"] == list(LANDMARK_NAMES)
    assert np.array_equal(ds.read_landmarks(tmp_path / "l.json"), lm)


def test_generate_dataset_byte_identical(tmp_path):
    m1 = ds.generate_dataset(tmp_path / "a", 30, 16, seed=4)
    ds.generate_dataset(tmp_path / "b", 30, 16, seed=4, threads=2)
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
    data = ds.load_dataset(tmp_path / "a")
    assert data.shapes.shape == (30, 16, 16, 16)
    assert data.annotated.sum() == sum(e["annotated"] for e in m1["samples"]) > 0
    for lm, g in zip(data.labeled.landmarks, data.labeled.shapes):
        assert ds.landmark_surface_distance(g, lm).max() <= 1.0
