import os
import subprocess
import sys

import numpy as np
import pytest

from voxelstruct import kernels
from voxelstruct.kernels import _pykernels as py

try:
    from voxelstruct.kernels import _ckernels as cy
except ImportError:  # extension not built
    cy = None

needs_ext = pytest.mark.skipif(cy is None, reason="compiled kernels not built")
DTYPES = [np.float32, np.float64]


def _out(n, k, s):
    return (n - k) // s + 1


@needs_ext
def test_compiled_backend_selected_by_default():
    assert kernels.BACKEND == "cython"


def test_env_forces_python_backend():
    env = dict(os.environ, VOXELSTRUCT_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from voxelstruct import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_ext
@pytest.mark.parametrize("dtype", DTYPES)
@pytest.mark.parametrize("k,s,shape", [(3, 1, (2, 3, 6, 5, 7)), (4, 2, (1, 2, 10, 10, 10)),
                                       (5, 1, (1, 1, 9, 9, 9)), (2, 2, (3, 1, 4, 4, 4))])
def test_im2col_col2im_agree(dtype, k, s, shape):
    rng = np.random.default_rng(0)
    xp = rng.standard_normal(shape).astype(dtype)
    osz = tuple(_out(n, k, s) for n in shape[2:])
    a, b = py.im2col3d(xp, k, s, osz), cy.im2col3d(xp, k, s, osz)
    assert a.dtype == b.dtype == dtype
    assert np.array_equal(a, b)
    cols = rng.standard_normal(a.shape).astype(dtype)
    ga, gb = py.col2im3d(cols, shape, k, s, osz), cy.col2im3d(cols, shape, k, s, osz)
    tol = 1e-5 if dtype == np.float32 else 1e-12
    assert np.allclose(ga, gb, rtol=tol, atol=tol)


@pytest.mark.parametrize("mod", [py, pytest.param(cy, marks=needs_ext)], ids=["python", "cython"])
def test_col2im_is_adjoint(mod):
    rng = np.random.default_rng(1)
    shape, k, s = (2, 2, 8, 8, 8), 4, 2
    osz = tuple(_out(n, k, s) for n in shape[2:])
    x = rng.standard_normal(shape)
    c = rng.standard_normal((2, 2 * k ** 3, int(np.prod(osz))))
    lhs = np.vdot(mod.im2col3d(x, k, s, osz), c)
    rhs = np.vdot(x, mod.col2im3d(c, shape, k, s, osz))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


@needs_ext
@pytest.mark.parametrize("dtype", DTYPES)
def test_maxpool_agree_including_ties(dtype):
    rng = np.random.default_rng(2)
    x = rng.integers(0, 3, size=(2, 3, 8, 8, 8)).astype(dtype)  # many ties
    oa, ia = py.maxpool3d_forward(x, 2)
    ob, ib = cy.maxpool3d_forward(x, 2)
    assert np.array_equal(oa, ob) and np.array_equal(ia, ib)
    g = rng.standard_normal(oa.shape).astype(dtype)
    assert np.array_equal(py.maxpool3d_backward(g, ia, 2, x.shape),
                          cy.maxpool3d_backward(g, ib, 2, x.shape))


@needs_ext
@pytest.mark.parametrize("dtype", DTYPES)
def test_neighborhood_max_agree(dtype):
    rng = np.random.default_rng(3)
    D = 12
    grid = rng.random((3, D, D, D)).astype(dtype)
    grid[0] = 0.0  # all-zero ball: first scanned voxel wins in both
    centers = rng.uniform(-2, D + 1, size=(3, 10, 3))
    for sigma in (1.0, 1.5):
        a = py.neighborhood_max(grid, centers, sigma, 2 * sigma)
        b = cy.neighborhood_max(grid, centers, sigma, 2 * sigma)
        assert np.array_equal(a[1], b[1])
        assert np.allclose(a[0], b[0], rtol=1e-12, atol=0)
        assert np.allclose(a[2], b[2], rtol=1e-12, atol=0)


@pytest.mark.parametrize("mod", [py, pytest.param(cy, marks=needs_ext)], ids=["python", "cython"])
def test_neighborhood_max_outside_grid_is_empty(mod):
    grid = np.ones((1, 8, 8, 8))
    centers = np.array([[[20.0, 20.0, 20.0], [3.0, 3.0, 3.0]]])
    value, index, weight = mod.neighborhood_max(grid, centers, 1.0, 2.0)
    assert index[0, 0] == -1 and value[0, 0] == 0.0 and weight[0, 0] == 0.0
    assert index[0, 1] == (3 * 8 + 3) * 8 + 3 and value[0, 1] == 1.0
