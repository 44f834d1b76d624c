import os
import subprocess
import sys

import numpy as np
import pytest

from slamformer import _numba
from slamformer.kernels import (
    nearest_neighbors_numba, nearest_neighbors_numpy, weighted_median_numba, weighted_median_numpy,
    zbuffer_numba, zbuffer_numpy,
)

needs_numba = pytest.mark.skipif(not _numba.HAVE_NUMBA, reason="numba not installed")


@needs_numba
@pytest.mark.parametrize("layout", ["gauss", "plane", "clustered", "duplicates"])
def test_nn_paths_agree(layout):
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(2000, 3))
    if layout == "plane":
        pts[:, 2] = 0.0
    elif layout == "clustered":
        pts = np.concatenate([rng.normal(size=(1000, 3)) * 0.01, rng.normal(size=(1000, 3)) * 0.01 + 50])
    elif layout == "duplicates":
        pts = np.repeat(pts[:100], 20, axis=0)
    q = rng.normal(size=(500, 3)) * 2
    d1, i1 = nearest_neighbors_numba(q, pts)
    d2, i2 = nearest_neighbors_numpy(q, pts)
    # the two paths sum squared differences in different orders
    assert np.allclose(d1, d2, rtol=1e-12, atol=1e-15)
    assert np.array_equal(pts[i1], pts[i2])
    assert np.allclose(np.linalg.norm(q - pts[i1], axis=1), d1)


@needs_numba
def test_nn_single_point():
    d, i = nearest_neighbors_numba(np.array([[1.0, 2, 2]]), np.zeros((1, 3)))
    assert d[0] == 3.0 and i[0] == 0


@needs_numba
def test_zbuffer_paths_agree_with_ties():
    rng = np.random.default_rng(1)
    n = 5000
    u = rng.integers(-2, 18, n)
    v = rng.integers(-2, 14, n)
    depth = rng.integers(0, 5, n).astype(float)
    a = zbuffer_numba(u, v, depth, 12, 16)
    b = zbuffer_numpy(u, v, depth, 12, 16)
    assert np.array_equal(a, b)
    # explicit tie: lower index wins
    w = zbuffer_numpy([1, 1], [0, 0], [2.0, 2.0], 2, 2)
    assert w[0, 1] == 0 and w[0, 0] == -1


@needs_numba
def test_weighted_median_paths_agree():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(1, 60))
        vals = rng.normal(size=n)
        w = rng.uniform(0, 1, n)
        assert weighted_median_numba(vals, w) == weighted_median_numpy(vals, w)
    assert weighted_median_numpy([1.0, 2.0, 3.0], [1, 1, 1]) == 2.0
    assert weighted_median_numpy([1.0, 2.0], [1, 1]) == 1.0
    assert weighted_median_numpy([1.0, 2.0, 3.0], [0, 0, 5]) == 3.0


def test_env_flag_selects_numpy_path():
    env = dict(os.environ, SLAMFORMER_DISABLE_NUMBA="1")
    code = "from slamformer import _numba; print(_numba.USE_NUMBA)"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "False"
