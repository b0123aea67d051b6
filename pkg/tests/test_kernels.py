import subprocess
import sys

import numpy as np
import pytest

from sphdecon import _kernels as K
from sphdecon import sphere_grid as sg


@pytest.fixture(scope="module")
def lap():
    grid = sg.build_grid(4)
    L = grid.laplacian
    return L.indptr, L.indices, L.data, grid


class TestBackendsAgree:
    def test_csr_matmul(self, lap):
        indptr, indices, data, _ = lap
        rng = np.random.default_rng(0)
        x = rng.standard_normal((192, 17))
        a = K._csr_matmul_numpy(indptr, indices, data, x)
        b = K.csr_matmul(indptr, indices, data, x)
        assert np.abs(a - b).max() < 1e-12

    def test_csr_matmul_vector(self, lap):
        indptr, indices, data, _ = lap
        x = np.random.default_rng(1).standard_normal(192)
        out = K.csr_matmul(indptr, indices, data, x)
        assert out.shape == (192,)

    def test_maxpool(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((7, 48))
        a_out, a_arg = K._maxpool4_numpy(x)
        b_out, b_arg = K.maxpool4(x)
        assert np.array_equal(a_out, b_out)
        assert np.array_equal(a_arg, b_arg)

    def test_maxpool_tie_break_lowest(self):
        x = np.zeros((1, 8))
        out, arg = K.maxpool4(x)
        assert np.all(arg == 0)

    def test_local_maxima(self, lap):
        _, _, _, grid = lap
        rng = np.random.default_rng(3)
        v = rng.standard_normal(grid.n_vertices)
        a = K._local_maxima_numpy(v, grid.neighbor_table)
        b = K.local_maxima(v, grid.neighbor_table)
        assert np.array_equal(a, b)

    def test_local_maxima_constant_none(self, lap):
        _, _, _, grid = lap
        v = np.ones(grid.n_vertices)
        assert not K.local_maxima(v, grid.neighbor_table).any()

    def test_unpool_round_trip(self):
        x = np.random.default_rng(4).standard_normal((3, 12))
        up = K.unpool4(x)
        assert up.shape == (3, 48)
        assert np.array_equal(K.unpool4_backward(up) / 4.0, x)

    def test_maxpool_backward_routes_to_argmax(self):
        x = np.array([[1.0, 3.0, 2.0, 0.0]])
        out, arg = K.maxpool4(x)
        g = K.maxpool4_backward(np.array([[5.0]]), arg, 4)
        assert np.array_equal(g, [[0.0, 5.0, 0.0, 0.0]])


def test_env_flag_selects_numpy_backend():
    code = (
        "import sphdecon._kernels as K; print(K.backend())"
    )
    proc = subprocess.run(
        [sys.executable, "-c", code],
        capture_output=True, text=True,
        env={"PATH": "/usr/bin:/bin", "SPHDECON_DISABLE_NUMBA": "1"},
    )
    assert proc.stdout.strip() == "numpy"
