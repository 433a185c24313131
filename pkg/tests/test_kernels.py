"""The compiled and numpy kernel paths must agree."""

import numpy as np
import pytest

from disentlab import kernels
from disentlab._jit import HAVE_NUMBA

pytestmark = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")


@pytest.fixture
def gen():
    return np.random.default_rng(5)


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (1, 1), (3, 2)])
def test_im2col_paths_agree(gen, stride, pad):
    x = gen.normal(size=(2, 9, 7, 3))
    np.testing.assert_array_equal(
        kernels.im2col_jit(x, 3, 3, stride, pad), kernels.im2col_numpy(x, 3, 3, stride, pad)
    )


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (3, 2)])
def test_col2im_paths_agree(gen, stride, pad):
    ho = kernels.conv_output_size(9, 3, stride, pad)
    wo = kernels.conv_output_size(7, 3, stride, pad)
    cols = gen.normal(size=(2 * ho * wo, 27))
    np.testing.assert_allclose(
        kernels.col2im_jit(cols, 2, 9, 7, 3, 3, 3, stride, pad),
        kernels.col2im_numpy(cols, 2, 9, 7, 3, 3, 3, stride, pad),
        rtol=0,
        atol=1e-13,
    )


def test_col2im_is_adjoint_of_im2col(gen):
    # <im2col(x), c> == <x, col2im(c)>
    x = gen.normal(size=(2, 6, 6, 2))
    cols = gen.normal(size=(2 * 3 * 3, 18))
    lhs = np.sum(kernels.im2col_numpy(x, 3, 3, 2, 1) * cols)
    rhs = np.sum(x * kernels.col2im_numpy(cols, 2, 6, 6, 2, 3, 3, 2, 1))
    assert abs(lhs - rhs) < 1e-10


def test_rasterize_paths_agree(gen):
    seg = gen.uniform(2, 26, size=(7, 4))
    seg[0, 2:] = seg[0, :2]  # degenerate point segment
    np.testing.assert_allclose(kernels.rasterize_jit(seg, 1.7, 28), kernels.rasterize_numpy(seg, 1.7, 28), atol=1e-12)


def test_texture_paths_agree(gen):
    args = (
        32,
        np.array([2.0, 5.0]),
        np.array([0.4, 2.0]),
        np.array([1.0, 0.2]),
        np.array([1.0, 0.3]),
        np.array([0.1, 0.2, 0.3]),
        np.array([0.6, 0.5, 0.1]),
    )
    np.testing.assert_allclose(kernels.texture_jit(*args), kernels.texture_numpy(*args), atol=1e-12)
