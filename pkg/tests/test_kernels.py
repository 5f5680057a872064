import numpy as np
import pytest

from muca import kernels
from muca import tensor as T
from muca.kernels import _conv_py

pytestmark = pytest.mark.skipif(kernels.BACKEND != "cython",
                                reason="compiled kernels not built")


@pytest.mark.parametrize("shape,k,stride,pad", [
    ((2, 3, 7, 5), 3, 1, 1), ((2, 3, 8, 8), 3, 2, 1), ((1, 4, 6, 6), 1, 1, 0),
    ((3, 2, 1, 1), 3, 2, 1), ((1, 5, 9, 4), 3, 2, 1),
])
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_bit_identical(shape, k, stride, pad, dtype):
    from muca.kernels import _conv_ext
    x = np.random.default_rng(0).standard_normal(shape).astype(dtype)
    a = _conv_ext.im2col(x, k, stride, pad)
    b = _conv_py.im2col(x, k, stride, pad)
    assert a.dtype == b.dtype and np.array_equal(a, b)
    cols = np.random.default_rng(1).standard_normal(a.shape).astype(dtype)
    np.testing.assert_array_equal(_conv_ext.col2im(cols, shape, k, stride, pad),
                                  _conv_py.col2im(cols, shape, k, stride, pad))


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 6, 5))
    cols = kernels.im2col(x, 3, 2, 1)
    y = rng.standard_normal(cols.shape)
    lhs = (cols * y).sum()
    rhs = (x * kernels.col2im(y, x.shape, 3, 2, 1)).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.parametrize("stride", [1, 2])
def test_gather_conv_matches_im2col_conv(stride):
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 16, 8, 8))
    w = rng.standard_normal((3, 16, 3, 3))
    with T.float64_mode():
        got = T.conv2d(T.Tensor(x), T.Tensor(w), stride=stride).data
    cols = _conv_py.im2col(x, 3, stride, 1)
    ho = (8 + 2 - 3) // stride + 1
    want = np.einsum("ok,nkp->nop", w.reshape(3, -1), cols).reshape(2, 3, ho, ho)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)
