import numpy as np
import pytest

from muca import tensor as T
from muca.ctsa import CtsaParams, ctsa_forward
from muca.errors import ConfigurationError, DimensionError
from muca.gradcheck import check


def _inputs(seed=0, n=2, c=8, h=4, w=4):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, c, h, w)), rng.standard_normal((n, c, h, w))


def test_output_shape():
    vs, vt = _inputs()
    out = ctsa_forward(CtsaParams.init(8, 2, seed=0), T.Tensor(vs), T.Tensor(vt))
    assert out.shape == vs.shape


def test_attention_rows_sum_to_one():
    vs, vt = _inputs(1)
    _, attn, _ = ctsa_forward(CtsaParams.init(8, 2, seed=1), T.Tensor(vs), T.Tensor(vt),
                              return_parts=True)
    assert attn.shape == (2, 2, 8, 8)
    np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-6)


def test_gradient_reaches_query_and_student_only():
    vs, vt = _inputs(2)
    params = CtsaParams.init(8, 2, seed=2)
    s = T.Tensor(vs, requires_grad=True)
    t = T.Tensor(vt, requires_grad=True)
    out = ctsa_forward(params, s, T.stop_gradient(t))
    T.backward(T.sum(T.mul(out, out)))
    assert params.w_q.grad is not None and np.abs(params.w_q.grad).sum() > 0
    assert s.grad is not None and np.abs(s.grad).sum() > 0
    assert t.grad is None


def test_spatial_permutation_equivariance():
    vs, vt = _inputs(3)
    params = CtsaParams.init(8, 2, seed=3)
    perm = np.random.default_rng(0).permutation(16)

    def permute(v):
        flat = v.reshape(2, 8, 16)[:, :, perm]
        return flat.reshape(2, 8, 4, 4)

    with T.float64_mode():
        a = ctsa_forward(params, T.Tensor(vs), T.Tensor(vt)).data
        b = ctsa_forward(params, T.Tensor(permute(vs)), T.Tensor(permute(vt))).data
    np.testing.assert_allclose(b, permute(a), atol=1e-10)


def test_brute_force_single_head():
    rng = np.random.default_rng(4)
    c, h, w = 3, 2, 2
    vs, vt = rng.standard_normal((1, c, h, w)), rng.standard_normal((1, c, h, w))
    with T.float64_mode():
        params = CtsaParams(*(T.Tensor(rng.standard_normal(s)) for s in
                              [(c, 2 * c)] * 3 + [(2 * c, c)]), heads=1)
        got = ctsa_forward(params, T.Tensor(vs), T.Tensor(vt)).data
    d = h * w
    fs, ft = vs.reshape(c, d).T, vt.reshape(c, d).T
    q, k, v = fs @ params.w_q.data, ft @ params.w_k.data, ft @ params.w_v.data
    sim = q.T @ k / np.sqrt(d)
    sim = (sim - sim.mean()) / np.sqrt(sim.var() + 1e-5)
    a = np.exp(sim - sim.max(axis=1, keepdims=True))
    a /= a.sum(axis=1, keepdims=True)
    out = (a @ v.T).T @ params.w_out.data
    np.testing.assert_allclose(got, out.T.reshape(1, c, h, w), atol=1e-10)


def test_gradcheck_all_inputs():
    vs, vt = _inputs(5, n=1, c=4, h=2, w=2)
    rng = np.random.default_rng(5)
    ws = [rng.standard_normal((4, 8)) for _ in range(3)] + [rng.standard_normal((8, 4))]

    def op(s, t, wq, wk, wv, wo):
        return ctsa_forward(CtsaParams(wq, wk, wv, wo, heads=2), s, t)

    assert check(op, [vs, vt, *ws]) < 1e-4


def test_bad_heads_and_shapes():
    with pytest.raises(ConfigurationError):
        CtsaParams.init(8, heads=3)
    vs, vt = _inputs()
    with pytest.raises(DimensionError):
        ctsa_forward(CtsaParams.init(8, 2), T.Tensor(vs), T.Tensor(vt[:, :, :2]))
