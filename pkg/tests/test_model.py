import numpy as np
import pytest

from muca import tensor as T
from muca.ctsa import CtsaParams, ctsa_forward
from muca.errors import ConfigurationError, DimensionError
from muca.model import SegModel, StageSpec, param_kind


@pytest.fixture(scope="module")
def model():
    return SegModel(seed=0)


@pytest.fixture(scope="module")
def x():
    return np.random.default_rng(0).random((2, 3, 64, 64)).astype(np.float32)


def test_feature_pyramid_shapes(model, x):
    out = model.forward(T.Tensor(x))
    assert [f.shape for f in out.features] == [
        (2, 16, 32, 32), (2, 32, 16, 16), (2, 64, 8, 8), (2, 128, 4, 4)]
    assert out.logits.shape == (2, 5, 64, 64)


def test_eval_forward_is_deterministic(model, x):
    a = model.forward(T.Tensor(x), "eval").logits.data
    b = model.forward(T.Tensor(x), "eval").logits.data
    assert np.array_equal(a, b)


def test_mc_sample_forwards_differ(model, x):
    a = model.forward(T.Tensor(x), "mc_sample", np.random.default_rng(1)).logits.data
    b = model.forward(T.Tensor(x), "mc_sample", np.random.default_rng(2)).logits.data
    assert not np.array_equal(a, b)


def test_mc_repeats_match_tiled_batch(model, x):
    with T.no_grad():
        tiled = T.Tensor(np.concatenate([x] * 3, axis=0))
        a = model.forward(tiled, "mc_sample", np.random.default_rng(4)).logits.data
        b = model.forward(T.Tensor(x), "mc_sample", np.random.default_rng(4), repeats=3)
    assert np.array_equal(a, b.logits.data)
    assert b.features[0].shape[0] == 6


def test_repeats_only_for_mc_sampling(model, x):
    with pytest.raises(ConfigurationError):
        model.forward(T.Tensor(x), "mc_sample", np.random.default_rng(4), repeats=2)
    with T.no_grad(), pytest.raises(ConfigurationError):
        model.forward(T.Tensor(x), "eval", repeats=2)


def test_decode_round_trip(model, x):
    out = model.forward(T.Tensor(x))
    assert np.array_equal(model.decode(out.features).data, out.logits.data)


def test_zero_features_give_bias(model):
    spec = model.spec
    feats = [T.Tensor(np.zeros((1, c, 16 >> i, 16 >> i))) for i, c in enumerate(spec.channels)]
    m = model.copy()
    m.params["dec.cls.bias"].data = np.arange(5, dtype=np.float32)
    for i in range(1, 5):
        m.params[f"dec.proj{i}.bias"].data[:] = 0
    logits = m.decode(feats).data
    np.testing.assert_allclose(logits, np.arange(5).reshape(1, 5, 1, 1) * np.ones((1, 5, 32, 32)))


def test_decode_accepts_ctsa_output(model, x):
    feats = model.encode(T.Tensor(x))
    ctsa = CtsaParams.init(128, seed=0)
    recon = ctsa_forward(ctsa, feats[3], feats[3])
    assert model.decode(feats[:3] + [recon]).shape == (2, 5, 64, 64)


def test_decode_rejects_bad_shapes(model):
    feats = [T.Tensor(np.zeros((1, c, 16 >> i, 16 >> i))) for i, c in enumerate((16, 32, 64, 64))]
    with pytest.raises(DimensionError):
        model.decode(feats)


def test_input_size_must_divide_by_16(model):
    with pytest.raises(ConfigurationError):
        model.forward(T.Tensor(np.zeros((1, 3, 40, 40))))


def test_train_mode_needs_rng(model, x):
    with pytest.raises(ConfigurationError):
        model.forward(T.Tensor(x), "train")


def test_initial_logits_in_sane_band(model, x):
    std = model.forward(T.Tensor(x)).logits.data.std()
    assert 0.1 < std < 10


def test_param_tagging():
    spec = StageSpec()
    names = [n for n, _ in SegModel(spec).named_parameters()]
    kinds = {n: param_kind(n) for n in names}
    assert kinds["s1.conv1.weight"] == "weight"
    assert kinds["s1.norm1.weight"] == "norm"
    assert kinds["dec.cls.bias"] == "bias"
    assert param_kind("ctsa.w_q") == "weight"


def test_stage_spec_needs_four_stages():
    with pytest.raises(ConfigurationError):
        StageSpec(channels=(8, 16, 32))


def test_copy_is_independent(model):
    c = model.copy()
    c.params["dec.cls.bias"].data += 1
    assert not np.array_equal(c.params["dec.cls.bias"].data, model.params["dec.cls.bias"].data)
