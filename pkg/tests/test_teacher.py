import math

import numpy as np
import pytest

from muca import tensor as T
from muca.errors import ConfigurationError
from muca.model import SegModel, StageSpec
from muca.teacher import (LN2, EmaState, ThresholdSchedule, ema_update, entropy_pyramid,
                          estimate_uncertainty, predictive_entropy, threshold_at,
                          uncertainty_from_probs)

SMALL = StageSpec(channels=(4, 4, 8, 8), decoder_channels=8)


def _pair(seed_t=0, seed_s=1):
    return SegModel(SMALL, seed=seed_t, requires_grad=False), SegModel(SMALL, seed=seed_s)


def test_alpha_one_keeps_teacher():
    t, s = _pair()
    before = {k: v.data.copy() for k, v in t.named_parameters()}
    ema_update(t, s, EmaState(1.0))
    assert all(np.array_equal(before[k], v.data) for k, v in t.named_parameters())


def test_alpha_zero_copies_student():
    t, s = _pair()
    ema_update(t, s, EmaState(0.0))
    for (_, a), (_, b) in zip(t.named_parameters(), s.named_parameters()):
        assert np.array_equal(a.data, b.data)


def test_ema_scalar_point():
    t, s = _pair()
    for p in t.parameters():
        p.data[...] = 1.0
    for p in s.parameters():
        p.data[...] = 0.0
    ema_update(t, s, EmaState(0.99))
    assert all(np.allclose(p.data, 0.99) for p in t.parameters())


def test_ema_stays_in_convex_hull():
    t, s = _pair()
    rng = np.random.default_rng(0)
    name = "s1.conv1.weight"
    lo = t.params[name].data.copy()
    hi = lo.copy()
    for _ in range(10):
        for p in s.parameters():
            p.data = p.data + rng.standard_normal(p.shape).astype(np.float32)
        lo = np.minimum(lo, s.params[name].data)
        hi = np.maximum(hi, s.params[name].data)
        ema_update(t, s, EmaState(float(rng.random())))
        v = t.params[name].data
        assert np.all(v >= lo - 1e-5) and np.all(v <= hi + 1e-5)


def test_ema_rejects_mismatched_models():
    t = SegModel(SMALL, requires_grad=False)
    s = SegModel(StageSpec(channels=(4, 4, 8, 16), decoder_channels=8))
    with pytest.raises(ConfigurationError):
        ema_update(t, s, EmaState())


def test_entropy_points():
    assert predictive_entropy(np.array([[1.0, 0.0]]), axis=1)[0] == 0.0
    assert predictive_entropy(np.array([[0.5, 0.5]]), axis=1)[0] == pytest.approx(LN2, abs=1e-15)
    want = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
    assert predictive_entropy(np.array([[0.75, 0.25]]), axis=1)[0] == pytest.approx(want, abs=1e-15)
    assert want == pytest.approx(0.5623, abs=1e-4)


def test_agreeing_passes_have_zero_entropy():
    p = np.zeros((4, 1, 3, 16, 16))
    p[:, :, 1] = 1.0
    field = uncertainty_from_probs(p)
    assert not field.entropy.any()


def test_entropy_pyramid_levels():
    ent = np.random.default_rng(0).random((2, 16, 16))
    pyr = entropy_pyramid(ent)
    assert [m.shape for m in pyr] == [(2, 8, 8), (2, 4, 4), (2, 2, 2), (2, 1, 1)]
    assert pyr[0][0, 0, 0] == pytest.approx(ent[0, :2, :2].mean())
    assert pyr[3][1, 0, 0] == pytest.approx(ent[1].mean())


def test_estimate_uncertainty_bounds_and_shapes():
    t, _ = _pair()
    x = np.random.default_rng(0).random((2, 3, 32, 32)).astype(np.float32)
    field = estimate_uncertainty(t, x, 4, np.random.default_rng(0))
    assert field.entropy.shape == (2, 32, 32)
    assert field.entropy.min() >= 0 and field.entropy.max() <= math.log(5)
    assert len(T.TAPE) == 0


def test_estimate_uncertainty_needs_two_passes():
    t, _ = _pair()
    with pytest.raises(ConfigurationError):
        estimate_uncertainty(t, np.zeros((1, 3, 16, 16)), 1, np.random.default_rng(0))


def test_threshold_endpoints():
    sched = ThresholdSchedule(LN2, 100)
    assert threshold_at(sched, 100) == LN2
    assert threshold_at(sched, 0) == pytest.approx(LN2 * (0.5 + 0.5 * math.exp(-5)), abs=1e-15)
    assert threshold_at(sched, 0) / LN2 == pytest.approx(0.5034, abs=1e-4)


def test_threshold_monotone():
    sched = ThresholdSchedule(LN2, 257)
    vals = [threshold_at(sched, s) for s in range(258)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_threshold_clamps_outside_range():
    sched = ThresholdSchedule(1.0, 10)
    assert threshold_at(sched, -5) == threshold_at(sched, 0)
    assert threshold_at(sched, 50) == 1.0
