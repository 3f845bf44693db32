import json
import warnings

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from quantcache.numerics import make_rng
from quantcache.quantizer import (DEGENERATE_EPS, CalibrationStats, QuantizerParams, calibrate,
                                  clip_rate, dequantize, fake_quant, quantize, round_half_away)


def test_round_half_away():
    assert np.array_equal(round_half_away([0.5, 1.5, 2.5, -0.5, -1.5, 0.49]),
                          [1.0, 2.0, 3.0, -1.0, -2.0, 0.0])


def test_symmetric_range_8_bit():
    p = calibrate([np.array([-1.0, 0.3]), np.array([1.0])], 8)
    assert float(p.scale) == pytest.approx(2 / 255, abs=1e-15)
    # -l/s = 127.5 rounds away from zero
    assert int(p.zero_point) == 128


def test_byte_range():
    p = calibrate(np.arange(256.0), 8)
    assert float(p.scale) == 1.0 and int(p.zero_point) == 0


def test_all_zero_samples_widened():
    with pytest.warns(RuntimeWarning, match="degenerate"):
        p = calibrate(np.zeros(10), 4)
    assert float(p.scale) == pytest.approx(2 * DEGENERATE_EPS / 15, rel=1e-12)
    assert float(p.lower) < float(p.upper)


def test_empty_samples():
    with pytest.raises(ValueError):
        calibrate([], 8)
    with pytest.raises(ValueError):
        calibrate([np.array([])], 8)


def test_bits_too_small():
    with pytest.raises(ValueError):
        QuantizerParams.from_range(-1, 1, 1)


def test_quantize_examples():
    p = calibrate(np.array([-1.0, 1.0]), 8)
    assert quantize(0.0, p) == 128
    assert quantize(-1.0, p) == 0
    assert quantize(1.0, p) == 255
    assert quantize(1e6, p) == 255
    assert quantize(-1e6, p) == 0
    assert dequantize(p.zero_point, p) == 0.0


def test_range_excluding_zero_clips_zero_point():
    # z = clip(round(-l/s)) pins z at 0 for l > 0, so the grid starts at 0, not at l,
    # and the top of the range saturates
    p = calibrate(np.array([0.5, 3.0]), 6)
    assert int(p.zero_point) == 0
    assert quantize(0.5, p) == 13
    assert quantize(3.0, p) == 63
    assert float(dequantize(63, p)) == pytest.approx(63 * 2.5 / 63)


def test_round_trip_uniform_1000():
    p = QuantizerParams.from_range(-0.7, 2.3, 8)
    x = make_rng(0).uniform(-0.7, 2.3, 1000)
    assert np.max(np.abs(dequantize(quantize(x, p), p) - x)) <= float(p.scale) / 2 + 1e-12


def test_round_trip_16_bit():
    x = make_rng(1).uniform(-1, 1, 1000)
    x[:2] = [-1.0, 1.0]
    p = calibrate(x, 16)
    assert np.max(np.abs(fake_quant(x, p) - x)) <= 2 / (2 * 65535) + 1e-12


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 50), st.floats(1e-3, 100), st.integers(2, 16))
def test_round_trip_property(lo, width, bits):
    hi = lo + width
    assume(lo < 0 < hi)  # zero-point not clipped
    p = QuantizerParams.from_range(lo, hi, bits)
    x = make_rng(bits).uniform(lo, hi, 10_000 // 200)
    err = np.abs(fake_quant(x, p) - x)
    assert np.all(err <= float(p.scale) / 2 * (1 + 1e-9) + 1e-12)


def test_round_trip_10k_draws():
    p = QuantizerParams.from_range(-3.0, 5.0, 4)
    x = make_rng(2).uniform(-3.0, 5.0, 10_000)
    assert np.max(np.abs(fake_quant(x, p) - x)) <= float(p.scale) / 2 + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=50), st.integers(2, 12))
def test_quantize_monotone(xs, bits):
    p = QuantizerParams.from_range(-10, 20, bits)
    x = np.sort(np.array(xs))
    q = quantize(x, p)
    assert np.all(np.diff(q) >= 0)
    assert q.min() >= 0 and q.max() <= 2 ** bits - 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=20),
       st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
def test_superset_never_shrinks_range(a, extra):
    assume(max(a) > min(a))
    p1 = calibrate(np.array(a), 8)
    p2 = calibrate([np.array(a), np.array(extra)], 8)
    assert float(p2.lower) <= float(p1.lower) and float(p2.upper) >= float(p1.upper)


def test_per_channel_equals_per_tensor_with_shared_extrema():
    W = make_rng(3).uniform(-1, 1, (4, 6))
    W[:, 0] = -1.0
    W[:, 1] = 1.0
    pc = calibrate(W, 8, axis=0)
    pt = calibrate(W, 8)
    assert np.allclose(pc.scale, pt.scale) and np.all(pc.zero_point == pt.zero_point)
    assert np.array_equal(fake_quant(W, pc), fake_quant(W, pt))


def test_per_channel_axis_broadcast():
    W = np.array([[0.0, 1.0, 2.0], [0.0, 10.0, 20.0]])
    p = calibrate(W, 8, axis=0)
    assert p.scale.shape == (2,)
    assert np.allclose(p.scale, [2 / 255, 20 / 255])
    assert np.all(quantize(W, p)[:, -1] == 255)


def test_json_round_trip():
    for p in (calibrate(np.array([-1.0, 2.0]), 4),
              calibrate(make_rng(0).standard_normal((3, 5)), 8, axis=1)):
        d = json.loads(p.to_json())
        assert set(d) == {"b", "s", "z", "l", "u", "granularity"}
        q = QuantizerParams.from_json(p.to_json())
        assert q.bits == p.bits and q.axis == p.axis
        for f in ("scale", "zero_point", "lower", "upper"):
            assert np.array_equal(getattr(q, f), getattr(p, f))


def test_calibration_stats_merge_is_min_max():
    a, b = CalibrationStats(), CalibrationStats()
    a.observe("x", [1.0, 3.0])
    b.observe("x", [-2.0, 2.0])
    b.observe("w", np.array([[1.0, 2.0], [3.0, 5.0]]), axis=0)
    m = a.merge(b)
    assert m.mins[("x", None, None)] == -2.0 and m.maxs[("x", None, None)] == 3.0
    pw = m.params("w", 8)
    assert pw.axis == 0 and np.allclose(pw.lower, [1, 3]) and np.allclose(pw.upper, [2, 5])
    # merge order does not matter
    m2 = b.merge(a)
    assert m.mins == m2.mins and m.maxs == m2.maxs
    with pytest.raises(KeyError):
        m.params("missing", 8)


def test_calibration_stats_buckets_are_separate():
    s = CalibrationStats()
    s.observe("a", [0.0, 1.0], bucket=3)
    s.observe("a", [5.0, 6.0], bucket=4)
    assert float(s.params("a", 8, bucket=3).upper) == 1.0
    assert float(s.params("a", 8, bucket=4).lower) == 5.0


def test_clip_rate():
    p = QuantizerParams.from_range(0.0, 1.0, 8)
    assert clip_rate([-1.0, 0.5, 0.7, 2.0], p) == 0.5
    assert clip_rate(np.array([]), p) == 0.0
