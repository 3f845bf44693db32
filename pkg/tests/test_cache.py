import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from quantcache.cache import CacheState, serve, speedup_estimate


def _run(interval, ts):
    state = CacheState(interval)
    calls = []
    for t in ts:
        serve(t, lambda t=t: calls.append(t) or t, state)
    return state, calls


def test_interval_one_always_recomputes():
    state, calls = _run(1, range(50, 0, -1))
    assert state.recomputes == 50 and state.reuses == 0
    assert speedup_estimate(state) == 1.0


def test_interval_five_fifty_steps():
    state, calls = _run(5, range(50, 0, -1))
    assert state.recomputes == 10 and state.reuses == 40
    assert calls == list(range(50, 0, -5))
    assert speedup_estimate(state) == 5.0


def test_interval_five_zero_based_has_cold_start():
    # starting at 49 is not a refresh step, so the first call computes anyway
    state, calls = _run(5, range(49, -1, -1))
    assert calls[0] == 49
    assert state.recomputes == 11 and state.reuses == 39


def test_interval_two_fifty_one_steps():
    state, _ = _run(2, range(50, -1, -1))
    assert state.recomputes == 26
    assert speedup_estimate(state) == pytest.approx(51 / 26)


def test_reused_feature_is_last_computed():
    state = CacheState(3)
    out = [serve(t, lambda t=t: np.full(2, t), state) for t in (6, 5, 4, 3, 2)]
    assert np.array_equal(out[1], np.full(2, 6)) and np.array_equal(out[2], np.full(2, 6))
    assert np.array_equal(out[3], np.full(2, 3))
    assert state.last_refresh_t == 3


def test_method_delegates():
    state = CacheState(2)
    assert state.serve(4, lambda: "a") == "a"
    assert state.serve(3, lambda: "b") == "a"


def test_bad_interval():
    with pytest.raises(ValueError):
        CacheState(0)


def test_speedup_needs_steps():
    with pytest.raises(ValueError):
        speedup_estimate(CacheState(2))


def test_speedup_cost_model():
    state, _ = _run(5, range(50, 0, -1))
    assert speedup_estimate(state, compute_cost=1.0, reuse_cost=0.1) == pytest.approx(50 / (10 + 4))


def test_to_dict():
    state, _ = _run(5, range(50, 0, -1))
    assert state.to_dict() == {"interval": 5, "recomputes": 10, "reuses": 40, "speedup": 5.0}
    assert CacheState(3).to_dict()["speedup"] is None


@given(st.integers(1, 12), st.integers(1, 120), st.integers(0, 200))
def test_counts_property(interval, steps, start):
    ts = list(range(start + steps - 1, start - 1, -1))
    state, calls = _run(interval, ts)
    assert state.steps_served == steps
    expected = {t for t in ts if t % interval == 0} | {ts[0]}
    assert set(calls) == expected
    assert state.recomputes == len(expected)
