import math

import numpy as np
import pytest

from dottune.policy import LrtState, always_expand_step, lrt_step, per_call_gain, thompson_step


def _post_init(**counts):
    state = LrtState(**counts)
    state.init = False
    return state


def test_init_step_is_a_coin_flip_without_bookkeeping():
    actions = []
    for seed in range(200):
        state = LrtState()
        d = lrt_step(state, None, 100.0, 10, rng=seed)
        assert not state.init
        assert (state.s0, state.f0, state.s1, state.f1) == (1, 1, 1, 1)
        assert d.reward is None and d.lam is None
        actions.append(d.action)
    assert 0.35 < np.mean(actions) < 0.65


def test_fresh_state_stays():
    d = lrt_step(_post_init(), 100.0, 100.0, 10)
    assert d.lam == 0.0 and d.action == 0


def test_ln_four_thirds_expands():
    d = lrt_step(_post_init(s1=2), 100.0, 100.0, 10)
    assert d.lam == math.log((2 / 3) / (1 / 2))
    assert d.action == 1


def test_reward_boundary_is_strict():
    d = lrt_step(_post_init(), 100.0, 110.0, 100)
    assert d.gain == 0.001 and d.reward == 0
    d = lrt_step(_post_init(), 100.0, 120.2, 100)
    assert d.gain == pytest.approx(0.00202) and d.reward == 1


def test_chosen_action_gets_the_count():
    state = _post_init()
    lrt_step(state, 100.0, 150.0, 10)  # action 0, reward 1
    assert (state.s0, state.f0, state.s1, state.f1) == (2, 1, 1, 1)
    state = _post_init(s1=3)
    lrt_step(state, 100.0, 100.0, 10)  # action 1, reward 0
    assert (state.s0, state.f0, state.s1, state.f1) == (1, 1, 3, 2)


def test_count_conservation():
    rng = np.random.default_rng(0)
    state = LrtState()
    lrt_step(state, None, 1.0, 5, rng)
    for n in range(1, 101):
        b = rng.uniform(50, 150)
        lrt_step(state, b, b * rng.uniform(0.9, 1.2), int(rng.integers(1, 50)))
        assert state.s0 + state.f0 + state.s1 + state.f1 == 4 + n


def test_scale_invariance():
    rng = np.random.default_rng(1)
    for _ in range(200):
        b, y, E = rng.uniform(1, 100), rng.uniform(1, 200), int(rng.integers(1, 40))
        lam = rng.uniform(0.01, 1e4)
        a, c = _post_init(s0=2, f1=3), _post_init(s0=2, f1=3)
        d1, d2 = lrt_step(a, b, y, E), lrt_step(c, lam * b, lam * y, E)
        assert d1.action == d2.action and d1.reward == d2.reward
        assert d1.gain == pytest.approx(d2.gain, rel=1e-12, abs=1e-15)


def test_lambda_sign_matches_rate_difference():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        s0, f0, s1, f1 = rng.integers(1, 50, size=4)
        state = _post_init(s0=int(s0), f0=int(f0), s1=int(s1), f1=int(f1))
        p0, p1 = state.rates()
        d = lrt_step(state, 1.0, 1.0, 1)
        assert np.sign(d.lam) == np.sign(round(p1 - p0, 15)) or abs(p1 - p0) < 1e-15


def test_gain_errors():
    with pytest.raises(ValueError):
        per_call_gain(0.0, 1.0, 1)
    with pytest.raises(ValueError):
        per_call_gain(1.0, 1.0, 0)
    with pytest.raises(ValueError):
        lrt_step(_post_init(), -5.0, 1.0, 3)


def test_thompson_dominant_arm():
    state = LrtState(s1=1000, f1=1, s0=1, f0=1000)
    rng = np.random.default_rng(3)
    picks = []
    for _ in range(10_000):
        s = LrtState(s1=1000, f1=1, s0=1, f0=1000)
        picks.append(thompson_step(s, None, 1.0, 1, rng).action)
    assert np.mean(picks) >= 0.99
    assert (state.s0, state.f1) == (1, 1)


def test_thompson_symmetric():
    rng = np.random.default_rng(4)
    picks = [thompson_step(LrtState(), None, 1.0, 1, rng).action for _ in range(10_000)]
    assert 0.45 <= np.mean(picks) <= 0.55


def test_thompson_bookkeeping_matches_lrt():
    rng = np.random.default_rng(5)
    for _ in range(100):
        b, y, E = rng.uniform(1, 10), rng.uniform(1, 12), int(rng.integers(1, 20))
        t = LrtState()
        d = thompson_step(t, b, y, E, rng)
        ref = _post_init()
        ref.record(d.action, int(per_call_gain(b, y, E) > ref.delta))
        assert (t.s0, t.f0, t.s1, t.f1) == (ref.s0, ref.f0, ref.s1, ref.f1)
        assert d.gain == per_call_gain(b, y, E)


def test_thompson_deterministic_per_seed():
    a = [thompson_step(LrtState(), 1.0, 1.0, 1, np.random.default_rng(9)).action for _ in range(5)]
    b = [thompson_step(LrtState(), 1.0, 1.0, 1, np.random.default_rng(9)).action for _ in range(5)]
    assert a == b


def test_always_expand():
    assert always_expand_step(3).action == 1
    assert always_expand_step(0).action == 0
    assert always_expand_step(1).lam is None


def test_decision_dict_keys():
    d = lrt_step(_post_init(), 100.0, 120.2, 100)
    assert set(d.to_dict()) == {"action", "gain", "reward", "lambda"}
