import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from safenav.handoff import HandoffConfig, HandoffState, fuse, handoff_rewards, hard_switch, threat_gate
from safenav.state import Command

CFG = HandoffConfig(0.2, 0.6)
BIG = HandoffConfig(0.2, 0.6, rate_limits=(1e9, 1e9, 1e9))

finite = st.floats(-5, 5, allow_nan=False)
commands = st.builds(Command, finite, finite, finite)


def test_gate_boundaries_and_midpoint():
    assert threat_gate(0.0, CFG) == 0.0
    assert threat_gate(1.0, CFG) == 1.0
    assert threat_gate(0.2, CFG) == 0.0 and threat_gate(0.6, CFG) == 1.0
    assert threat_gate(0.4, CFG) == pytest.approx(0.5, abs=1e-15)


def test_gate_grid_monotone_and_continuous():
    T = np.linspace(0, 1, 1001)
    g = np.array([threat_gate(t, CFG) for t in T])
    assert np.all(np.diff(g) >= 0)
    # smoothstep slope is at most 1.5 / (T_hi - T_lo)
    assert np.max(np.diff(g)) <= 1.5 / 0.4 * 1e-3 + 1e-12
    s = (T - 0.2) / 0.4
    inner = (T > 0.2) & (T < 0.6)
    assert np.allclose(g[inner], 3 * s[inner] ** 2 - 2 * s[inner] ** 3, atol=1e-15)


def test_config_validation():
    with pytest.raises(ValueError):
        HandoffConfig(0.6, 0.2)
    with pytest.raises(ValueError):
        HandoffConfig(rate_limits=(0.3, 0.0, 0.6))
    with pytest.raises(ValueError):
        HandoffConfig(eps=0.0)


def test_fuse_examples():
    nav, refl = Command(0.8, 0.1, -0.2), Command(-0.3, 0.9, 0.0)
    out, st_ = fuse(nav, refl, 0.0, HandoffState(nav), CFG)
    assert out == nav and st_.previous == nav
    out, _ = fuse(nav, refl, 1.0, HandoffState(refl), CFG)
    assert out == refl
    out, _ = fuse(Command(1, 0, 0), Command(0, 1, 0), 0.4, HandoffState(), BIG)
    assert out == pytest.approx((0.5, 0.5, 0.0), abs=1e-15)


def test_fuse_rate_limited_step():
    out, _ = fuse(Command(1.5, 0, 0), Command(0, 0, 0), 0.0, HandoffState(), CFG)
    assert out == Command(0.3, 0.0, 0.0)
    out, _ = fuse(Command(0, 0, 0), Command(0, -1.0, 2.0), 1.0, HandoffState(), CFG)
    assert out == Command(0.0, -0.3, 0.6)


@settings(max_examples=500, deadline=None)
@given(commands, commands, commands, st.floats(0, 1))
def test_fuse_never_exceeds_rate_limits(prev, nav, refl, T):
    out, st_ = fuse(nav, refl, T, HandoffState(prev), CFG)
    for a, b, lim in zip(out, prev, CFG.rate_limits):
        assert abs(a - b) <= lim
    assert st_.previous == out


def test_rate_limit_exact_on_random_sequences():
    rng = np.random.default_rng(0)
    state = HandoffState()
    prev = state.previous
    for _ in range(50_000):
        nav = Command(*rng.uniform(-1.5, 1.5, 3))
        refl = Command(*rng.uniform(-1.5, 1.5, 3))
        out, state = fuse(nav, refl, float(rng.random()), state, CFG)
        d = out - prev
        assert abs(d.vx) <= 0.3 and abs(d.vy) <= 0.3 and abs(d.omega) <= 0.6
        prev = out


@settings(max_examples=300, deadline=None)
@given(commands, commands, st.floats(0, 1))
def test_agreement_makes_gate_irrelevant(prev, u, T):
    # large limits so the result is the raw blend
    out, _ = fuse(u, u, T, HandoffState(prev), BIG)
    assert out == pytest.approx(tuple(u), abs=1e-12)


def test_fuse_continuous_in_T():
    prev = Command(0.2, -0.1, 0.3)
    nav, refl = Command(1.0, 0.0, 0.5), Command(-0.5, 1.0, -1.0)
    T = np.linspace(0, 1, 1001)
    outs = np.array([fuse(nav, refl, t, HandoffState(prev), CFG)[0] for t in T])
    jumps = np.abs(np.diff(outs, axis=0)).max(axis=0)
    # the raw blend moves at most 1.5/(T_hi-T_lo) * dT * |refl - nav| per grid step
    bound = 1.5 / 0.4 * 1e-3 * np.abs(np.array(refl) - np.array(nav)) + 1e-12
    assert np.all(jumps <= bound)
    assert np.all(jumps <= np.array(CFG.rate_limits))


def test_hard_switch_examples():
    nav, refl = Command(1, 0, 0), Command(0, 1, 0)
    assert hard_switch(nav, refl, 0.49) == nav
    assert hard_switch(nav, refl, 0.5) == refl
    seq = [hard_switch(nav, refl, t) for t in (0.4, 0.6, 0.4, 0.6)]
    jumps = [(b - a).norm_inf() for a, b in zip(seq, seq[1:])]
    assert min(jumps) == 1.0


def test_handoff_rewards_examples():
    u = Command(0.7, 0.1, 0.2)
    r = handoff_rewards(u, u, Command(0, 1, 0), 0.0, Command(0, 0, 0), 0.0, CFG)
    assert r["coord"] == 1.0
    assert r["smooth"] == pytest.approx(math.tanh(0.05 / 1e-3))
    assert r["smooth"] > 0.9999
    assert r["stable"] == 1.0


def test_handoff_rewards_oracle():
    cfg = HandoffConfig(0.2, 0.6, alpha_nav=0.5, alpha_refl=2.0, alpha_smooth=0.1, alpha_rp_stab=3.0)
    fu, nav, refl = Command(0.5, 0.5, 0.0), Command(1, 0, 0), Command(0, 1, 0)
    du = Command(0.1, -0.2, 0.05)
    r = handoff_rewards(fu, nav, refl, 0.4, du, 0.02, cfg)
    g = 0.5
    assert r["coord"] == pytest.approx((1 - g) * math.exp(-0.5 * 0.5) + g * math.exp(-2.0 * 0.5))
    assert r["smooth"] == pytest.approx(math.tanh(0.1 / (math.sqrt(0.01 + 0.04 + 0.0025) + 1e-3)))
    assert r["stable"] == pytest.approx(math.exp(-3.0 * 0.02))
