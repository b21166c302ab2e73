import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from safeplatoon.vehicle_dynamics import (
    DisturbanceProfile, OvmParams, PlatoonConfig, PlatoonState, disturbance_sequence,
    head_velocity_sequence, linearized_hdv_coeffs, optimal_velocity, optimal_velocity_slope,
    ovm_accel, rollout, step,
)

P = OvmParams()
CFG = PlatoonConfig()


# optimal velocity ---------------------------------------------------------

@pytest.mark.parametrize("s, expected", [(5.0, 0.0), (35.0, 30.0), (20.0, 15.0), (0.0, 0.0), (80.0, 30.0)])
def test_optimal_velocity_values(s, expected):
    assert optimal_velocity(P, s) == pytest.approx(expected, abs=1e-12)


def test_optimal_velocity_monotone_and_continuous_on_grid():
    s = np.linspace(-5.0, 45.0, 1000)
    v = optimal_velocity(P, s)
    assert np.all(np.diff(v) >= -1e-9)
    assert v.min() >= 0.0 and v.max() <= P.v_max
    eps = 1e-9
    for b in (P.s_st, P.s_go):
        assert abs(optimal_velocity(P, b + eps) - optimal_velocity(P, b - eps)) <= 1e-9


def test_optimal_velocity_slope_matches_central_difference():
    for s in np.linspace(6.0, 34.0, 15):
        h = 1e-6
        fd = (optimal_velocity(P, s + h) - optimal_velocity(P, s - h)) / (2 * h)
        assert optimal_velocity_slope(P, s) == pytest.approx(fd, rel=1e-6)
    assert optimal_velocity_slope(P, 2.0) == 0.0 and optimal_velocity_slope(P, 40.0) == 0.0


@pytest.mark.parametrize(
    "s, v, v_prev, expected", [(20, 15, 15, 0.0), (5, 0, 0, 0.0), (35, 15, 15, 9.0)]
)
def test_ovm_accel_examples(s, v, v_prev, expected):
    assert ovm_accel(P, s, v, v_prev) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize(
    "kw",
    [dict(alpha=0.0), dict(beta=-0.1), dict(s_st=10.0, s_go=5.0), dict(s_st=0.0), dict(v_max=0.0)],
)
def test_ovm_params_rejects_invalid(kw):
    with pytest.raises(ValueError):
        OvmParams(**kw)


# config ---------------------------------------------------------------------

def test_config_checks_equilibrium_consistency():
    with pytest.raises(ValueError, match="equilibrium"):
        PlatoonConfig(s_eq=25.0)
    with pytest.raises(ValueError):
        PlatoonConfig(cav_index=0)
    with pytest.raises(ValueError):
        PlatoonConfig(a_min=1.0)
    with pytest.raises(ValueError):
        PlatoonConfig(hdv_params=(P,) * 3)


def test_config_indices():
    assert CFG.hdv_indices == (1, 2, 4, 5)
    assert CFG.follower_indices == (4, 5)
    assert CFG.predecessor_index == 2
    with pytest.raises(KeyError):
        CFG.params_for(3)


# step -----------------------------------------------------------------------

def test_equilibrium_is_an_exact_fixed_point():
    x = PlatoonState.equilibrium(CFG)
    for _ in range(1000):
        nxt = step(x, CFG, 0.0, 0.0)
        assert np.max(np.abs(nxt.as_vector() - x.as_vector())) == 0.0
        assert nxt.v_head == x.v_head
        x = nxt
    assert x.t == pytest.approx(100.0)


def test_cav_euler_update():
    nxt = step(PlatoonState.equilibrium(CFG), CFG, 1.0, 0.0)
    assert nxt.v[CFG.cav_index - 1] == pytest.approx(15.1)


def test_hdv_update_from_large_spacing():
    # 9 m/s^2 exceeds the default clamp, so widen the bounds to see the raw law
    wide = PlatoonConfig(a_min=-10.0, a_max=10.0)
    x = PlatoonState.equilibrium(wide)
    s = x.s.copy()
    s[0] = 35.0
    nxt = step(PlatoonState(0.0, 15.0, s, x.v.copy()), wide, 0.0, 0.0)
    assert nxt.v[0] == pytest.approx(15.9)
    clamped = step(PlatoonState(0.0, 15.0, s, x.v.copy()), CFG, 0.0, 0.0)
    assert clamped.v[0] == pytest.approx(15.5)


def test_step_rejects_out_of_bounds_command():
    x = PlatoonState.equilibrium(CFG)
    with pytest.raises(ValueError):
        step(x, CFG, 5.5, 0.0)


def test_step_clamps_velocity_and_latches_collision():
    x = PlatoonState(0.0, 0.0, np.array([0.05, 20, 20, 20, 20.0]), np.array([1.0, 0.1, 0.1, 0.1, 0.1]))
    nxt = step(x, CFG, -5.0, 0.0)
    assert np.all(nxt.v >= 0.0)
    assert nxt.collided
    again = step(PlatoonState(nxt.t, 5.0, np.full(5, 20.0), nxt.v, nxt.collided), CFG, 0.0, 0.0)
    assert again.collided


def test_hdv_acceleration_clamped_to_bounds():
    x = PlatoonState.equilibrium(CFG)
    s = x.s.copy()
    s[0] = 200.0  # huge gap: unclamped OVM wants 0.6 * 15 = 9 m/s^2
    nxt = step(PlatoonState(0.0, 40.0, s, x.v.copy()), CFG, 0.0, 0.0)
    assert (nxt.v[0] - 15.0) / CFG.dt == pytest.approx(CFG.a_max)


def test_override_replaces_law_but_not_for_cav():
    x = PlatoonState.equilibrium(CFG)
    nxt = step(x, CFG, 0.0, 0.0, overrides={5: 1.0})
    assert nxt.v[4] == pytest.approx(15.1)
    with pytest.raises(ValueError):
        step(x, CFG, 0.0, 0.0, overrides={3: 1.0})


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_order_preserved_without_collision(seed):
    heads = head_velocity_sequence(DisturbanceProfile(std=2.0), seed, 300, CFG)
    states = rollout(CFG, PlatoonState.equilibrium(CFG), heads, 0.0)
    for x in states:
        if not x.collided:
            assert np.all(x.s > 0)
        assert np.all(x.v >= 0)


# disturbances ---------------------------------------------------------------

def test_head_pulse_profile_shape():
    prof = DisturbanceProfile("pulse", accel=-4.0, active_duration=2.5, hold_duration=2.5, recovery_rate=1.0)
    a = head_velocity_sequence(prof, None, 300, CFG)
    v = 15.0 + np.cumsum(a) * CFG.dt
    assert v[24] == pytest.approx(5.0)
    assert np.allclose(v[25:50], 5.0)
    assert v[-1] == pytest.approx(15.0)
    assert np.all(a[50:150] == pytest.approx(1.0))


def test_follower_pulse_raises_velocity_by_four():
    prof = DisturbanceProfile("pulse", accel=1.0, active_duration=4.0, hold_duration=4.0, target=5)
    seq = disturbance_sequence(prof, None, 200, CFG.dt)
    assert np.nansum(seq[:40]) * CFG.dt == pytest.approx(4.0)
    assert np.all(seq[40:80] == 0.0)
    assert np.all(np.isnan(seq[120:]))
    # head sees nothing from a follower pulse
    assert not np.any(head_velocity_sequence(prof, None, 200, CFG))


def test_gaussian_zero_std_and_determinism():
    assert not np.any(head_velocity_sequence(DisturbanceProfile(std=0.0), 3, 50, CFG))
    a = head_velocity_sequence(DisturbanceProfile(std=2.0), 3, 50, CFG)
    b = head_velocity_sequence(DisturbanceProfile(std=2.0), 3, 50, CFG)
    assert np.array_equal(a, b)
    assert np.std(head_velocity_sequence(DisturbanceProfile(std=2.0), 4, 20000, CFG)) == pytest.approx(2.0, rel=0.03)


def test_disturbance_errors():
    with pytest.raises(ValueError):
        DisturbanceProfile("sine")
    with pytest.raises(ValueError):
        DisturbanceProfile("gaussian_random", target=4)
    with pytest.raises(ValueError):
        disturbance_sequence(DisturbanceProfile(), 0, 0, 0.1)


# linearization ----------------------------------------------------------------

def test_linearized_coefficients():
    a1, a2, a3 = linearized_hdv_coeffs(P, 20.0, 15.0)
    assert (a1, a2, a3) == pytest.approx((0.9425, 1.5, 0.9), abs=1e-4)
    with pytest.warns(RuntimeWarning):
        assert linearized_hdv_coeffs(P, 5.0, 0.0)[0] == 0.0
    assert linearized_hdv_coeffs(OvmParams(beta=0.0), 20.0, 15.0)[2] == 0.0


def test_linearization_residual_is_second_order():
    a1, a2, a3 = linearized_hdv_coeffs(P, 20.0, 15.0)
    rng = np.random.default_rng(0)
    # V''(20) = 0, so the residual bound uses the largest curvature nearby; fitted once
    C = 0.05
    for _ in range(500):
        d = rng.uniform(-1, 1, 3)
        d *= rng.uniform(0, 0.1) / np.linalg.norm(d)
        exact = ovm_accel(P, 20 + d[0], 15 + d[1], 15 + d[2])
        lin = a1 * d[0] - a2 * d[1] + a3 * d[2]
        assert abs(exact - lin) <= C * np.dot(d, d)


def test_euler_converges_first_order():
    """Halving dt on a 10 s recovery from a perturbed spacing."""

    def final(dt):
        cfg = PlatoonConfig(dt=dt)
        s = np.full(5, 20.0)
        s[0] = 26.0
        x = PlatoonState(0.0, 15.0, s, np.full(5, 15.0))
        for _ in range(int(round(10.0 / dt))):
            x = step(x, cfg, 0.0, 0.0)
        return x.as_vector()

    ref = final(0.1 / 64)
    errs = [np.max(np.abs(final(dt) - ref)) for dt in (0.1, 0.05, 0.025)]
    orders = [math.log2(errs[k] / errs[k + 1]) for k in range(2)]
    assert min(orders) >= 0.9
