import math

import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from codriving.config import ControlGains, IdmParams, MobilParams
from codriving.dynamics import (
    OverlapError,
    VehicleState,
    bicycle_step,
    desired_gap,
    idm_acceleration,
    lateral_control,
    longitudinal_control,
    mobil_decide,
    wrap_angle,
)
from oracles import bicycle_oracle, idm_oracle, lateral_oracle

IDM = IdmParams(a_max=3.0, a_dd=3.0, v_d=10.0, delta=4, s0=2.0, T_g=1.5)
speeds = st.floats(0.0, 30.0)
gaps = st.floats(0.1, 500.0)


def car(**kw):
    base = dict(id=1, x=0.0, y=0.0, v=5.0, heading=0.0, lane_id="a", route=("a",), length=4.0)
    base.update(kw)
    return VehicleState(**base)


class TestIdm:
    def test_free_road_at_desired_speed(self):
        assert idm_acceleration(math.inf, 10.0, 0.0, IDM) == pytest.approx(0.0, abs=1e-12)

    def test_standstill_free_road(self):
        assert idm_acceleration(math.inf, 0.0, 0.0, IDM) == 3.0

    def test_hand_example(self):
        assert desired_gap(5.0, 2.0, IDM) == pytest.approx(11.1667, abs=1e-4)
        assert idm_acceleration(20.0, 5.0, 2.0, IDM) == pytest.approx(1.877, abs=1e-3)

    def test_overlap_raises(self):
        with pytest.raises(OverlapError):
            idm_acceleration(0.0, 5.0, 0.0, IDM)

    def test_brake_cap(self):
        assert idm_acceleration(0.5, 10.0, 5.0, IDM, a_brake_cap=5.0) == -5.0

    @given(gaps, speeds, st.floats(-10, 10))
    def test_matches_oracle(self, s, v, dv):
        got = idm_acceleration(s, v, dv, IDM, 5.0)
        want = idm_oracle(s, v, dv, 3.0, 3.0, 10.0, 4, 2.0, 1.5, 5.0)
        assert got == pytest.approx(want, rel=1e-9, abs=1e-12)

    @given(st.floats(0.0, 9.9), st.floats(0.0, 9.9))
    def test_decreasing_in_speed(self, v1, v2):
        lo, hi = sorted((v1, v2))
        assert idm_acceleration(math.inf, lo, 0.0, IDM) >= idm_acceleration(math.inf, hi, 0.0, IDM)

    @given(gaps, gaps, speeds)
    def test_increasing_in_gap(self, s1, s2, v):
        lo, hi = sorted((s1, s2))
        assert idm_acceleration(lo, v, 0.0, IDM) <= idm_acceleration(hi, v, 0.0, IDM)

    @given(st.floats(0.1, 9.5))
    def test_equilibrium_gap(self, v):
        s_eq = desired_gap(v, 0.0, IDM) / math.sqrt(1.0 - (v / IDM.v_d) ** IDM.delta)
        assert abs(idm_acceleration(s_eq, v, 0.0, IDM)) < 1e-9


class TestMobil:
    P = MobilParams(p=0.5, a_th=0.2, b_safe=2.0)

    def test_zero_gain_rejected(self):
        assert not mobil_decide(0.0, (0.0, 0.0), (0.0, 0.0), self.P)

    def test_unsafe_follower_rejected(self):
        assert not mobil_decide(100.0, (-3.0, 0.0), (0.0, 0.0), self.P)

    def test_hand_example(self):
        # incentive 1.0 + 0.5 * (-0.2 + 0.1) = 0.95
        assert mobil_decide(1.0, (-0.5, -0.3), (0.1, 0.0), self.P)

    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-3, 3))
    def test_only_deltas_matter(self, gain, na, nb, oa, ob, c):
        assume(na >= -2.0 and na + c >= -2.0)
        assert mobil_decide(gain, (na, nb), (oa, ob), self.P) == mobil_decide(gain, (na + c, nb + c), (oa + c, ob + c), self.P)


class TestControl:
    G = ControlGains(K_p=1.0, K_h=1.0, v_floor=0.5, a_brake_cap=5.0)

    def test_longitudinal(self):
        assert longitudinal_control(5.0, 5.0, self.G, 3.0) == 0.0
        assert longitudinal_control(7.0, 5.0, self.G, 3.0) == 2.0
        assert longitudinal_control(0.0, 20.0, self.G, 3.0) == -5.0

    def test_lateral_examples(self):
        assert lateral_control(0.3, 0.3, 10.0, 4.0, self.G) == 0.0
        assert lateral_control(0.1, 0.0, 10.0, 4.0, self.G) == pytest.approx(math.asin(0.02), abs=1e-12)
        assert lateral_control(3.0, 0.0, 0.0, 4.0, self.G) == pytest.approx(math.pi / 2)

    @given(st.floats(-20, 20), st.floats(-20, 20), speeds, st.floats(0.5, 10))
    def test_lateral_bounded_and_matches(self, phi_r, phi, v, l):
        d = lateral_control(phi_r, phi, v, l, self.G)
        assert math.isfinite(d) and -math.pi / 2 <= d <= math.pi / 2
        assert d == pytest.approx(lateral_oracle(phi_r, phi, v, l, 1.0, 0.5), rel=1e-9, abs=1e-12)

    @given(st.floats(-50, 50))
    def test_wrap_range(self, a):
        w = wrap_angle(a)
        assert -math.pi < w <= math.pi
        assert math.cos(w) == pytest.approx(math.cos(a), abs=1e-9)


class TestBicycle:
    def test_straight_advance(self):
        nxt = bicycle_step(car(v=10.0), 0.0, 0.0, 0.1)
        assert nxt.x == pytest.approx(1.0) and nxt.y == 0.0 and nxt.heading == 0.0

    def test_steered_step_against_hand_evaluation(self):
        # beta = atan(tan(0.1) / 2) = 0.0501253...
        nxt = bicycle_step(car(v=5.0, length=4.0), 0.0, 0.1, 0.1)
        beta = math.atan(0.5 * math.tan(0.1))
        assert beta == pytest.approx(0.0501253, abs=1e-7)
        assert nxt.x == pytest.approx(0.5 * math.cos(beta), abs=1e-12)
        assert nxt.y == pytest.approx(0.5 * math.sin(beta), abs=1e-12)
        assert nxt.heading == pytest.approx(5.0 / 4.0 * math.sin(beta) * 0.1, abs=1e-12)

    def test_speed_floor(self):
        assert bicycle_step(car(v=0.2), -5.0, 0.0, 0.1).v == 0.0

    def test_bad_dt(self):
        with pytest.raises(ValueError):
            bicycle_step(car(), 0.0, 0.0, 0.0)

    @given(speeds, st.floats(-3, 3), st.floats(-3, 3), st.floats(-1.5, 1.5), st.floats(0.01, 0.5))
    def test_matches_oracle(self, v, phi, a, delta, dt):
        s = car(v=v, heading=phi, x=1.5, y=-2.0)
        nxt = bicycle_step(s, a, delta, dt)
        ox, oy, ov, oh = bicycle_oracle(1.5, -2.0, v, phi, 4.0, a, delta, dt)
        assert (nxt.x, nxt.y, nxt.v) == pytest.approx((ox, oy, ov), rel=1e-9, abs=1e-12)
        assert math.cos(nxt.heading - oh) == pytest.approx(1.0, abs=1e-12)

    @given(speeds, st.floats(-3, 3), st.floats(-3, 3))
    def test_conservation(self, v, phi, a):
        s = car(v=v, heading=phi)
        assert bicycle_step(s, a, 0.0, 0.1).heading == pytest.approx(wrap_angle(phi), abs=0)
        assert bicycle_step(s, 0.0, 0.2, 0.1).v == v

    def test_convergence_order(self):
        """Halving dt shrinks the one-step-vs-two-half-steps mismatch roughly fourfold."""
        s = car(v=8.0, heading=0.3)
        errs = []
        for dt in (0.1, 0.05, 0.025):
            one = bicycle_step(s, 1.0, 0.2, dt)
            two = bicycle_step(bicycle_step(s, 1.0, 0.2, dt / 2), 1.0, 0.2, dt / 2)
            errs.append(math.hypot(one.x - two.x, one.y - two.y))
        assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.1)
        assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.1)

    def test_vehicle_state_validation(self):
        with pytest.raises(ValueError):
            car(v=-1.0)
        with pytest.raises(ValueError):
            car(length=0.0)
        s = car(v=3.0, heading=0.7)
        assert (s.vx, s.vy) == pytest.approx((3.0 * math.cos(0.7), 3.0 * math.sin(0.7)), abs=1e-9)
