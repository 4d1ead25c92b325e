import math
from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from codriving import templates
from codriving.actions import ALL_ACTIONS, SAFETY_PREFERENCE, MetaAction, parse_decision
from codriving.config import default_config
from codriving.decision import (
    ActionMask,
    action_to_reference,
    arrival_time,
    assemble_prompt,
    assess_action_safety,
    decide,
    speed_profile,
    target_speed,
)
from codriving.dynamics import VehicleState
from codriving.gateway import BackendUnavailable, StubBackend
from codriving.negotiation import Severity, band, make_pair
from codriving.perception import LaneContext
from codriving.world import ConflictPoint, build_scenario

CFG = default_config("highway", cav_count=0, hdv_count=0)
S, D, C, L, R = (MetaAction.SlowDown, MetaAction.Cruise, MetaAction.SpeedUp, MetaAction.ChangeLeft, MetaAction.ChangeRight)


def highway(*vehicles):
    w = build_scenario("highway", CFG)
    return replace(w, vehicles={v.id: v for v in vehicles}, cav_ids=frozenset(v.id for v in vehicles if v.is_cav))


def on(vid, lane_id, s, v, cav=True, w=None, lateral=0.0):
    lane = (w or build_scenario("highway", CFG)).lanes[lane_id]
    x, y = lane.position(s, lateral)
    return VehicleState(vid, x, y, v, lane.heading(s), lane_id, (lane_id,), 5.0, 2.0, cav)


def removed_at(mask, layer):
    return {a for a, lay, _ in mask.removed if lay == layer}


class TestMask:
    def test_empty_road(self):
        w = highway(on(1, "h0", 100, 20))
        mask = assess_action_safety(w, w.vehicles[1], [], CFG)
        assert set(mask.allowed) == {S, D, C, R}
        assert removed_at(mask, "AdjacentLane") == {L}

    def test_close_leader_blocks_speed_up(self):
        # leader 3 m ahead (bumper to bumper) at the same speed
        w = highway(on(1, "h1", 100, 10), on(2, "h1", 108, 10, cav=False))
        mask = assess_action_safety(w, w.vehicles[1], [], CFG)
        assert C in removed_at(mask, "SameLane")
        assert D in mask.allowed and S in mask.allowed

    def test_forward_simulation_oracle(self):
        """Layer 1 leader check against an independent constant-speed roll-out."""
        gains, a_max = CFG.control, CFG.idm.a_max
        for gap0, v_lead in [(3.0, 10.0), (6.0, 9.0), (12.0, 8.0), (25.0, 10.0), (4.0, 12.0)]:
            w = highway(on(1, "h1", 100, 10), on(2, "h1", 105 + gap0, v_lead, cav=False))
            mask = assess_action_safety(w, w.vehicles[1], [], CFG)
            for action in (S, D, C):
                v, s, ok = 10.0, 0.0, True
                v_r = {S: 8.0, D: 10.0, C: 12.0}[action]
                for k in range(1, 31):
                    a = max(-gains.a_brake_cap, min(a_max, gains.K_p * (v_r - v)))
                    s += v * 0.1
                    v = max(v + a * 0.1, 0.0)
                    ok &= gap0 + v_lead * k * 0.1 - s >= CFG.idm.s0
                assert (action in removed_at(mask, "SameLane")) == (not ok), (gap0, v_lead, action)

    def test_rear_vehicle_protects_against_braking(self):
        w = highway(on(1, "h1", 100, 10), on(2, "h1", 93, 14, cav=False))
        mask = assess_action_safety(w, w.vehicles[1], [], CFG)
        assert S in removed_at(mask, "SameLane")

    def test_lane_change_gaps(self):
        w = highway(on(1, "h1", 100, 20), on(2, "h0", 101, 20, cav=False))
        mask = assess_action_safety(w, w.vehicles[1], [], CFG)
        assert L in removed_at(mask, "AdjacentLane") and R in mask.allowed

    def test_change_in_progress(self):
        w = highway(on(1, "h1", 100, 20, lateral=1.5))
        mask = assess_action_safety(w, w.vehicles[1], [], CFG)
        assert {L, R} <= removed_at(mask, "AdjacentLane")

    def test_conflict_layer(self):
        w = highway(on(1, "h1", 100, 10))
        other = VehicleState(2, 0, 0, 10.0, 0.0, "h1", ("h1",))
        pair = make_pair(w.vehicles[1], other, ConflictPoint("x", "y", (0.0, 0.0), "crossing"), 60.0, 5.0)
        mask = assess_action_safety(w, w.vehicles[1], [pair], CFG)
        # oracle: continuous-time speed response, extrapolated at the final speed
        t_other = 0.5
        bands = {}
        for action, v_r in ((S, 8.0), (D, 10.0), (C, 12.0)):
            s3 = v_r * 3 + (10 - v_r) * (1 - math.exp(-3))
            v3 = v_r + (10 - v_r) * math.exp(-3)
            bands[action] = band(abs(3 + (60 - s3) / v3 - t_other))
        assert bands == {S: Severity.SlightDanger, D: Severity.SlightDanger, C: Severity.GeneralDanger}
        assert removed_at(mask, "ConflictLane") == {C}
        assert S in mask.allowed

    def test_all_removed_readmits_slow_down(self):
        w = highway(on(1, "h0", 100, 10), on(2, "h0", 105.5, 0.0, cav=False))
        mask = assess_action_safety(w, w.vehicles[1], [], CFG)
        assert mask.allowed == (S,)

    def test_mask_validation(self):
        with pytest.raises(ValueError):
            ActionMask(())
        with pytest.raises(ValueError):
            ActionMask((S, D))

    @given(st.integers(0, 200))
    def test_never_empty_and_layer3_relative(self, seed):
        w = build_scenario("intersection", default_config("intersection", seed=seed % 40))
        from codriving.negotiation import detect_conflicts

        pairs = detect_conflicts(w)
        cfg = w.config
        for ego in sorted(w.cav_ids):
            mask = assess_action_safety(w, w.vehicles[ego], pairs, cfg)
            assert mask.allowed
            notes = dict(mask.notes)
            for action, layer, _ in mask.removed:
                if layer == "ConflictLane":
                    assert "danger" in notes[action]


class TestProfile:
    def test_arrival_interpolation_and_extrapolation(self):
        vs, ss = [10.0] * 31, [k * 1.0 for k in range(31)]
        assert arrival_time(5.5, vs, ss, 0.1) == pytest.approx(0.55)
        assert arrival_time(40.0, vs, ss, 0.1) == pytest.approx(4.0)
        assert arrival_time(0.0, vs, ss, 0.1) == 0.0
        assert arrival_time(40.0, [0.0] * 31, [0.0] * 31, 0.1) == math.inf

    def test_profile_tracks_reference(self):
        vs, _ = speed_profile(5.0, 8.0, CFG.control, 3.0, 3.0, 0.1)
        assert vs[0] == 5.0 and 7.5 < vs[-1] <= 8.0


class TestReference:
    def ctx(self):
        return LaneContext("h1", "h0", "h2", ())

    def test_cruise_and_floor(self):
        w = highway(on(1, "h1", 100, 8))
        ref = action_to_reference(D, w.vehicles[1], w, self.ctx(), 2.0, 30.0)
        assert ref.v_r == 8.0 and ref.phi_r == pytest.approx(0.0, abs=1e-12) and ref.target_lane == "h1"
        slow = replace(w.vehicles[1], v=1.0)
        assert action_to_reference(S, slow, w, self.ctx(), 2.0, 30.0).v_r == 0.0
        assert action_to_reference(C, replace(slow, v=29.5), w, self.ctx(), 2.0, 30.0).v_r == 30.0

    def test_change_left_turns_left(self):
        w = highway(on(1, "h1", 100, 8))
        ego = w.vehicles[1]
        ref = action_to_reference(L, ego, w, self.ctx(), 2.0, 30.0)
        # geometry oracle: the left lane centre lies on the +90 degree side of the heading
        assert ref.target_lane == "h0"
        assert math.copysign(1, math.sin(ref.phi_r - ego.heading)) == 1.0
        assert action_to_reference(R, ego, w, self.ctx(), 2.0, 30.0).phi_r < 0

    def test_missing_lane(self):
        w = highway(on(1, "h0", 100, 8))
        with pytest.raises(ValueError):
            action_to_reference(L, w.vehicles[1], w, LaneContext("h0", None, "h1", ()), 2.0, 30.0)

    @given(st.sampled_from(ALL_ACTIONS[:3]), st.floats(0, 40), st.floats(0.1, 5))
    def test_speed_in_range(self, action, v, step):
        assert 0.0 <= target_speed(action, v, step, 30.0) <= 30.0


class TestPrompt:
    def test_sections_ordered_and_zero_shot(self):
        b = assemble_prompt("scene text", "conflict text")
        text = b.user_text()
        positions = [text.index(h) for h in templates.SECTIONS]
        assert positions == sorted(positions)
        assert templates.NO_MEMORY in text
        assert 'Decision: <ACTION>' in text
        assert b.messages()[0] == ("system", b.system_text)

    def test_deterministic(self):
        mask = ActionMask((S, D), ((C, "SameLane", "x"), (L, "AdjacentLane", "no such lane"), (R, "AdjacentLane", "no such lane")))
        a = assemble_prompt("s", "c", ["m1", "m2"], mask)
        b = assemble_prompt("s", "c", ["m1", "m2"], mask)
        assert a == b and a.user_text() == b.user_text()
        assert "Removed for safety: speed up (SameLane: x)" in a.user_text()

    def test_budget_drops_trailing_memories(self):
        mems = [f"memory number {i} " + "x" * 200 for i in range(5)]
        full = len(assemble_prompt("s", "c", mems))
        # room for exactly two memories
        two = len(assemble_prompt("s", "c", mems[:2]))
        b = assemble_prompt("s", "c", mems, budget=two + 10)
        assert b.memories == tuple(mems[:2]) and b.dropped_memories == 3
        assert len(b) <= two + 10 < full


class Scripted:
    def __init__(self, *replies):
        self.replies = list(replies)
        self.calls = 0

    def chat(self, request):
        self.calls += 1
        reply = self.replies.pop(0)
        if isinstance(reply, Exception):
            raise reply
        return reply


FULL = ActionMask.full()
NO_SPEEDUP = ActionMask((S, D, L, R), ((C, "ConflictLane", "x"),))


class TestDecide:
    def bundle(self, mask=FULL):
        return assemble_prompt("scene", "conflicts", mask=mask)

    def test_contract_path(self):
        out = decide(self.bundle(), Scripted("Decision: cruise\nRationale: fine."), FULL)
        assert (out.action, out.fallback) == (D, False)

    def test_masked_choice_falls_back(self):
        out = decide(self.bundle(NO_SPEEDUP), Scripted("Decision: speed up"), NO_SPEEDUP)
        assert (out.action, out.fallback) == (S, True)

    def test_timeout_falls_back(self):
        out = decide(self.bundle(), Scripted(BackendUnavailable("timed out")), FULL)
        assert (out.action, out.fallback) == (S, True) and "timed out" in out.error

    def test_reprompt_once(self):
        backend = Scripted("I think we should go", "decision: ACCELERATE")
        out = decide(self.bundle(), backend, FULL)
        assert (out.action, out.fallback, backend.calls) == (C, False, 2)
        backend = Scripted("nope", "still nope")
        out = decide(self.bundle(), backend, FULL)
        assert (out.action, out.fallback, backend.calls) == (S, True, 2)

    def test_synonyms(self):
        assert parse_decision("Decision: decelerate") is S
        assert parse_decision("**Decision**: Yield") is S
        assert parse_decision("DECISION: idle") is D
        assert parse_decision("Decision: keep speed") is D
        assert parse_decision("Decision: change lane left") is L
        assert parse_decision("blah\nDecision: speed up\nDecision: slow down") is C
        assert parse_decision("Decision: fly") is None

    def test_stub_is_deterministic(self):
        b = self.bundle()
        assert decide(b, StubBackend(), FULL) == decide(b, StubBackend(), FULL)

    @given(
        st.lists(st.text(max_size=60) | st.sampled_from([f"Decision: {a.value}" for a in MetaAction]), min_size=2, max_size=2),
        st.lists(st.sampled_from(ALL_ACTIONS), min_size=1, unique=True),
    )
    def test_output_always_allowed(self, replies, allowed):
        allowed = tuple(a for a in ALL_ACTIONS if a in allowed)
        mask = ActionMask(allowed, tuple((a, "SameLane", "x") for a in ALL_ACTIONS if a not in allowed))
        out = decide(self.bundle(mask), Scripted(*replies), mask)
        assert out.action in mask.allowed
        if out.fallback:
            assert out.action == next(a for a in SAFETY_PREFERENCE if a in allowed)
