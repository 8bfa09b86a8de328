import math

import pytest
from hypothesis import given, strategies as st

from lanebench import sim
from lanebench.actions import Action
from lanebench.mobil import (
    MobilEvaluation, MobilParams, MobilPolicy, choose, evaluate_direction, feasible, mobil_decide,
    mobil_policy,
)
from lanebench.sim import LaneChange, RoadModel, VehicleState, WorldState

from _worlds import car, idm_oracle, world

V_T = sim.kmh_to_ms(60.0)
L = sim.VEHICLE_LENGTH


def test_empty_road_keeps():
    action, evs = mobil_decide(world([car(0, 50, 1, V_T)]))
    assert action == Action.KEEP
    assert set(evs) == {Action.LEFT, Action.RIGHT}
    assert all(ev.incentive == 0.0 for ev in evs.values())


def test_slow_leader_prefers_left():
    v1 = sim.kmh_to_ms(20.0)
    w = world([car(0, 50, 1, V_T), car(1, 80, 1, v1)])
    action, evs = mobil_decide(w, MobilParams(0.3, 0.1, 4.0), desired={0: V_T, 1: v1})
    assert action == Action.LEFT
    a_e = idm_oracle(V_T, 30 - L, v1)
    for d in (Action.LEFT, Action.RIGHT):
        ev = evs[d]
        assert ev.a_e == pytest.approx(a_e, abs=1e-12)
        assert ev.a_e_new == pytest.approx(idm_oracle(V_T, math.inf, None), abs=1e-12)
        assert (ev.a_n, ev.a_n_new, ev.a_o, ev.a_o_new) == (0.0, 0.0, 0.0, 0.0)
        assert ev.safety_ok and ev.incentive == pytest.approx(-a_e)
        assert feasible(ev, MobilParams())


def test_fast_new_follower_blocks_direction():
    v1 = sim.kmh_to_ms(20.0)
    fast = 25.0
    # new follower in the left lane, 3 m bumper gap behind the ego
    w = world([car(0, 50, 1, 10.0), car(1, 80, 1, v1), car(2, 50 - L - 3.0, 2, fast)])
    desired = {0: V_T, 1: v1, 2: fast}
    action, evs = mobil_decide(w, MobilParams(), desired=desired)
    a_n_new = idm_oracle(fast, 3.0, 10.0, v0=fast)
    assert a_n_new <= -MobilParams().b_safe
    assert evs[Action.LEFT].a_n_new == pytest.approx(a_n_new, abs=1e-12)
    assert evs[Action.LEFT].a_n == pytest.approx(idm_oracle(fast, math.inf, None, v0=fast), abs=1e-12)
    assert not evs[Action.LEFT].safety_ok
    assert action == Action.RIGHT


def test_old_follower_terms():
    # old follower behind the ego gains when the ego leaves
    w = world([car(0, 50, 1, 10.0), car(1, 80, 1, 5.0), car(2, 35, 1, 12.0)])
    desired = {0: V_T, 1: 5.0, 2: 15.0}
    ev = evaluate_direction(w, 0, Action.RIGHT, MobilParams(), sim.IdmParams(), desired)
    assert ev.a_o == pytest.approx(idm_oracle(12.0, 15 - L, 10.0, v0=15.0), abs=1e-12)
    assert ev.a_o_new == pytest.approx(idm_oracle(12.0, 45 - L, 5.0, v0=15.0), abs=1e-12)
    p = 0.3
    want = (ev.a_e_new - ev.a_e) + p * ((ev.a_n_new - ev.a_n) + (ev.a_o_new - ev.a_o))
    assert ev.incentive == want


def test_missing_lane_has_no_evaluation():
    w = world([car(0, 50, 2, V_T), car(1, 70, 2, 3.0)])
    _, evs = mobil_decide(w)
    assert Action.LEFT not in evs
    assert evaluate_direction(w, 0, Action.LEFT, MobilParams(), sim.IdmParams()) is None
    assert choose({}, MobilParams()) == Action.KEEP


def test_refuses_mid_change_ego():
    with pytest.raises(ValueError):
        mobil_decide(world([car(0, 50, 1, V_T, lc=1, progress=0.2)]))


def test_policy_adapter_delegates():
    v1 = sim.kmh_to_ms(20.0)
    w = world([car(0, 50, 1, V_T), car(1, 80, 1, v1)])
    assert mobil_policy(w) == mobil_decide(w)[0] == Action.LEFT
    pol = MobilPolicy()
    assert pol(w, observation=None) == Action.LEFT
    assert pol(world([car(0, 50, 1, V_T, lc=1, progress=0.2)])) == Action.KEEP


def test_params_validation():
    with pytest.raises(ValueError):
        MobilParams(politeness=1.5)
    with pytest.raises(ValueError):
        MobilParams(a_th=0.0)


# -- properties ------------------------------------------------------------------------

@st.composite
def mobil_worlds(draw):
    lanes = draw(st.sampled_from([2, 3]))
    road = RoadModel(lanes, segment_length=1e6)
    n = draw(st.integers(1, 8))
    ego_lane = draw(st.integers(0, lanes - 1))
    cars = [VehicleState(0, 100.0, road.centerline(ego_lane), draw(st.floats(0, 25)), lane_index=ego_lane)]
    slots = set()
    for i in range(1, n):
        lane = draw(st.integers(0, lanes - 1))
        slot = draw(st.integers(-8, 8))
        if (lane, slot) in slots or (lane == ego_lane and slot == 0):
            continue
        slots.add((lane, slot))
        lc = None
        if draw(st.booleans()) and road.has_lane(lane + 1):
            lc = LaneChange(1, draw(st.sampled_from([0.1, 0.5, 0.9])))
        y = road.centerline(lane) + (0 if lc is None else lc.progress * road.lane_width)
        cars.append(VehicleState(i, 100.0 + 8.0 * slot, y, draw(st.floats(0, 25)), lane_index=lane,
                                 lc_state=lc))
    return WorldState.from_vehicles(road, cars, 0)


def mirror(w):
    n = w.road.lane_count
    cars = []
    for v in w.vehicles:
        lane = n - 1 - v.lane_index
        lc = None if v.lc_state is None else LaneChange(-v.lc_state.direction, v.lc_state.progress)
        y = n * w.road.lane_width - v.y
        cars.append(VehicleState(v.id, v.s, y, v.speed, v.accel, lane, lc, v.length, v.width))
    return WorldState.from_vehicles(w.road, cars, w.ego_id)


@given(mobil_worlds())
def test_safety_dominance(w):
    params = MobilParams()
    action, evs = mobil_decide(w, params)
    if action != Action.KEEP:
        ev = evs[action]
        assert ev.a_e_new > -params.b_safe and ev.a_n_new > -params.b_safe


@given(mobil_worlds())
def test_left_priority_under_mirror(w):
    params = MobilParams()
    a, evs = mobil_decide(w, params)
    b, mevs = mobil_decide(mirror(w), params)
    left_ok = feasible(evs.get(Action.LEFT), params)
    right_ok = feasible(evs.get(Action.RIGHT), params)
    assert left_ok == feasible(mevs.get(Action.RIGHT), params)
    assert right_ok == feasible(mevs.get(Action.LEFT), params)
    if left_ok and right_ok:
        assert a == b == Action.LEFT
    else:
        flip = {Action.KEEP: Action.KEEP, Action.LEFT: Action.RIGHT, Action.RIGHT: Action.LEFT}
        assert b == flip[a]


@given(mobil_worlds(), st.floats(-3, 3))
def test_zero_politeness_ignores_followers(w, c):
    params = MobilParams(politeness=0.0)
    action, evs = mobil_decide(w, params)
    for d, ev in evs.items():
        assert ev.incentive == ev.a_e_new - ev.a_e
        shifted = MobilEvaluation(d, ev.a_e_new, ev.a_e, ev.a_n_new + c, ev.a_n + c, ev.a_o_new + c,
                                  ev.a_o + c, ev.safety_ok,
                                  (ev.a_e_new - ev.a_e) + 0.0 * ((ev.a_n_new - ev.a_n) + (ev.a_o_new - ev.a_o)))
        assert feasible(shifted, params) == feasible(ev, params)
    assert choose(evs, params) == action


def test_safety_dominance_over_random_training_worlds():
    from lanebench.scenarios import gen_training
    params = MobilParams()
    accepted = 0
    for seed in range(300):
        inst = gen_training(seed)
        desired = {vid: b.desired_speed for vid, b in inst.behaviors.items()}
        action, evs = mobil_decide(inst.world, params, desired=desired)
        if action != Action.KEEP:
            accepted += 1
            assert evs[action].a_e_new > -params.b_safe and evs[action].a_n_new > -params.b_safe
    assert accepted > 0
