"""MOBIL lane-change rule on ground-truth world state.

Accelerations are one-shot IDM predictions against the current gaps and
speeds. Neighbours are found by lane occupancy (a vehicle mid-change counts
in both lanes), matching the longitudinal controller in :mod:`lanebench.sim`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple

from lanebench.actions import DIRECTION, Action
from lanebench.sim import IdmParams, WorldState, bumper_gap, idm_acceleration, lane_neighbors

# IDM needs a positive desired speed; stopped vehicles are modelled with this floor.
MIN_DESIRED_SPEED = 0.1


@dataclass(frozen=True)
class MobilParams:
    politeness: float = 0.3
    a_th: float = 0.1
    b_safe: float = 4.0

    def __post_init__(self):
        if not 0.0 <= self.politeness <= 1.0:
            raise ValueError("politeness must lie in [0, 1]")
        if not self.a_th > 0 or not self.b_safe > 0:
            raise ValueError("a_th and b_safe must be positive")


@dataclass(frozen=True)
class MobilEvaluation:
    direction: Action
    a_e_new: float
    a_e: float
    a_n_new: float
    a_n: float
    a_o_new: float
    a_o: float
    safety_ok: bool
    incentive: float


class _Predictor:
    def __init__(self, world: WorldState, idm: IdmParams, desired: Mapping[int, float]):
        self.world = world
        self.idm = idm
        self.desired = desired

    def params_for(self, k):
        vid = int(self.world.ids[k])
        if vid == self.world.ego_id and vid not in self.desired:
            return self.idm
        v0 = self.desired.get(vid, float(self.world.speed[k]))
        return IdmParams(max(v0, MIN_DESIRED_SPEED), self.idm.a_max, self.idm.b, self.idm.s0,
                         self.idm.T, self.idm.delta, self.idm.b_hard)

    def accel(self, k: Optional[int], leader: Optional[int]) -> float:
        """IDM acceleration of vehicle ``k`` behind ``leader`` (0.0 when ``k`` is None)."""
        if k is None:
            return 0.0
        p = self.params_for(k)
        v = float(self.world.speed[k])
        if leader is None:
            return idm_acceleration(v, float("inf"), None, p)
        gap = bumper_gap(self.world, k, leader)
        if gap <= 0:
            return -p.b_hard
        return idm_acceleration(v, gap, float(self.world.speed[leader]), p)


def evaluate_direction(world: WorldState, k: int, direction: Action, params: MobilParams,
                       idm: IdmParams, desired: Mapping[int, float] = None) -> Optional[MobilEvaluation]:
    """Accelerations before and after vehicle ``k`` moves one lane in ``direction``.

    Returns None when the target lane does not exist.
    """
    lane = int(world.lane[k])
    target = lane + DIRECTION[direction]
    if not world.road.has_lane(target):
        return None
    pred = _Predictor(world, idm, desired or {})
    lead_cur, old_follower = lane_neighbors(world, k, lane)
    lead_new, new_follower = lane_neighbors(world, k, target)

    a_e = pred.accel(k, lead_cur)
    a_e_new = pred.accel(k, lead_new)
    a_n = a_n_new = 0.0
    if new_follower is not None:
        a_n = pred.accel(new_follower, lane_neighbors(world, new_follower, target)[0])
        a_n_new = pred.accel(new_follower, k)
    a_o = a_o_new = 0.0
    if old_follower is not None:
        a_o = pred.accel(old_follower, lane_neighbors(world, old_follower, lane)[0])
        a_o_new = pred.accel(old_follower, lane_neighbors(world, old_follower, lane, exclude=(k,))[0])

    safety_ok = a_e_new > -params.b_safe and a_n_new > -params.b_safe
    incentive = (a_e_new - a_e) + params.politeness * ((a_n_new - a_n) + (a_o_new - a_o))
    return MobilEvaluation(direction, a_e_new, a_e, a_n_new, a_n, a_o_new, a_o, safety_ok, incentive)


def feasible(ev: Optional[MobilEvaluation], params: MobilParams) -> bool:
    return ev is not None and ev.safety_ok and ev.incentive > params.a_th


def choose(evaluations: Mapping[Action, MobilEvaluation], params: MobilParams) -> Action:
    """Left if feasible, else Right if feasible, else Keep."""
    for direction in (Action.LEFT, Action.RIGHT):
        if feasible(evaluations.get(direction), params):
            return direction
    return Action.KEEP


def mobil_decide(world: WorldState, params: MobilParams = MobilParams(), idm: IdmParams = IdmParams(),
                 desired: Mapping[int, float] = None) -> Tuple[Action, Dict[Action, MobilEvaluation]]:
    """MOBIL decision for the ego plus the per-direction evaluations.

    ``desired`` maps vehicle ids to desired speeds; vehicles missing from it
    are assumed to be at their desired speed already, and the ego falls back
    to ``idm.v0``.
    """
    k = world.ego_index
    if world.lc_dir[k] != 0:
        raise ValueError("MOBIL is only evaluated between lane changes")
    evaluations = {}
    for direction in (Action.LEFT, Action.RIGHT):
        ev = evaluate_direction(world, k, direction, params, idm, desired)
        if ev is not None:
            evaluations[direction] = ev
    return choose(evaluations, params), evaluations


def lane_change_is_safe(world: WorldState, k: int, direction: Action, params: MobilParams,
                        idm: IdmParams, desired: Mapping[int, float] = None) -> bool:
    """MOBIL's safety criterion alone, for vehicle ``k``."""
    ev = evaluate_direction(world, k, direction, params, idm, desired)
    return ev is not None and ev.safety_ok


class MobilPolicy:
    """Adapter giving MOBIL the evaluation policy signature.

    Uses only ground-truth state; the observation argument is ignored. Call
    :meth:`reset` with the scenario instance to pick up true desired speeds.
    """

    uses_observation = False

    def __init__(self, params: MobilParams = MobilParams(), idm: IdmParams = IdmParams()):
        self.params = params
        self.idm = idm
        self.desired: Dict[int, float] = {}
        self.log = []

    def reset(self, instance=None):
        self.desired = {} if instance is None else {
            vid: b.desired_speed for vid, b in instance.behaviors.items()}
        self.log = []

    def __call__(self, world: WorldState, observation=None) -> Action:
        if world.lc_dir[world.ego_index] != 0:
            return Action.KEEP
        action, evaluations = mobil_decide(world, self.params, self.idm, self.desired)
        self.log.append((action, evaluations))
        return action


def mobil_policy(world: WorldState, params: MobilParams = MobilParams(),
                 idm: IdmParams = IdmParams()) -> Action:
    return MobilPolicy(params, idm)(world)
