"""Lane-change MDP: bird's-eye raster observations, the three lateral
actions held for one decision period, the speed/lane-change/collision
reward, and the evaluation-time rule mask."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from lanebench import kernels
from lanebench.actions import DIRECTION, N_ACTIONS, Action
from lanebench.mobil import MobilParams, lane_change_is_safe
from lanebench.scenarios import (
    STREAM_DYNAMICS, Behavior, ScenarioInstance, TriggeredCutIn, TriggeredSpawn,
    cut_in_direction, make_rng,
)
from lanebench.sim import (
    LANE_CHANGE_DURATION, SIM_DT, IdmParams, WorldState, collision_pairs, idm_controls, kmh_to_ms,
    occupied_lanes, step,
)

__all__ = ["Action", "N_ACTIONS", "EnvSettings", "RewardBreakdown", "StepInfo", "StepOutcome",
           "LaneChangeEnv", "reward", "rasterize", "rule_mask"]

OBS_SHAPE = (64, 64, 3)

PALETTE = {
    "ego": (0, 0, 255),
    "social": (0, 255, 0),
    "line": (255, 0, 0),
    "sidewalk": (128, 128, 128),
    "road": (0, 0, 0),
}


@dataclass(frozen=True)
class EnvSettings:
    dt: float = SIM_DT
    decision_period: float = 1.0
    v_target_kmh: float = 60.0
    lc_duration: float = LANE_CHANGE_DURATION
    rule_gap_rear: float = 5.0
    rule_gap_front: float = 5.0
    view_rear: float = 25.0
    view_front: float = 50.0
    image_size: int = 64
    social_lc_probability: float = 0.02
    idm: IdmParams = field(default_factory=IdmParams)

    @property
    def substeps(self) -> int:
        n = int(round(self.decision_period / self.dt))
        if n < 1 or abs(n * self.dt - self.decision_period) > 1e-9:
            raise ValueError("decision_period must be a whole number of dt steps")
        return n

    @property
    def v_target(self) -> float:
        return kmh_to_ms(self.v_target_kmh)


@dataclass(frozen=True)
class RewardBreakdown:
    r_v: float
    r_l: float
    r_c: float
    total: float


def reward(avg_speed: float, lane_change_executed: bool, collided: bool, v_target: float) -> RewardBreakdown:
    """Speed reward while keeping the lane, a flat penalty for changing, and a
    collision penalty on top of either."""
    if avg_speed < 0 or not v_target > 0:
        raise ValueError("avg_speed must be >= 0 and v_target > 0")
    r_c = -1.0 if collided else 0.0
    if lane_change_executed:
        r_v, r_l = 0.0, -1.0
    else:
        r_v, r_l = 0.2 * avg_speed / v_target, 0.0
    return RewardBreakdown(r_v, r_l, r_c, r_v + r_l + r_c)


def rasterize(world: WorldState, settings: EnvSettings = EnvSettings()) -> np.ndarray:
    """64x64 RGB top-down view: 50 m ahead of the ego at the top, 25 m behind
    at the bottom, the full road plus one sidewalk lane per side across."""
    return kernels.rasterize(world.s, world.y, world.length, world.width, world.ego_index,
                             world.road.lane_count, world.road.lane_width,
                             settings.view_rear, settings.view_front, settings.image_size)


def rule_mask(world: WorldState, proposed: Action, gap_rear: float = 5.0,
              gap_front: float = 5.0) -> Action:
    """Replace a lane change by Keep when the target lane is missing or any
    vehicle occupying it overlaps ``[ego_s - gap_rear, ego_s + gap_front]``."""
    proposed = Action(proposed)
    if proposed == Action.KEEP:
        return proposed
    k = world.ego_index
    target = int(world.lane[k]) + DIRECTION[proposed]
    if not world.road.has_lane(target):
        return Action.KEEP
    lo = world.s[k] - gap_rear
    hi = world.s[k] + gap_front
    for j in range(len(world)):
        if j == k or target not in occupied_lanes(world, j):
            continue
        half = 0.5 * world.length[j]
        if world.s[j] - half < hi and world.s[j] + half > lo:
            return Action.KEEP
    return proposed


@dataclass(frozen=True)
class StepInfo:
    collision: bool
    distance: float
    speed: float
    lane_change: bool
    max_abs_accel: float
    time: float
    lane: int
    proposed_action: Action
    action: Action
    termination: Optional[str] = None


@dataclass(frozen=True)
class StepOutcome:
    observation: np.ndarray
    reward: RewardBreakdown
    done: bool
    info: StepInfo


class LaneChangeEnv:
    """Single-threaded environment; one instance per rollout worker.

    ``scenario_fn`` maps a seed to a :class:`ScenarioInstance` and is used by
    :meth:`reset`; :meth:`load` starts an episode from a prebuilt instance.
    """

    n_actions = N_ACTIONS
    observation_shape = OBS_SHAPE

    def __init__(self, scenario_fn: Optional[Callable[[int], ScenarioInstance]] = None,
                 settings: EnvSettings = EnvSettings(), rule_mask: bool = False):
        self.scenario_fn = scenario_fn
        self.settings = settings
        self.use_rule_mask = rule_mask
        self.world: Optional[WorldState] = None
        self.instance: Optional[ScenarioInstance] = None
        self.done = True

    # -- episode lifecycle --------------------------------------------------
    def reset(self, seed: int) -> np.ndarray:
        if self.scenario_fn is None:
            raise RuntimeError("no scenario_fn configured; use load()")
        return self.load(self.scenario_fn(seed), seed)

    def load(self, instance: ScenarioInstance, seed: Optional[int] = None) -> np.ndarray:
        self.instance = instance
        self.world = instance.world
        self.behaviors: Dict[int, Behavior] = dict(instance.behaviors)
        self.pending = list(instance.events)
        seed = instance.seed if seed is None else seed
        self.seed = 0 if seed is None else int(seed)
        self.rng = make_rng(self.seed, STREAM_DYNAMICS)
        self.done = False
        ego = self.world.ego_index
        self.initial_lane = int(self.world.lane[ego])
        self.start_s = float(self.world.s[ego])
        self.lane_changes = 0
        self.max_abs_accel = 0.0
        self.collided = False
        self.termination = None
        self._refresh_controls()
        return self.observe()

    def observe(self) -> np.ndarray:
        return rasterize(self.world, self.settings)

    @property
    def distance(self) -> float:
        return float(self.world.s[self.world.ego_index]) - self.start_s

    @property
    def ego_lane(self) -> int:
        return int(self.world.lane[self.world.ego_index])

    # -- internals ------------------------------------------------------------
    def _refresh_controls(self):
        w = self.world
        self._v0 = np.array([self.behaviors[int(v)].desired_speed for v in w.ids])
        self._idm_mask = np.array([self.behaviors[int(v)].mode == "idm" for v in w.ids], dtype=np.uint8)

    def _fire_events(self) -> Dict[int, int]:
        commands = {}
        if not self.pending:
            return commands
        w = self.world
        k = w.ego_index
        ego_front = w.s[k] + 0.5 * w.length[k]
        remaining = []
        spawned = False
        for ev in self.pending:
            if isinstance(ev, TriggeredSpawn):
                rear = ev.vehicle.s - 0.5 * ev.vehicle.length
                if rear - ego_front <= ev.trigger_gap:
                    w = w.with_vehicle(ev.vehicle)
                    self.behaviors[ev.vehicle.id] = ev.behavior
                    spawned = True
                    continue
            elif isinstance(ev, TriggeredCutIn):
                j = w.index_of(ev.vehicle_id)
                rear = w.s[j] - 0.5 * w.length[j]
                if rear - ego_front <= ev.trigger_gap:
                    commands[ev.vehicle_id] = cut_in_direction(w, ev.vehicle_id)
                    continue
            remaining.append(ev)
        self.pending = remaining
        if spawned:
            self.world = w
            self._refresh_controls()
        return commands

    def _social_lane_changes(self) -> Dict[int, int]:
        commands = {}
        w = self.world
        desired = {vid: b.desired_speed for vid, b in self.behaviors.items()}
        for k, vid in enumerate(w.ids):
            vid = int(vid)
            beh = self.behaviors[vid]
            if vid == w.ego_id or not beh.random_lc or w.lc_dir[k] != 0:
                continue
            # one draw per eligible vehicle keeps the stream aligned across episodes
            u = self.rng.random()
            pick = self.rng.random()
            if u >= self.settings.social_lc_probability:
                continue
            safe = [a for a in (Action.LEFT, Action.RIGHT)
                    if lane_change_is_safe(w, k, a, MobilParams(), self.settings.idm, desired)]
            if safe:
                commands[vid] = DIRECTION[safe[int(pick * len(safe))]]
        return commands

    # -- MDP step -----------------------------------------------------------------
    def step(self, action) -> StepOutcome:
        if self.done:
            raise RuntimeError("episode is done; call reset() or load()")
        st = self.settings
        proposed = Action(int(action))
        action = rule_mask(self.world, proposed, st.rule_gap_rear, st.rule_gap_front) \
            if self.use_rule_mask else proposed

        k = self.world.ego_index
        commands = {}
        penalised = False
        if action != Action.KEEP and self.world.lc_dir[k] == 0:
            penalised = True
            direction = DIRECTION[action]
            if self.world.road.has_lane(int(self.world.lane[k]) + direction):
                commands[self.world.ego_id] = direction
                self.lane_changes += 1
        commands.update(self._social_lane_changes())

        t0 = self.world.time
        s0 = float(self.world.s[self.world.ego_index])
        period_max_acc = 0.0
        collided = False
        termination = None
        for sub in range(st.substeps):
            cmds = self._fire_events()
            if sub == 0:
                cmds.update(commands)
            acc = idm_controls(self.world, self._v0, self._idm_mask, st.idm)
            self.world = step(self.world, st.dt, acc, cmds, st.lc_duration)
            e = self.world.ego_index
            period_max_acc = max(period_max_acc, abs(float(self.world.accel[e])))
            if any(self.world.ego_id in pair for pair in collision_pairs(self.world)):
                collided = True
                termination = "collision"
                break
            if self.world.s[e] >= self.world.road.segment_length:
                termination = "segment_end"
                break
            if self.world.time >= self.instance.horizon - 1e-9:
                termination = "timeout"
                break

        e = self.world.ego_index
        elapsed = self.world.time - t0
        period_distance = float(self.world.s[e]) - s0
        avg_speed = period_distance / elapsed if elapsed > 0 else 0.0
        r = reward(avg_speed, penalised, collided, self.behaviors[self.world.ego_id].desired_speed)
        self.max_abs_accel = max(self.max_abs_accel, period_max_acc)
        self.collided = collided
        self.done = termination is not None
        self.termination = termination
        info = StepInfo(collided, self.distance, float(self.world.speed[e]), penalised,
                        period_max_acc, float(self.world.time), self.ego_lane, proposed, action,
                        termination)
        return StepOutcome(self.observe(), r, self.done, info)
