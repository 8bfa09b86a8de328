"""Fixed-step kinematic simulation of a straight multi-lane highway.

Lanes are indexed from the right road edge (lane 0) to the left, and the
lateral coordinate ``y`` grows to the left with ``y = 0`` on the right road
edge. A lane change to the *left* therefore has direction ``+1``.

All state is SI (m, m/s, m/s^2). Conversions to km/h happen only at the
configuration and report boundaries via :func:`kmh_to_ms` / :func:`ms_to_kmh`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

from lanebench import kernels

LANE_WIDTH = 3.5
VEHICLE_LENGTH = 4.5
VEHICLE_WIDTH = 2.0
SIM_DT = 0.1
LANE_CHANGE_DURATION = 2.0

LEFT = 1
RIGHT = -1


def kmh_to_ms(v):
    return v / 3.6


def ms_to_kmh(v):
    return v * 3.6


@dataclass(frozen=True)
class RoadModel:
    lane_count: int = 3
    lane_width: float = LANE_WIDTH
    segment_length: float = 450.0

    def __post_init__(self):
        if self.lane_count not in (2, 3):
            raise ValueError(f"lane_count must be 2 or 3, got {self.lane_count}")
        if self.lane_width != LANE_WIDTH:
            raise ValueError(f"lane_width is fixed at {LANE_WIDTH} m")
        if not self.segment_length > 0:
            raise ValueError("segment_length must be positive")

    @property
    def sidewalk_width(self) -> float:
        return self.lane_width

    def centerline(self, lane: int) -> float:
        return (lane + 0.5) * self.lane_width

    def has_lane(self, lane: int) -> bool:
        return 0 <= lane < self.lane_count


@dataclass(frozen=True)
class LaneChange:
    direction: int
    progress: float


@dataclass(frozen=True)
class VehicleState:
    id: int
    s: float
    y: float
    speed: float
    accel: float = 0.0
    lane_index: int = 0
    lc_state: Optional[LaneChange] = None
    length: float = VEHICLE_LENGTH
    width: float = VEHICLE_WIDTH

    @property
    def target_lane(self) -> int:
        if self.lc_state is None:
            return self.lane_index
        return self.lane_index + self.lc_state.direction


@dataclass(frozen=True)
class IdmParams:
    """Intelligent Driver Model parameters.

    ``b_hard`` bounds the braking the model may command; it is the clamp
    applied to every IDM output, not a parameter of the IDM law itself.
    """

    v0: float = kmh_to_ms(60.0)
    a_max: float = 1.5
    b: float = 2.0
    s0: float = 2.0
    T: float = 1.0
    delta: float = 4.0
    b_hard: float = 9.0

    def __post_init__(self):
        for name in ("v0", "a_max", "b", "s0", "T", "delta", "b_hard"):
            if not getattr(self, name) > 0:
                raise ValueError(f"IdmParams.{name} must be strictly positive")
        if self.delta < 1:
            raise ValueError("IdmParams.delta must be >= 1")


def idm_acceleration(ego_speed: float, gap: float, lead_speed: Optional[float],
                     p: IdmParams) -> float:
    """IDM acceleration, clamped to ``[-p.b_hard, p.a_max]``.

    ``gap`` is the bumper-to-bumper distance to the leader; pass ``math.inf``
    (and ``lead_speed=None``) on a free road. The dynamic part of the desired
    gap is floored at zero so a faster leader never produces a negative gap.
    """
    if ego_speed < 0:
        raise ValueError("ego_speed must be non-negative")
    free = 1.0 - (ego_speed / p.v0) ** p.delta
    if lead_speed is None or math.isinf(gap):
        a = p.a_max * free
    else:
        if gap <= 0:
            raise ValueError(f"non-positive gap {gap!r} with a leader (already collided)")
        dv = ego_speed - lead_speed
        s_star = p.s0 + max(0.0, ego_speed * p.T + ego_speed * dv / (2.0 * math.sqrt(p.a_max * p.b)))
        a = p.a_max * (free - (s_star / gap) ** 2)
    return min(max(a, -p.b_hard), p.a_max)


def _frozen(a: np.ndarray) -> np.ndarray:
    if a.flags.writeable or not a.flags.c_contiguous:
        a = np.array(a, order="C")
        a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class WorldState:
    """Road plus every vehicle's kinematic state, stored column-wise.

    Row ``k`` of every array describes the same vehicle. During a lane change
    ``lane`` keeps the source lane and ``lc_dir`` / ``lc_progress`` describe
    the manoeuvre; ``lc_dir == 0`` means no lane change.
    """

    time: float
    road: RoadModel
    ids: np.ndarray
    s: np.ndarray
    y: np.ndarray
    speed: np.ndarray
    accel: np.ndarray
    lane: np.ndarray
    lc_dir: np.ndarray
    lc_progress: np.ndarray
    length: np.ndarray
    width: np.ndarray
    ego_id: int
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for name in ("s", "y", "speed", "accel", "lc_progress", "length", "width"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), dtype=np.float64)))
        for name in ("ids", "lane", "lc_dir"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), dtype=np.int64)))
        index = {int(v): k for k, v in enumerate(self.ids)}
        if len(index) != len(self.ids):
            raise ValueError("vehicle ids must be unique")
        if self.ego_id not in index:
            raise ValueError(f"ego id {self.ego_id} not present")
        object.__setattr__(self, "_index", index)

    @classmethod
    def from_vehicles(cls, road: RoadModel, vehicles: Sequence[VehicleState], ego_id: int,
                      time: float = 0.0) -> "WorldState":
        def col(f):
            return [f(v) for v in vehicles]

        return cls(
            time=time, road=road,
            ids=col(lambda v: v.id), s=col(lambda v: v.s), y=col(lambda v: v.y),
            speed=col(lambda v: v.speed), accel=col(lambda v: v.accel),
            lane=col(lambda v: v.lane_index),
            lc_dir=col(lambda v: 0 if v.lc_state is None else v.lc_state.direction),
            lc_progress=col(lambda v: 0.0 if v.lc_state is None else v.lc_state.progress),
            length=col(lambda v: v.length), width=col(lambda v: v.width),
            ego_id=ego_id,
        )

    def __len__(self):
        return len(self.ids)

    def index_of(self, vid: int) -> int:
        return self._index[vid]

    @property
    def ego_index(self) -> int:
        return self._index[self.ego_id]

    def vehicle(self, vid: int) -> VehicleState:
        k = self._index[vid]
        lc = None
        if self.lc_dir[k] != 0:
            lc = LaneChange(int(self.lc_dir[k]), float(self.lc_progress[k]))
        return VehicleState(
            id=int(self.ids[k]), s=float(self.s[k]), y=float(self.y[k]),
            speed=float(self.speed[k]), accel=float(self.accel[k]),
            lane_index=int(self.lane[k]), lc_state=lc,
            length=float(self.length[k]), width=float(self.width[k]),
        )

    @property
    def vehicles(self) -> Tuple[VehicleState, ...]:
        return tuple(self.vehicle(int(v)) for v in self.ids)

    @property
    def ego(self) -> VehicleState:
        return self.vehicle(self.ego_id)

    def with_vehicle(self, v: VehicleState) -> "WorldState":
        """Return a copy with ``v`` appended (used for triggered spawns)."""
        return WorldState.from_vehicles(self.road, self.vehicles + (v,), self.ego_id, self.time)

    def state_bytes(self) -> bytes:
        """Canonical byte image of the state, for hashing and equality checks."""
        parts = [np.float64(self.time).tobytes()]
        for name in ("ids", "s", "y", "speed", "accel", "lane", "lc_dir", "lc_progress",
                     "length", "width"):
            parts.append(getattr(self, name).tobytes())
        return b"".join(parts)

    def __eq__(self, other):
        if not isinstance(other, WorldState):
            return NotImplemented
        return (self.road == other.road and self.ego_id == other.ego_id
                and self.state_bytes() == other.state_bytes())

    __hash__ = None


def step(world: WorldState, dt: float, accel, lane_changes: Optional[Mapping[int, int]] = None,
         lc_duration: float = LANE_CHANGE_DURATION) -> WorldState:
    """Advance ``world`` by ``dt`` seconds and return the successor state.

    ``accel`` holds one longitudinal command per vehicle in world order.
    ``lane_changes`` maps vehicle id to a direction (+1 left, -1 right); a
    command for a vehicle already changing lanes, or towards a lane that does
    not exist, is ignored.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    accel = np.asarray(accel, dtype=np.float64)
    if accel.shape != world.s.shape:
        raise ValueError(f"expected {len(world)} accelerations, got shape {accel.shape}")
    lc_dir = world.lc_dir
    lc_progress = world.lc_progress
    if lane_changes:
        lc_dir = lc_dir.copy()
        lc_progress = lc_progress.copy()
        for vid, direction in lane_changes.items():
            k = world.index_of(vid)
            if direction not in (LEFT, RIGHT):
                raise ValueError(f"lane change direction must be +1 or -1, got {direction!r}")
            if lc_dir[k] != 0 or not world.road.has_lane(int(world.lane[k]) + direction):
                continue
            lc_dir[k] = direction
            lc_progress[k] = 0.0
    s, y, speed, acc, lane, lc_dir, lc_progress = kernels.integrate(
        world.s, world.y, world.speed, accel, world.lane, lc_dir, lc_progress,
        dt, lc_duration, world.road.lane_width)
    return replace(world, time=world.time + dt, s=s, y=y, speed=speed, accel=acc, lane=lane,
                   lc_dir=lc_dir, lc_progress=lc_progress, _index=None)


def idm_controls(world: WorldState, v0, idm_mask, p: IdmParams) -> np.ndarray:
    """IDM acceleration for every vehicle flagged in ``idm_mask`` (zero elsewhere).

    A follower looks for its leader in its member lane (the target lane once
    its own change is half done). A vehicle changing lanes is seen as a
    leader from both its source and target lane.
    """
    return kernels.idm_controls(world.s, world.speed, world.lane, world.lc_dir, world.lc_progress,
                                world.length,
                                np.asarray(v0, dtype=np.float64),
                                np.asarray(idm_mask, dtype=np.uint8),
                                p.a_max, p.b, p.s0, p.T, p.delta, p.b_hard)


def collision_pairs(world: WorldState) -> set:
    """Id pairs whose footprints overlap with positive area; each pair as ``(lo, hi)``."""
    idx = kernels.collision_pairs(world.s, world.y, world.length, world.width)
    ids = world.ids
    return {(min(int(ids[i]), int(ids[j])), max(int(ids[i]), int(ids[j]))) for i, j in idx}


def member_lane(world: WorldState, k: int) -> int:
    """Single lane a vehicle is counted in: the target lane from half-way through a change."""
    if world.lc_dir[k] != 0 and world.lc_progress[k] >= 0.5:
        return int(world.lane[k] + world.lc_dir[k])
    return int(world.lane[k])


def leader_of(world: WorldState, vid: int, lane: int) -> Optional[Tuple[float, float]]:
    """Nearest vehicle ahead of ``vid`` in ``lane`` as ``(gap, lead_speed)``, or None."""
    if not world.road.has_lane(lane):
        raise ValueError(f"lane {lane} is not on the road")
    k = world.index_of(vid)
    best = None
    for j in range(len(world)):
        if j == k or world.s[j] <= world.s[k] or member_lane(world, j) != lane:
            continue
        if best is None or world.s[j] < world.s[best]:
            best = j
    if best is None:
        return None
    gap = float(world.s[best] - world.s[k] - 0.5 * (world.length[best] + world.length[k]))
    return gap, float(world.speed[best])


def occupied_lanes(world: WorldState, k: int) -> Tuple[int, ...]:
    lane = int(world.lane[k])
    d = int(world.lc_dir[k])
    return (lane,) if d == 0 else (lane, lane + d)


def lane_neighbors(world: WorldState, k: int, lane: int,
                   exclude: Iterable[int] = ()) -> Tuple[Optional[int], Optional[int]]:
    """Indices of the nearest vehicles ahead (centre at or ahead) and behind
    vehicle ``k`` among those occupying ``lane``."""
    skip = set(exclude) | {k}
    lead = follow = None
    sk = world.s[k]
    for j in range(len(world)):
        if j in skip or lane not in occupied_lanes(world, j):
            continue
        if world.s[j] >= sk:
            if lead is None or world.s[j] < world.s[lead]:
                lead = j
        elif follow is None or world.s[j] > world.s[follow]:
            follow = j
    return lead, follow


def bumper_gap(world: WorldState, follower: int, leader: int) -> float:
    return float(world.s[leader] - world.s[follower]
                 - 0.5 * (world.length[leader] + world.length[follower]))
