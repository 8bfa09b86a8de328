"""Scenario construction: random training / stochastic-test worlds and the
fixed deterministic test suite.

Randomness always comes from ``numpy.random.PCG64`` seeded through
``numpy.random.SeedSequence((seed, stream))``; stream :data:`STREAM_SCENARIO`
builds the initial world and stream :data:`STREAM_DYNAMICS` drives social
lane changes during the episode. The seed is stored on every
:class:`ScenarioInstance`.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from importlib import resources
from typing import Dict, List, Optional, Tuple

import numpy as np

from lanebench.sim import (
    LEFT, RIGHT, VEHICLE_LENGTH, RoadModel, VehicleState, WorldState,
    collision_pairs, kmh_to_ms,
)

STREAM_SCENARIO = 0
STREAM_DYNAMICS = 1

EGO_ID = 0
EGO_START = 30.0
DETERMINISTIC_SEGMENT = 450.0
DETERMINISTIC_HORIZON = 60.0
RANDOM_HORIZON = 90.0

SCENARIO_FILE_VERSION = 1
CLASS_COUNTS = {"A": 10, "B": 30, "C": 231, "D": 126, "E": 25}


def make_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((int(seed), stream))))


@dataclass(frozen=True)
class Behavior:
    """How a vehicle is driven: ``"idm"`` (car following) or ``"constant"``."""

    mode: str = "idm"
    desired_speed: float = kmh_to_ms(60.0)
    random_lc: bool = False


@dataclass(frozen=True)
class TriggeredSpawn:
    """Vehicle inserted once the ego's bumper gap to it drops to ``trigger_gap``."""

    vehicle: VehicleState
    behavior: Behavior
    trigger_gap: float


@dataclass(frozen=True)
class TriggeredCutIn:
    """Vehicle ``vehicle_id`` starts a lane change into the ego lane once the
    ego's bumper gap to it drops to ``trigger_gap``."""

    vehicle_id: int
    trigger_gap: float


@dataclass(frozen=True)
class ScenarioInstance:
    world: WorldState
    behaviors: Dict[int, Behavior]
    events: Tuple = ()
    horizon: float = RANDOM_HORIZON
    seed: Optional[int] = None
    label: str = ""

    @property
    def v_target(self) -> float:
        return self.behaviors[self.world.ego_id].desired_speed


@dataclass(frozen=True)
class TrainingConfig:
    social_count_range: Tuple[int, int] = (6, 12)
    spawn_window: Tuple[float, float] = (-30.0, 180.0)
    ego_target_speed_kmh: float = 60.0
    social_speed_range_kmh: Tuple[float, float] = (20.0, 40.0)
    follow_gap_range: Tuple[float, float] = (0.0, 15.0)
    social_random_lc: bool = True
    lane_count: int = 3
    segment_length: float = 450.0
    horizon: float = RANDOM_HORIZON

    def __post_init__(self):
        lo, hi = self.social_count_range
        if not 0 <= lo <= hi:
            raise ValueError("social_count_range must satisfy 0 <= lo <= hi")
        if self.spawn_window[0] >= self.spawn_window[1]:
            raise ValueError("spawn_window must be increasing")
        if self.follow_gap_range[0] < 0 or self.follow_gap_range[0] > self.follow_gap_range[1]:
            raise ValueError("follow_gap_range must be a non-negative interval")


@dataclass(frozen=True)
class StochasticTestConfig(TrainingConfig):
    social_count_range: Tuple[int, int] = (4, 9)
    social_random_lc: bool = False


def _place_chain(rng, k, window, gap_range, ego_lane_here):
    """Centre positions (relative to the ego) of a k-vehicle chain, front first."""
    win_lo, win_hi = window
    L = VEHICLE_LENGTH
    for _ in range(1000):
        gaps = rng.uniform(gap_range[0], gap_range[1], size=max(k - 1, 0))
        offsets = np.concatenate([[0.0], np.cumsum(L + gaps)])
        span = offsets[-1]
        if span > win_hi - win_lo:
            continue
        front = rng.uniform(win_lo + span, win_hi)
        centres = front - offsets
        if ego_lane_here and np.any(np.abs(centres) < L):
            continue
        return centres, gaps
    # dense fallback: tightest chain, entirely ahead of the ego
    gaps = np.full(max(k - 1, 0), gap_range[0])
    offsets = np.concatenate([[0.0], np.cumsum(L + gaps)])
    return win_hi - offsets, gaps


def _gen_random(seed: int, cfg: TrainingConfig, label: str) -> ScenarioInstance:
    rng = make_rng(seed, STREAM_SCENARIO)
    road = RoadModel(cfg.lane_count, segment_length=cfg.segment_length)
    v_target = kmh_to_ms(cfg.ego_target_speed_kmh)
    ego_lane = int(rng.integers(cfg.lane_count))
    n = int(rng.integers(cfg.social_count_range[0], cfg.social_count_range[1] + 1))
    lanes = rng.integers(cfg.lane_count, size=n)
    desired = kmh_to_ms(rng.uniform(*cfg.social_speed_range_kmh, size=n))

    # (relative position, lane, desired speed, id)
    cars = [(0.0, ego_lane, v_target, EGO_ID)]
    vid = 1
    for lane in range(cfg.lane_count):
        members = np.flatnonzero(lanes == lane)
        if len(members) == 0:
            continue
        centres, _ = _place_chain(rng, len(members), cfg.spawn_window, cfg.follow_gap_range,
                                  lane == ego_lane)
        for c, m in zip(centres, members):
            cars.append((float(c), lane, float(desired[m]), vid))
            vid += 1

    behaviors = {EGO_ID: Behavior("idm", v_target, False)}
    vehicles = []
    for lane in range(cfg.lane_count):
        in_lane = sorted((c for c in cars if c[1] == lane), key=lambda c: -c[0])
        cap = np.inf
        for rel, _, v0, cid in in_lane:
            speed = min(v0, cap)
            cap = speed
            vehicles.append(VehicleState(id=cid, s=EGO_START + rel, y=road.centerline(lane),
                                         speed=speed, lane_index=lane))
            if cid != EGO_ID:
                behaviors[cid] = Behavior("idm", v0, cfg.social_random_lc)
    vehicles.sort(key=lambda v: v.id)
    world = WorldState.from_vehicles(road, vehicles, EGO_ID)
    return ScenarioInstance(world, behaviors, (), cfg.horizon, seed, label)


def gen_training(seed: int, cfg: TrainingConfig = TrainingConfig()) -> ScenarioInstance:
    """Random training world: ego at a lane centre, 6-12 social vehicles in
    per-lane chains around it, social desired speeds 20-40 km/h."""
    return _gen_random(seed, cfg, f"training/{seed}")


def gen_stochastic_test(seed: int, cfg: StochasticTestConfig = StochasticTestConfig()) -> ScenarioInstance:
    """Stochastic test world: as training but 4-9 lane-keeping social vehicles."""
    return _gen_random(seed, cfg, f"stochastic/{seed}")


# --- deterministic suite -------------------------------------------------

@dataclass(frozen=True)
class Placement:
    role: str
    lane: int
    offset: float
    speed_kmh: float
    behavior: str
    trigger_distance: Optional[float] = None


@dataclass(frozen=True)
class DeterministicScenario:
    id: int
    cls: str
    lane_count: int
    tv_lane: int
    tv_target_speed_kmh: float
    params: Dict[str, float]
    placements: Tuple[Placement, ...]
    allowed_directions: Tuple[str, ...]

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "class": self.cls,
            "lane_count": self.lane_count,
            "tv_lane": self.tv_lane,
            "tv_target_speed_kmh": self.tv_target_speed_kmh,
            "params": dict(self.params),
            "placements": [asdict(p) for p in self.placements],
            "allowed_directions": list(self.allowed_directions),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "DeterministicScenario":
        return cls(
            id=rec["id"], cls=rec["class"], lane_count=rec["lane_count"], tv_lane=rec["tv_lane"],
            tv_target_speed_kmh=rec["tv_target_speed_kmh"], params=dict(rec["params"]),
            placements=tuple(Placement(**p) for p in rec["placements"]),
            allowed_directions=tuple(rec["allowed_directions"]),
        )


def _directions(lane_count, tv_lane):
    out = []
    if tv_lane + 1 < lane_count:
        out.append("left")
    if tv_lane - 1 >= 0:
        out.append("right")
    return tuple(out)


def _grid():
    """Yield (class, lane_count, tv_lane, params, placements) in suite order."""
    L = VEHICLE_LENGTH
    # A: two-lane overtake of a slow or stopped leader
    for v1 in (0, 10):
        for D in (20, 30, 40, 50, 60):
            yield "A", 2, 0, {"V1": v1, "D": D}, (
                Placement("GV1", 0, D, v1, "stationary" if v1 == 0 else "constant-speed"),)
    # B: three-lane overtake, both adjacent lanes empty
    for v1 in (10, 20, 30):
        for D in (15, 20, 25, 30, 35, 40, 45, 50, 55, 60):
            yield "B", 3, 1, {"V1": v1, "D": D}, (Placement("GV1", 1, D, v1, "constant-speed"),)
    # C: slow leader ahead, a vehicle in the left lane, right lane empty
    for v1 in (20, 30, 40):
        for D in (15, 20, 25, 30, 35, 40, 50):
            for d in (-25, -20, -15, -10, -5, 0, 5, 10, 15, 20, 25):
                yield "C", 3, 1, {"V1": v1, "D": D, "d": d, "V2": 30}, (
                    Placement("GV1", 1, D, v1, "constant-speed"),
                    Placement("GV2", 2, d, 30, "constant-speed"))
    # D: left-lane vehicle cuts in ahead of the TV; it starts d metres
    # beyond its trigger gap so every cut-in fires at exactly that gap
    for v1 in (20, 30, 40):
        for d in (5, 10, 15, 20, 25, 30, 35):
            for trig in (10, 15, 20, 25, 30, 35):
                yield "D", 3, 1, {"V1": v1, "d": d, "trigger_distance": trig}, (
                    Placement("GV1", 2, L + trig + d, v1, "triggered-cut-in", trig),)
    # E: stopped vehicle revealed when the TV's gap to it reaches the trigger
    for D in (30, 40, 50, 60, 70):
        for trig in (20, 30, 40, 50, 60):
            yield "E", 2, 0, {"D": D, "trigger_distance": trig}, (
                Placement("GV1", 0, D, 0, "triggered-spawn", trig),)


def enumerate_deterministic() -> List[DeterministicScenario]:
    """The 422-scenario deterministic suite in its fixed order (ids 0..421)."""
    out = []
    for i, (cls, lanes, tv_lane, params, placements) in enumerate(_grid()):
        out.append(DeterministicScenario(i, cls, lanes, tv_lane, 60.0, params, placements,
                                         _directions(lanes, tv_lane)))
    return out


def dump_scenarios(scenarios: List[DeterministicScenario]) -> str:
    """Serialise the suite: a header line, then one JSON record per scenario."""
    header = {"format": "lanebench-deterministic-scenarios", "version": SCENARIO_FILE_VERSION,
              "count": len(scenarios)}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(s.to_record(), sort_keys=True) for s in scenarios]
    return "\n".join(lines) + "\n"


def load_scenarios(text: str) -> List[DeterministicScenario]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = json.loads(lines[0])
    if header.get("format") != "lanebench-deterministic-scenarios":
        raise ValueError("not a lanebench scenario file")
    if header.get("version") != SCENARIO_FILE_VERSION:
        raise ValueError(f"unsupported scenario file version {header.get('version')!r}")
    out = [DeterministicScenario.from_record(json.loads(ln)) for ln in lines[1:]]
    if len(out) != header["count"]:
        raise ValueError("scenario count does not match header")
    return out


def shipped_scenario_text() -> str:
    return resources.files("lanebench").joinpath("data/deterministic_scenarios.jsonl").read_text()


def class_counts(scenarios) -> Dict[str, int]:
    counts = {c: 0 for c in CLASS_COUNTS}
    for s in scenarios:
        counts[s.cls] += 1
    return counts


def instantiate(scn: DeterministicScenario, segment_length: float = DETERMINISTIC_SEGMENT,
                horizon: float = DETERMINISTIC_HORIZON) -> ScenarioInstance:
    """Build the initial world for one deterministic scenario.

    Offsets are centre-to-centre distances ahead of the TV. Triggered spawns
    whose gap is already inside the trigger at t = 0 are placed immediately.
    """
    road = RoadModel(scn.lane_count, segment_length=segment_length)
    v_t = kmh_to_ms(scn.tv_target_speed_kmh)
    tv = VehicleState(id=EGO_ID, s=EGO_START, y=road.centerline(scn.tv_lane), speed=v_t,
                      lane_index=scn.tv_lane)
    vehicles = [tv]
    behaviors = {EGO_ID: Behavior("idm", v_t, False)}
    events = []
    half = 0.5 * VEHICLE_LENGTH
    for k, p in enumerate(scn.placements, start=1):
        if not road.has_lane(p.lane):
            raise ValueError(f"scenario {scn.id}: lane {p.lane} not on a {scn.lane_count}-lane road")
        s = EGO_START + p.offset
        if s - half < 0 or s + half > segment_length:
            raise ValueError(f"scenario {scn.id}: {p.role} at offset {p.offset} m leaves the segment")
        v = kmh_to_ms(p.speed_kmh)
        veh = VehicleState(id=k, s=s, y=road.centerline(p.lane), speed=v, lane_index=p.lane)
        beh = Behavior("constant", v, False)
        if p.behavior == "triggered-spawn":
            if p.offset - VEHICLE_LENGTH > p.trigger_distance:
                events.append(TriggeredSpawn(veh, beh, float(p.trigger_distance)))
                continue
        elif p.behavior == "triggered-cut-in":
            if abs(p.lane - scn.tv_lane) != 1:
                raise ValueError(f"scenario {scn.id}: cut-in must start in an adjacent lane")
            events.append(TriggeredCutIn(k, float(p.trigger_distance)))
        elif p.behavior not in ("constant-speed", "stationary"):
            raise ValueError(f"scenario {scn.id}: unknown behaviour {p.behavior!r}")
        vehicles.append(veh)
        behaviors[k] = beh
    world = WorldState.from_vehicles(road, vehicles, EGO_ID)
    if collision_pairs(world):
        raise ValueError(f"scenario {scn.id}: overlapping initial placement")
    return ScenarioInstance(world, behaviors, tuple(events), horizon, None,
                            f"deterministic/{scn.id}/{scn.cls}")


def cut_in_direction(world: WorldState, vid: int) -> int:
    k = world.index_of(vid)
    return LEFT if world.lane[world.ego_index] > world.lane[k] else RIGHT
