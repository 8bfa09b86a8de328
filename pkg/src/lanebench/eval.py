"""Policy evaluation on the stochastic and deterministic test suites.

A policy is any callable ``policy(world, observation) -> action`` with a
``uses_observation`` flag. It may also have ``reset(instance)``, which is
called before each episode. MOBIL reads ground truth and is run without the
rule mask; network policies read the raster and run with it.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from lanebench.env import EnvSettings, LaneChangeEnv, StepOutcome
from lanebench.scenarios import (
    CLASS_COUNTS, DeterministicScenario, ScenarioInstance, StochasticTestConfig,
    enumerate_deterministic, gen_stochastic_test, instantiate,
)
from lanebench.sim import ms_to_kmh

CLASSES = tuple(CLASS_COUNTS)
DEFAULT_STOCHASTIC_EPISODES = 250
REPORT_FORMATS = ("plain", "csv", "markdown")


@dataclass(frozen=True)
class EpisodeRecord:
    scenario: str
    seed: Optional[int]
    collided: bool
    succeeded: bool
    duration: float
    distance: float
    mean_speed_kmh: float
    lane_changes: int
    max_abs_accel: float
    decisions: int
    termination: str
    cls: Optional[str] = None


def default_rule_mask(policy) -> bool:
    """Rule mask on for observation-driven (learned) policies, off for MOBIL."""
    return bool(getattr(policy, "uses_observation", True))


def validate_policy(policy, settings: EnvSettings = EnvSettings()):
    """Fail early when a network policy cannot consume this env's observations."""
    spec = getattr(policy, "spec", None)
    if spec is None:
        return
    shape = (settings.image_size, settings.image_size, 3)
    if tuple(spec.input_shape) != shape:
        raise ValueError(f"policy network expects input {spec.input_shape}, env produces {shape}")


def run_episode(policy, instance: ScenarioInstance, seed: Optional[int] = None,
                rule_mask_on: Optional[bool] = None, settings: EnvSettings = EnvSettings(),
                on_step: Optional[Callable[[int, np.ndarray, StepOutcome], None]] = None
                ) -> EpisodeRecord:
    """Run one episode to termination.

    ``on_step`` sees ``(decision index, observation the policy acted on, outcome)``.
    """
    if rule_mask_on is None:
        rule_mask_on = default_rule_mask(policy)
    env = LaneChangeEnv(settings=settings, rule_mask=rule_mask_on)
    obs = env.load(instance, seed)
    if hasattr(policy, "reset"):
        policy.reset(instance)
    k = 0
    while not env.done:
        action = policy(env.world, obs)
        out = env.step(action)
        if on_step is not None:
            on_step(k, obs, out)
        obs = out.observation
        k += 1
    duration = env.world.time
    distance = env.distance
    return EpisodeRecord(
        scenario=instance.label, seed=instance.seed if seed is None else seed,
        collided=env.collided, succeeded=env.ego_lane != env.initial_lane,
        duration=duration, distance=distance,
        mean_speed_kmh=ms_to_kmh(distance / duration) if duration > 0 else 0.0,
        lane_changes=env.lane_changes, max_abs_accel=env.max_abs_accel, decisions=k,
        termination=env.termination)


# -- stochastic suite -----------------------------------------------------------------

@dataclass(frozen=True)
class StochasticReport:
    """Table-1 style summary. Rates in percent; ``avg_t`` over collision-free runs only."""

    safety_rate: float
    avg_v: float
    avg_lc: float
    avg_maxacc: float
    avg_t: float
    avg_len: float
    episodes: int
    collisions: int

    ROWS = (("SafetyRate", "safety_rate", "%"), ("Avg_v", "avg_v", "km/h"), ("Avg_lc", "avg_lc", ""),
            ("Avg_maxacc", "avg_maxacc", "m/s^2"), ("Avg_t", "avg_t", "s"), ("Avg_len", "avg_len", "m"),
            ("Episodes", "episodes", ""), ("Collisions", "collisions", ""))


def stochastic_report(records: Sequence[EpisodeRecord]) -> StochasticReport:
    n = len(records)
    if n == 0:
        raise ValueError("a stochastic report needs at least one episode")
    safe = [r for r in records if not r.collided]
    return StochasticReport(
        safety_rate=100.0 * len(safe) / n,
        avg_v=float(np.mean([r.mean_speed_kmh for r in records])),
        avg_lc=float(np.mean([r.lane_changes for r in records])),
        avg_maxacc=float(np.mean([r.max_abs_accel for r in records])),
        avg_t=float(np.mean([r.duration for r in safe])) if safe else math.nan,
        avg_len=float(np.mean([r.distance for r in records])),
        episodes=n, collisions=n - len(safe))


def _map(fn, items, jobs):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


class _StochasticJob:
    def __init__(self, policy, rule_mask_on, cfg, settings):
        self.policy, self.rule_mask_on, self.cfg, self.settings = policy, rule_mask_on, cfg, settings

    def __call__(self, seed):
        return run_episode(self.policy, gen_stochastic_test(seed, self.cfg), seed, self.rule_mask_on,
                           self.settings)


def run_stochastic(policy, n_episodes: int = DEFAULT_STOCHASTIC_EPISODES, base_seed: int = 0,
                   rule_mask_on: Optional[bool] = None, cfg: StochasticTestConfig = StochasticTestConfig(),
                   settings: EnvSettings = EnvSettings(), jobs: int = 1):
    """Episodes with seeds ``base_seed .. base_seed + n - 1``; returns ``(report, records)``."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    validate_policy(policy, settings)
    if rule_mask_on is None:
        rule_mask_on = default_rule_mask(policy)
    seeds = list(range(base_seed, base_seed + n_episodes))
    records = _map(_StochasticJob(policy, rule_mask_on, cfg, settings), seeds, jobs)
    return stochastic_report(records), records


# -- deterministic suite ------------------------------------------------------------

def rate_tenths(count: int, total: int) -> int:
    """``100 * count / total`` in tenths of a percent, rounded half up, exactly."""
    if total <= 0 or not 0 <= count <= total:
        raise ValueError("need 0 <= count <= total and total > 0")
    return (2000 * count + total) // (2 * total)


def format_rate(count: int, total: int) -> str:
    t = rate_tenths(count, total)
    return f"{t // 10}.{t % 10}%"


@dataclass(frozen=True)
class ClassStats:
    total: int
    collisions: int
    failures: int
    avg_maxacc: float

    @property
    def safe(self) -> int:
        return self.total - self.collisions

    @property
    def successes(self) -> int:
        return self.total - self.failures


@dataclass(frozen=True)
class DeterministicReport:
    """Per-class counts (Table-2 shape); aggregates are derived from them."""

    per_class: Dict[str, ClassStats]

    @property
    def total(self) -> int:
        return sum(c.total for c in self.per_class.values())

    @property
    def collisions(self) -> int:
        return sum(c.collisions for c in self.per_class.values())

    @property
    def failures(self) -> int:
        return sum(c.failures for c in self.per_class.values())

    @property
    def safe_count(self) -> int:
        return self.total - self.collisions

    @property
    def success_count(self) -> int:
        return self.total - self.failures

    @property
    def safety_rate(self) -> float:
        return 100.0 * self.safe_count / self.total

    @property
    def success_rate(self) -> float:
        return 100.0 * self.success_count / self.total

    @property
    def avg_maxacc(self) -> float:
        return sum(c.avg_maxacc * c.total for c in self.per_class.values()) / self.total

    @classmethod
    def from_counts(cls, totals, collisions, failures, maxacc=None) -> "DeterministicReport":
        """Build a report from per-class count lists ordered like :data:`CLASSES`."""
        maxacc = maxacc or [0.0] * len(CLASSES)
        return cls({c: ClassStats(int(t), int(k), int(f), float(a))
                    for c, t, k, f, a in zip(CLASSES, totals, collisions, failures, maxacc)})


def failed(record: EpisodeRecord) -> bool:
    """Ended in the initial lane, whether or not it collided on the way."""
    return not record.succeeded


def deterministic_report(records: Sequence[EpisodeRecord]) -> DeterministicReport:
    acc = {c: [0, 0, 0, 0.0] for c in CLASSES}
    for r in records:
        a = acc[r.cls]
        a[0] += 1
        a[1] += int(r.collided)
        a[2] += int(failed(r))
        a[3] += r.max_abs_accel
    return DeterministicReport({c: ClassStats(v[0], v[1], v[2], v[3] / v[0])
                                for c, v in acc.items() if v[0] > 0})


class _DeterministicJob:
    def __init__(self, policy, rule_mask_on, settings):
        self.policy, self.rule_mask_on, self.settings = policy, rule_mask_on, settings

    def __call__(self, scn: DeterministicScenario):
        rec = run_episode(self.policy, instantiate(scn), scn.id, self.rule_mask_on, self.settings)
        return EpisodeRecord(**{**rec.__dict__, "cls": scn.cls})


def run_deterministic(policy, scenarios: Optional[Sequence[DeterministicScenario]] = None,
                      rule_mask_on: Optional[bool] = None, settings: EnvSettings = EnvSettings(),
                      jobs: int = 1):
    """One episode per scenario; returns ``(report, records)`` in scenario order."""
    validate_policy(policy, settings)
    if scenarios is None:
        scenarios = enumerate_deterministic()
    if rule_mask_on is None:
        rule_mask_on = default_rule_mask(policy)
    records = _map(_DeterministicJob(policy, rule_mask_on, settings), list(scenarios), jobs)
    return deterministic_report(records), records


# -- report formatting ----------------------------------------------------------------

def _table(rows: List[List[str]], fmt: str) -> str:
    if fmt == "csv":
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(rows)
        return buf.getvalue()
    if fmt == "markdown":
        out = ["| " + " | ".join(rows[0]) + " |", "|" + "|".join("---" for _ in rows[0]) + "|"]
        out += ["| " + " | ".join(r) + " |" for r in rows[1:]]
        return "\n".join(out) + "\n"
    if fmt == "plain":
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"
    raise ValueError(f"unknown report format {fmt!r}; expected one of {REPORT_FORMATS}")


def _num(x: float, fmt: str, digits: int = 2) -> str:
    # csv keeps full precision so parsing it back is lossless
    if fmt == "csv":
        return repr(float(x))
    return "n/a" if math.isnan(x) else f"{x:.{digits}f}"


def _stochastic_rows(rep: StochasticReport, fmt: str, agent: str):
    rows = [["Metric", agent]]
    for label, attr, unit in StochasticReport.ROWS:
        name = f"{label} ({unit})" if unit and fmt != "csv" else label
        value = getattr(rep, attr)
        if attr in ("episodes", "collisions"):
            cell = str(value)
        elif attr == "safety_rate" and fmt != "csv":
            cell = format_rate(rep.episodes - rep.collisions, rep.episodes)
        else:
            cell = _num(value, fmt)
        rows.append([name, cell])
    return rows


def _deterministic_rows(rep: DeterministicReport, fmt: str, agent: str):
    classes = list(rep.per_class)
    per = [["Logical scenario class"] + [f"({c.lower()})" for c in classes],
           ["Total scenario count"] + [str(rep.per_class[c].total) for c in classes],
           ["Collision count"] + [str(rep.per_class[c].collisions) for c in classes],
           ["Failure count"] + [str(rep.per_class[c].failures) for c in classes],
           ["Average maximum acceleration"] + [_num(rep.per_class[c].avg_maxacc, fmt) for c in classes]]
    if fmt == "csv":
        agg = [["Metric", agent], ["SafetyRate", _num(rep.safety_rate, fmt)],
               ["SuccessRate", _num(rep.success_rate, fmt)], ["Avg_maxacc", _num(rep.avg_maxacc, fmt)],
               ["TotalCount", str(rep.total)], ["SafeCount", str(rep.safe_count)],
               ["SuccessCount", str(rep.success_count)]]
    else:
        agg = [["Metric", agent], ["SafetyRate", format_rate(rep.safe_count, rep.total)],
               ["SuccessRate", format_rate(rep.success_count, rep.total)],
               ["Avg_maxacc", _num(rep.avg_maxacc, fmt)]]
    return per, agg


def emit_report(report, fmt: str = "plain", agent: str = "policy") -> str:
    """Render a report as a plain table, CSV or markdown.

    Deterministic reports give the per-class table, a blank line, then the
    aggregate table. CSV output keeps full float precision.
    """
    if fmt not in REPORT_FORMATS:
        raise ValueError(f"unknown report format {fmt!r}; expected one of {REPORT_FORMATS}")
    if isinstance(report, StochasticReport):
        return _table(_stochastic_rows(report, fmt, agent), fmt)
    if isinstance(report, DeterministicReport):
        per, agg = _deterministic_rows(report, fmt, agent)
        return _table(per, fmt) + "\n" + _table(agg, fmt)
    raise TypeError(f"not a report: {type(report).__name__}")


def parse_csv_report(text: str):
    """Inverse of ``emit_report(report, "csv")``."""
    blocks = [b for b in text.strip().split("\n\n") if b.strip()]
    tables = [list(csv.reader(io.StringIO(b))) for b in blocks]
    if len(tables) == 1:
        vals = {row[0]: row[1] for row in tables[0][1:]}
        kw = {}
        for label, attr, _ in StochasticReport.ROWS:
            kw[attr] = int(vals[label]) if attr in ("episodes", "collisions") else float(vals[label])
        return StochasticReport(**kw)
    per = tables[0]
    classes = [h.strip("()").upper() for h in per[0][1:]]
    rows = {r[0]: r[1:] for r in per[1:]}
    stats = {}
    for i, c in enumerate(classes):
        total = int(rows["Total scenario count"][i])
        stats[c] = ClassStats(total, int(rows["Collision count"][i]), int(rows["Failure count"][i]),
                              float(rows["Average maximum acceleration"][i]))
    return DeterministicReport(stats)
