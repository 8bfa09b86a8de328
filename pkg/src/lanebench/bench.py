"""Throughput measurements for the simulation kernels.

A *substep* is one fixed ``dt`` advance of the whole world: IDM control for
every vehicle, integration, and the collision sweep, exactly as the env runs
it between decisions.
"""
from __future__ import annotations

import time
from typing import Dict

import numpy as np

from lanebench import kernels, sim
from lanebench.scenarios import gen_training, TrainingConfig


def make_world(n_vehicles: int = 13, seed: int = 0) -> sim.WorldState:
    """A three-lane world with ``n_vehicles`` (ego included), speeds 20-60 km/h."""
    rng = np.random.default_rng(seed)
    road = sim.RoadModel(3, segment_length=1e6)
    vehicles = []
    for i in range(n_vehicles):
        lane = i % 3
        s = 30.0 + 12.0 * (i // 3) + rng.uniform(0, 2)
        vehicles.append(sim.VehicleState(id=i, s=s, y=road.centerline(lane),
                                         speed=sim.kmh_to_ms(rng.uniform(20, 60)), lane_index=lane))
    return sim.WorldState.from_vehicles(road, vehicles, 0)


def substeps_per_second_sim(world: sim.WorldState, n_steps: int = 5000, dt: float = sim.SIM_DT) -> float:
    """Substeps per second through the public ``lanebench.sim`` API (active backend)."""
    v0 = np.full(len(world), sim.kmh_to_ms(60.0))
    mask = np.ones(len(world), dtype=np.uint8)
    idm = sim.IdmParams()
    t = time.perf_counter()
    for _ in range(n_steps):
        acc = sim.idm_controls(world, v0, mask, idm)
        world = sim.step(world, dt, acc)
        sim.collision_pairs(world)
    return n_steps / (time.perf_counter() - t)


def substeps_per_second_kernels(backend: str, world: sim.WorldState, n_steps: int = 5000,
                                dt: float = sim.SIM_DT) -> float:
    """Substeps per second calling one backend's kernels directly on arrays."""
    k = kernels.load_backend(backend)
    p = sim.IdmParams()
    s, y, v = world.s.copy(), world.y.copy(), world.speed.copy()
    lane, lc_dir, prog = world.lane.copy(), world.lc_dir.copy(), world.lc_progress.copy()
    length, width = world.length, world.width
    v0 = np.full(len(world), sim.kmh_to_ms(60.0))
    mask = np.ones(len(world), dtype=np.uint8)
    t = time.perf_counter()
    for _ in range(n_steps):
        acc = k.idm_controls(s, v, lane, lc_dir, prog, length, v0, mask, p.a_max, p.b, p.s0, p.T,
                             p.delta, p.b_hard)
        s, y, v, _, lane, lc_dir, prog = k.integrate(s, y, v, acc, lane, lc_dir, prog, dt,
                                                     sim.LANE_CHANGE_DURATION, world.road.lane_width)
        k.collision_pairs(s, y, length, width)
    return n_steps / (time.perf_counter() - t)


def raster_per_second(backend: str, n_frames: int = 2000) -> float:
    k = kernels.load_backend(backend)
    w = gen_training(0, TrainingConfig()).world
    t = time.perf_counter()
    for _ in range(n_frames):
        k.rasterize(w.s, w.y, w.length, w.width, w.ego_index, w.road.lane_count, w.road.lane_width,
                    25.0, 50.0, 64)
    return n_frames / (time.perf_counter() - t)


def run_all(n_vehicles: int = 13, n_steps: int = 5000) -> Dict[str, float]:
    world = make_world(n_vehicles)
    results = {f"sim_api[{kernels.BACKEND}]": substeps_per_second_sim(world, n_steps)}
    for name in kernels.available_backends():
        results[f"kernels[{name}]"] = substeps_per_second_kernels(name, world, n_steps)
        results[f"raster[{name}]"] = raster_per_second(name, n_steps // 5)
    return results
