"""``lanebench`` command line: enumerate, train, eval, replay.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 corrupt or
mismatched checkpoint, 5 numerical abort during training.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import os
import sys
from typing import List, Optional

import numpy as np
from PIL import Image

from lanebench import drl, nn
from lanebench.config import ConfigError, RunConfig, effective_yaml, load_config, with_seed
from lanebench.env import LaneChangeEnv
from lanebench.eval import (
    EpisodeRecord, emit_report, run_deterministic, run_episode, run_stochastic,
)
from lanebench.mobil import MobilPolicy
from lanebench.scenarios import (
    CLASS_COUNTS, class_counts, dump_scenarios, enumerate_deterministic, gen_stochastic_test,
    gen_training, instantiate, load_scenarios,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_CHECKPOINT = 4
EXIT_NUMERICAL = 5

OUTPUT_ROOT_ENV = "LANEBENCH_OUTPUT_ROOT"

log = logging.getLogger("lanebench")


class CommandError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def output_root(cfg: RunConfig) -> str:
    return os.environ.get(OUTPUT_ROOT_ENV) or cfg.output_dir


def run_dir(args, cfg: RunConfig, default_name: str) -> str:
    path = args.out or os.path.join(output_root(cfg), default_name)
    os.makedirs(path, exist_ok=True)
    return path


def write_text(path: str, text: str):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def echo_config(path: str, cfg: RunConfig, seeds: List[int]):
    write_text(os.path.join(path, "config.yaml"), effective_yaml(cfg))
    write_text(os.path.join(path, "seeds.txt"), "".join(f"{s}\n" for s in seeds))


def make_policy(spec: str, cfg: RunConfig):
    """``mobil`` or a checkpoint path."""
    if spec == "mobil":
        return MobilPolicy(cfg.mobil, cfg.idm)
    return drl.NetworkPolicy.from_checkpoint(spec)


def rule_mask_setting(cfg: RunConfig) -> Optional[bool]:
    return {"auto": None, "on": True, "off": False}[cfg.eval.rule_mask]


def records_csv(records: List[EpisodeRecord]) -> str:
    buf = io.StringIO()
    fields = [f.name for f in dataclasses.fields(EpisodeRecord)]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in records:
        w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, f) for f in fields)])
    return buf.getvalue()


# -- subcommands ------------------------------------------------------------------

def cmd_enumerate(args, cfg: RunConfig) -> int:
    path = args.out or os.path.join(output_root(cfg), "deterministic_scenarios.jsonl")
    scenarios = enumerate_deterministic()
    text = dump_scenarios(scenarios)
    counts = class_counts(load_scenarios(text))
    if counts != CLASS_COUNTS:
        raise CommandError(f"scenario counts {counts} differ from {CLASS_COUNTS}", EXIT_CONFIG)
    if os.path.dirname(path):
        os.makedirs(os.path.dirname(path), exist_ok=True)
    write_text(path, text)
    print(f"wrote {len(scenarios)} scenarios to {path}")
    return EXIT_OK


def training_env_factory(cfg: RunConfig):
    scenario_cfg = cfg.training_scenario
    settings = cfg.env

    def factory(worker: int):
        return LaneChangeEnv(lambda seed: gen_training(seed, scenario_cfg), settings)
    return factory


def cmd_train(args, cfg: RunConfig) -> int:
    tc = cfg.train
    if args.algo:
        try:
            tc = dataclasses.replace(tc, algo=args.algo)
        except ValueError as exc:
            raise CommandError(str(exc), EXIT_CONFIG)
        cfg = dataclasses.replace(cfg, train=tc)
    out = run_dir(args, cfg, f"train-{tc.algo}-seed{cfg.seed}")
    ckpt_dir = os.path.join(out, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    echo_config(out, cfg, [cfg.seed])

    def save(step, spec, params):
        nn.save_checkpoint(os.path.join(ckpt_dir, f"step-{step:09d}.ckpt"), spec, params,
                           {"algo": tc.algo, "step": step, "seed": cfg.seed})

    def progress(step, info):
        log.info("step %d %s", step, " ".join(f"{k}={v:.4g}" for k, v in sorted(info.items())))

    try:
        result = drl.train(tc.algo, training_env_factory(cfg), tc, on_checkpoint=save, progress=progress)
    except drl.NumericalError as err:
        drl.write_diagnostic(os.path.join(out, "diagnostic.json"), err)
        raise CommandError(f"numerical abort: {err} (diagnostic.json written)", EXIT_NUMERICAL)
    nn.save_checkpoint(os.path.join(out, "final.ckpt"), result.spec, result.params,
                       dict(result.meta(), step=tc.total_steps))
    write_text(os.path.join(out, "curve.tsv"), result.curve.to_text())
    print(f"trained {tc.algo} for {tc.total_steps} steps; {len(result.curve)} episodes; run dir {out}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    ev = cfg.eval
    changes = {}
    if args.policy:
        changes["policy"] = args.policy
    if args.suite:
        changes["suite"] = args.suite
    if args.episodes:
        changes["episodes"] = args.episodes
    if changes:
        try:
            ev = dataclasses.replace(ev, **changes)
        except ValueError as exc:
            raise CommandError(str(exc), EXIT_CONFIG)
        cfg = dataclasses.replace(cfg, eval=ev)
    policy = make_policy(ev.policy, cfg)
    agent = "MOBIL" if ev.policy == "mobil" else getattr(policy, "algo", "policy").upper()
    out = run_dir(args, cfg, f"eval-{ev.suite}-{agent.lower()}-seed{cfg.seed}")
    mask = rule_mask_setting(cfg)
    if ev.suite == "stochastic":
        seeds = list(range(cfg.eval_base_seed, cfg.eval_base_seed + ev.episodes))
        report, records = run_stochastic(policy, ev.episodes, cfg.eval_base_seed, mask,
                                         cfg.stochastic_scenario, cfg.env, args.jobs)
    else:
        seeds = [s.id for s in enumerate_deterministic()]
        report, records = run_deterministic(policy, None, mask, cfg.env, args.jobs)
    echo_config(out, cfg, seeds)
    for fmt, ext in (("plain", "txt"), ("csv", "csv"), ("markdown", "md")):
        write_text(os.path.join(out, f"report.{ext}"), emit_report(report, fmt, agent))
    write_text(os.path.join(out, "episodes.csv"), records_csv(records))
    print(emit_report(report, "plain", agent), end="")
    return EXIT_OK


def replay(policy, instance, frame_dir: str, rule_mask_on=None, settings=None) -> EpisodeRecord:
    """Run one episode, writing each observation the policy saw as a PNG plus a log."""
    os.makedirs(frame_dir, exist_ok=True)
    rows = ["step\ttime\taction_proposed\taction\treward\tlane\tspeed\tcollision\ttermination"]

    def on_step(k, obs, out):
        Image.fromarray(np.ascontiguousarray(obs)).save(os.path.join(frame_dir, f"frame_{k:05d}.png"),
                                                        optimize=False)
        i = out.info
        rows.append(f"{k}\t{i.time!r}\t{int(i.proposed_action)}\t{int(i.action)}\t{out.reward.total!r}"
                    f"\t{i.lane}\t{i.speed!r}\t{int(i.collision)}\t{i.termination or ''}")

    kwargs = {} if settings is None else {"settings": settings}
    record = run_episode(policy, instance, None, rule_mask_on, on_step=on_step, **kwargs)
    write_text(os.path.join(frame_dir, "episode_log.tsv"), "\n".join(rows) + "\n")
    return record


def cmd_replay(args, cfg: RunConfig) -> int:
    policy = make_policy(args.policy or cfg.eval.policy, cfg)
    if args.scenario is not None:
        scenarios = enumerate_deterministic()
        if not 0 <= args.scenario < len(scenarios):
            raise CommandError(f"scenario id must lie in [0, {len(scenarios) - 1}]", EXIT_CONFIG)
        instance = instantiate(scenarios[args.scenario])
        name = f"replay-det{args.scenario}"
    else:
        seed = cfg.eval_base_seed if args.episode_seed is None else args.episode_seed
        instance = gen_stochastic_test(seed, cfg.stochastic_scenario)
        name = f"replay-stoch{seed}"
    out = run_dir(args, cfg, name)
    echo_config(out, cfg, [instance.seed if instance.seed is not None else args.scenario])
    rec = replay(policy, instance, out, rule_mask_setting(cfg), cfg.env)
    print(f"{rec.decisions} frames written to {out}; collided={rec.collided} succeeded={rec.succeeded}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lanebench", description="Highway lane-change benchmark.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--seed", type=int, help="override the run seed")
        sp.add_argument("--out", help="output path (file for enumerate, directory otherwise)")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes for evaluation")
        return sp

    common(sub.add_parser("enumerate", help="write the deterministic scenario file"))
    t = common(sub.add_parser("train", help="train a DRL agent"))
    t.add_argument("--algo", choices=drl.ALGORITHMS)
    e = common(sub.add_parser("eval", help="evaluate a policy on a test suite"))
    e.add_argument("--policy", help="'mobil' or a checkpoint path")
    e.add_argument("--suite", choices=("stochastic", "deterministic"))
    e.add_argument("--episodes", type=int, help="stochastic episode count")
    r = common(sub.add_parser("replay", help="dump the frames of one episode"))
    r.add_argument("--policy", help="'mobil' or a checkpoint path")
    g = r.add_mutually_exclusive_group()
    g.add_argument("--scenario", type=int, help="deterministic scenario id")
    g.add_argument("--episode-seed", type=int, help="stochastic test seed")
    return p


COMMANDS = {"enumerate": cmd_enumerate, "train": cmd_train, "eval": cmd_eval, "replay": cmd_replay}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg = with_seed(cfg, args.seed)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except nn.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except drl.NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
