"""Operator surface: train, evaluate, compare, selfcheck.

Configuration is one hierarchical JSON document; the built-in default is the
desk-scale setup and can be printed with --print-default-config. Every
subcommand is deterministic given the same config and seed: one master seed
derives independent named streams for initialization, spawning, exploration
and replay sampling.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .comms import DistanceBased, FullComm, Learned, NoComm, PolicyKind
from .env import (
    METRICS_COLUMNS,
    RewardConfig,
    Scenario,
    SimConfig,
    TrainHooks,
    curriculum_schedule,
    metrics_row,
    run_episode,
    sample_scenario_kind,
    seeded_rng,
    write_trajectory_log,
)
from .maddpg import MaddpgConfig, ReplayBuffer, init_agent_nets, load_agents, save_agents
from .planner import PlannerConfig
from .selfcheck import run_all
from .world import WorldConfig

log = logging.getLogger("commnav")

DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "runs/commnav",
    "world": {
        "n": 4,
        "dt": 0.1,
        "radius": 0.3,
        "v_max": 2.0,
        "u_max": 2.0,
        "arena_half_extents": [4.0, 4.0, 1.5],
    },
    "planner": {
        "horizon": 10,
        "stage_goal_weight": 1.0,
        "input_weight": 0.1,
        "terminal_weight": 10.0,
        "sqp_max_iters": 8,
        "convergence_tol": 0.01,
        "slack_penalty": 1000.0,
        "safety_margin": 0.1,
        "separation_growth": 0.5,
        "prediction_growth": 0.0,
        "prediction_credence": 0.08,
        "brake_retry": True,
    },
    "reward": {"w_g": 1.0, "w_coll": 1.0, "w_c": 0.1, "r_g": 1.3, "r_coll": 150.0},
    "scenario": {
        "min_separation": 1.2,
        "z_band": 0.2,
        "edge_margin": 0.5,
        "spawn_radius_min": 2.2,
        "spawn_radius_max": 3.2,
    },
    "maddpg": {
        "gamma": 0.98,
        "tau": 0.01,
        "actor_lr": 0.01,
        "critic_lr": 0.01,
        "hidden": 64,
        "buffer_capacity": 100000,
        "batch_size": 1024,
        "warmup": 1024,
        "train_every": 50,
        "logit_reg": 0.001,
    },
    "comm": {"delta": 0.5},
    "episode": {"max_steps": 100},
    "train": {"episodes": 3000, "checkpoint_every": 500},
    "evaluate": {"episodes": 50},
    "compare": {
        "policies": ["full", "none", "dist:4.0"],
        "scenarios": ["random", "swap", "asym"],
        "episodes": 50,
    },
}

SCENARIO_NAMES = {
    "random": "random",
    "swap": "random_swapping",
    "asym": "asymmetric_swapping",
}


class ConfigError(ValueError):
    pass


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, dict) and isinstance(out[key], dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    with open(path) as fh:
        user = json.load(fh)
    return _deep_merge(DEFAULT_CONFIG, user)


def _sim_config(cfg: dict) -> SimConfig:
    world = WorldConfig(**cfg["world"])
    planner = PlannerConfig(**cfg["planner"])
    reward = RewardConfig(**cfg["reward"])
    return SimConfig(world=world, planner=planner, reward=reward,
                     max_steps=cfg["episode"]["max_steps"])


def _scenario(cfg: dict, kind: str) -> Scenario:
    return Scenario(kind=kind, **cfg["scenario"])


def _maddpg_config(cfg: dict) -> MaddpgConfig:
    n = cfg["world"]["n"]
    return MaddpgConfig(n_agents=n, obs_dim=6 + 6 * (n - 1), **cfg["maddpg"])


def parse_policy(name: str, cfg: dict) -> PolicyKind:
    """full | none | dist:EPS | learned:CHECKPOINT"""
    if name == "full":
        return FullComm()
    if name == "none":
        return NoComm()
    if name.startswith("dist:"):
        return DistanceBased(epsilon=float(name.split(":", 1)[1]))
    if name.startswith("learned:"):
        path = name.split(":", 1)[1]
        if not os.path.exists(path):
            raise ConfigError(f"checkpoint not found: {path}")
        nets, _ = load_agents(path)
        return Learned(actors=[a.actor for a in nets],
                       delta=cfg["comm"]["delta"])
    raise ConfigError(f"unknown policy {name!r}")


def _policy_label(name: str) -> str:
    return name.replace(":", "_").replace("/", "-")


def _resolve_scenario_kind(name: str) -> str:
    if name in SCENARIO_NAMES:
        return SCENARIO_NAMES[name]
    if name in SCENARIO_NAMES.values():
        return name
    raise ConfigError(f"unknown scenario {name!r}")


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _dump_config(cfg: dict, out: Path) -> None:
    (out / "config_used.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))


# --- evaluation --------------------------------------------------------------


def _run_eval(cfg: dict, policy: PolicyKind, policy_name: str,
              scenario_kind: str, episodes: int):
    """Seeded evaluation episodes; spawn seeds do not depend on the policy,
    so every policy sees the same worlds."""
    sim = _sim_config(cfg)
    scenario = _scenario(cfg, scenario_kind)
    seed = cfg["seed"]
    rows, results = [], []
    for ep in range(episodes):
        rng = seeded_rng(seed, "eval", scenario_kind, ep)
        result = run_episode(policy, scenario, sim, rng)
        rows.append(metrics_row(ep, scenario_kind, policy_name, result))
        results.append(result)
    return rows, results


def cmd_evaluate(cfg: dict, policy_name: str, scenario_name: str,
                 episodes: int) -> int:
    try:
        policy = parse_policy(policy_name, cfg)
        kind = _resolve_scenario_kind(scenario_name)
    except ConfigError as exc:
        log.error("%s", exc)
        return 2
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    _dump_config(cfg, out)
    rows, results = _run_eval(cfg, policy, policy_name, kind, episodes)
    label = _policy_label(policy_name)
    _write_csv(out / f"metrics_{label}_{kind}.csv", METRICS_COLUMNS, rows)
    write_trajectory_log(out / f"trajectories_{label}_{kind}.jsonl", results)
    collisions = sum(r.collisions for r in results)
    log.info("evaluate %s on %s: %d episodes, %d collisions, %d requests",
             policy_name, kind, episodes, collisions,
             sum(r.comm_requests for r in results))
    return 0


COMPARE_COLUMNS = (
    "policy", "scenario", "episodes", "collision_episodes", "collisions",
    "comm_requests", "request_reduction_vs_full_pct",
)


def cmd_compare(cfg: dict) -> int:
    policies = cfg["compare"]["policies"]
    if "full" not in policies:
        log.error("compare needs the 'full' policy as the reduction baseline")
        return 2
    try:
        parsed = {p: parse_policy(p, cfg) for p in policies}
        kinds = [_resolve_scenario_kind(s) for s in cfg["compare"]["scenarios"]]
    except ConfigError as exc:
        log.error("%s", exc)
        return 2
    episodes = cfg["compare"]["episodes"]
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    _dump_config(cfg, out)

    totals = {}
    for pname, policy in parsed.items():
        for kind in kinds:
            _, results = _run_eval(cfg, policy, pname, kind, episodes)
            totals[(pname, kind)] = {
                "collision_episodes": sum(1 for r in results if r.collisions),
                "collisions": sum(r.collisions for r in results),
                "requests": sum(r.comm_requests for r in results),
            }
    rows = []
    for pname in policies:
        for kind in kinds:
            t = totals[(pname, kind)]
            full_requests = totals[("full", kind)]["requests"]
            reduction = (100.0 * (1.0 - t["requests"] / full_requests)
                         if full_requests else 0.0)
            rows.append([pname, kind, episodes, t["collision_episodes"],
                         t["collisions"], t["requests"], repr(reduction)])
    _write_csv(out / "compare.csv", COMPARE_COLUMNS, rows)
    log.info("compare written to %s", out / "compare.csv")
    return 0


# --- training ----------------------------------------------------------------

TRAIN_LOG_BASE = ("episode", "scenario", "steps", "return", "collisions",
                  "comm_requests")


def cmd_train(cfg: dict) -> int:
    sim = _sim_config(cfg)
    mcfg = _maddpg_config(cfg)
    seed = cfg["seed"]
    episodes = cfg["train"]["episodes"]
    checkpoint_every = cfg["train"]["checkpoint_every"]
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    _dump_config(cfg, out)

    nets = init_agent_nets(mcfg, seeded_rng(seed, "init"))
    buffer = ReplayBuffer(mcfg.buffer_capacity, mcfg.n_agents, mcfg.obs_dim)
    hooks = TrainHooks(buffer=buffer, nets=nets, cfg=mcfg,
                       train_rng=seeded_rng(seed, "replay"))
    policy = Learned(actors=[a.actor for a in nets], delta=cfg["comm"]["delta"])
    curriculum_rng = seeded_rng(seed, "curriculum")

    n = mcfg.n_agents
    header = list(TRAIN_LOG_BASE)
    header += [f"critic_loss_{i}" for i in range(n)]
    header += [f"actor_objective_{i}" for i in range(n)]
    rows = []
    try:
        for ep in range(episodes):
            kind = sample_scenario_kind(curriculum_schedule(ep, episodes),
                                        curriculum_rng)
            scenario = _scenario(cfg, kind)
            hooks.explore_rng = seeded_rng(seed, "explore", ep)
            result = run_episode(policy, scenario, sim,
                                 seeded_rng(seed, "spawn", ep), hooks)
            diag = hooks.last_diag
            closs = diag.get("critic_loss", [float("nan")] * n)
            aobj = diag.get("actor_objective", [float("nan")] * n)
            rows.append(
                [ep, kind, result.steps, repr(result.total_return),
                 result.collisions, result.comm_requests]
                + [repr(float(v)) for v in closs]
                + [repr(float(v)) for v in aobj]
            )
            if (ep + 1) % checkpoint_every == 0:
                save_agents(out / f"checkpoint_ep{ep + 1}.npz", nets,
                            extra={"episode": ep + 1, "seed": seed},
                            buffer=buffer)
            if (ep + 1) % 100 == 0:
                recent = rows[-100:]
                log.info(
                    "episode %d/%d: mean return %.2f, collisions %d/100",
                    ep + 1, episodes,
                    float(np.mean([float(r[3]) for r in recent])),
                    sum(1 for r in recent if r[4]),
                )
    except BaseException:
        save_agents(out / "checkpoint_aborted.npz", nets,
                    extra={"episode": len(rows), "seed": seed}, buffer=buffer)
        _write_csv(out / "train_log.csv", header, rows)
        raise
    save_agents(out / "checkpoint_final.npz", nets,
                extra={"episode": episodes, "seed": seed}, buffer=buffer)
    _write_csv(out / "train_log.csv", header, rows)
    log.info("training finished: %s", out / "checkpoint_final.npz")
    return 0


def cmd_selfcheck() -> int:
    results = run_all()
    for result in results:
        print(result.line())
    return 0 if all(r.passed for r in results) else 1


# --- argument parsing --------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="commnav",
        description="Multi-robot collision avoidance with scheduled communication",
    )
    parser.add_argument("--print-default-config", action="store_true",
                        help="print the built-in configuration and exit")
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--out", help="override output directory")

    p_train = sub.add_parser("train", help="curriculum training run")
    common(p_train)
    p_train.add_argument("--episodes", type=int, help="override training episodes")

    p_eval = sub.add_parser("evaluate", help="seeded evaluation episodes")
    common(p_eval)
    p_eval.add_argument("--policy", required=True,
                        help="full | none | dist:EPS | learned:CKPT")
    p_eval.add_argument("--scenario", required=True,
                        help="random | swap | asym")
    p_eval.add_argument("--episodes", type=int, help="override episode count")

    p_cmp = sub.add_parser("compare", help="all policies over all scenarios")
    common(p_cmp)
    p_cmp.add_argument("--episodes", type=int, help="override episode count")
    p_cmp.add_argument("--policy", action="append", dest="policies",
                       help="add a policy to the comparison set")

    sub.add_parser("selfcheck", help="numerical release gates")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get("COMMNAV_LOG", "INFO").upper(),
                      logging.INFO),
        format="%(levelname)s %(message)s",
    )
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.print_default_config:
        print(json.dumps(DEFAULT_CONFIG, indent=2, sort_keys=True))
        return 0
    if args.command is None:
        parser.print_help()
        return 2
    if args.command == "selfcheck":
        return cmd_selfcheck()

    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        log.error("bad config: %s", exc)
        return 2
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out_dir"] = args.out

    try:
        if args.command == "train":
            if args.episodes is not None:
                cfg["train"]["episodes"] = args.episodes
            return cmd_train(cfg)
        if args.command == "evaluate":
            episodes = args.episodes or cfg["evaluate"]["episodes"]
            return cmd_evaluate(cfg, args.policy, args.scenario, episodes)
        if args.command == "compare":
            if args.episodes is not None:
                cfg["compare"]["episodes"] = args.episodes
            if args.policies:
                cfg["compare"]["policies"] = list(
                    dict.fromkeys(cfg["compare"]["policies"] + args.policies)
                )
            return cmd_compare(cfg)
    except ConfigError as exc:
        log.error("%s", exc)
        return 2
    parser.error(f"unknown command {args.command}")
    return 2


if __name__ == "__main__":
    sys.exit(main())
