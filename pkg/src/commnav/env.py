"""Episode engine: observations, reward, scenarios, curriculum, step pipeline.

One simulation step runs the whole pipeline synchronously: build every
robot's egocentric observation, decide the communication matrix, assemble
each robot's assumed teammate trajectories, solve each robot's plan, then
apply all first inputs in one world step. The shared team reward is evaluated
on the post-step state together with the requests just issued, so a collision
penalty lands on the transition that caused it. Episodes end on any collision
or after max_steps.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .comms import CommMatrix, Learned, PolicyKind, comm_cost, decide_comm_scores
from .maddpg import AgentNets, MaddpgConfig, ReplayBuffer, TransitionSample, train_step
from .planner import PlannerConfig, plan, shift_warm_start
from .prediction import PlanCache, assemble_assumed_trajectories, predict_constant_velocity
from .world import (
    RobotState,
    WorldConfig,
    WorldState,
    advance_world,
    all_at_goal,
    check_collisions,
)


class SpawnError(RuntimeError):
    """Raised when rejection sampling cannot place the team."""


SCENARIO_KINDS = ("random", "random_swapping", "asymmetric_swapping")


@dataclass(frozen=True)
class Scenario:
    kind: str
    min_separation: float = 1.2
    z_band: float = 0.2
    edge_margin: float = 0.5
    # asymmetric swaps spawn on an annulus so all four robots reach the
    # center at roughly the same time, which is what makes them hard
    spawn_radius_min: float = 2.2
    spawn_radius_max: float = 3.2

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.min_separation <= 0:
            raise ValueError("min_separation must be positive")
        if not 0 < self.spawn_radius_min <= self.spawn_radius_max:
            raise ValueError("spawn radius band must be positive and ordered")


@dataclass(frozen=True)
class RewardConfig:
    w_g: float = 1.0
    w_coll: float = 1.0
    w_c: float = 0.1
    r_g: float = 1.3
    r_coll: float = 150.0

    def __post_init__(self):
        if min(self.w_g, self.w_coll, self.w_c, self.r_g, self.r_coll) < 0:
            raise ValueError("reward weights must be non-negative")


@dataclass
class SimConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    max_steps: int = 100


@dataclass
class Observation:
    """Egocentric view: own velocity, goal offset, then per teammate in
    ascending index order the relative position and velocity."""

    own_velocity: np.ndarray
    relative_goal: np.ndarray
    relative_positions: np.ndarray   # (n-1, 3)
    relative_velocities: np.ndarray  # (n-1, 3)

    @property
    def vector(self) -> np.ndarray:
        per_mate = np.concatenate(
            [self.relative_positions, self.relative_velocities], axis=1
        ).reshape(-1)
        return np.concatenate([self.own_velocity, self.relative_goal, per_mate])


def observation_dim(n: int) -> int:
    return 6 + 6 * (n - 1)


def build_observation(world: WorldState, i: int) -> Observation:
    me = world.robots[i]
    others = [world.robots[j] for j in range(world.n) if j != i]
    return Observation(
        own_velocity=me.velocity.copy(),
        relative_goal=me.goal - me.position,
        relative_positions=np.array([o.position - me.position for o in others]),
        relative_velocities=np.array([o.velocity - me.velocity for o in others]),
    )


def compute_reward(world: WorldState, matrix: CommMatrix,
                   cfg: RewardConfig) -> float:
    """Weighted team reward: goal bonus, collision penalty, request cost."""
    r_goal = cfg.r_g if all_at_goal(world) else 0.0
    r_coll = -cfg.r_coll if check_collisions(world) else 0.0
    return cfg.w_g * r_goal + cfg.w_coll * r_coll + cfg.w_c * (-comm_cost(matrix))


# --- scenario generation -----------------------------------------------------

_RETRY_CAP = 1000


def _sample_separated(rng, count, lo, hi, z_half, min_sep):
    for _ in range(_RETRY_CAP):
        xy = rng.uniform(lo, hi, size=(count, 2))
        z = rng.uniform(-z_half, z_half, size=(count, 1))
        pts = np.hstack([xy, z])
        diff = pts[:, None, :] - pts[None, :, :]
        dist = np.linalg.norm(diff, axis=2)
        dist[np.diag_indices(count)] = np.inf
        if dist.min() > min_sep:
            return pts
    raise SpawnError("could not sample separated points")


def _derangement(rng, n):
    for _ in range(_RETRY_CAP):
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm
    raise SpawnError("could not sample a derangement")


def spawn_scenario(scenario: Scenario, world_cfg: WorldConfig,
                   rng: np.random.Generator, horizon: int = 10) -> WorldState:
    """Place the team at rest with collision-free pairwise separation.

    random: independent spawns and goals. random_swapping: goals are a
    derangement of the spawns. asymmetric_swapping: one robot per x-y
    quadrant, goal at the spawn of the diametrically opposed quadrant's
    robot (requires n = 4).
    """
    n = world_cfg.n
    hx, hy, _ = world_cfg.arena_half_extents
    z_half = scenario.z_band / 2.0
    margin = scenario.edge_margin
    if scenario.kind == "asymmetric_swapping":
        if n != 4:
            raise SpawnError("asymmetric_swapping is defined for exactly 4 robots")
        quadrant_base = np.array([0.0, 0.5, 1.0, 1.5]) * np.pi
        for _ in range(_RETRY_CAP):
            radius = rng.uniform(scenario.spawn_radius_min,
                                 scenario.spawn_radius_max, size=n)
            angle = quadrant_base + rng.uniform(0.1, np.pi / 2 - 0.1, size=n)
            z = rng.uniform(-z_half, z_half, size=n)
            pts = np.column_stack(
                [radius * np.cos(angle), radius * np.sin(angle), z]
            )
            diff = pts[:, None, :] - pts[None, :, :]
            dist = np.linalg.norm(diff, axis=2)
            dist[np.diag_indices(n)] = np.inf
            if dist.min() > scenario.min_separation:
                break
        else:
            raise SpawnError("could not sample separated quadrant spawns")
        partner = [2, 3, 0, 1]
        goals = pts[partner]
    else:
        pts = _sample_separated(rng, n, -hx + margin, hx - margin, z_half,
                                scenario.min_separation)
        if scenario.kind == "random_swapping":
            goals = pts[_derangement(rng, n)]
        else:
            goals = _sample_separated(rng, n, -hx + margin, hx - margin, z_half,
                                      scenario.min_separation)
    robots = [
        RobotState(position=pts[i], velocity=np.zeros(3), goal=goals[i],
                   radius=world_cfg.radius)
        for i in range(n)
    ]
    # teams spawn at rest, so initial "previous plans" are hold-position
    plans = [
        predict_constant_velocity(r, world_cfg.dt, horizon, start_step=0)
        for r in robots
    ]
    return WorldState(time_step=0, robots=robots, current_plans=plans,
                      prev_comm=CommMatrix.zeros(n))


def curriculum_schedule(episode_index: int, total_episodes: int) -> dict[str, float]:
    """Scenario mix per training phase: easy first, everything later."""
    if total_episodes <= 0:
        raise ValueError("total_episodes must be positive")
    frac = episode_index / total_episodes
    if frac < 0.2:
        return {"random": 1.0}
    if frac < 0.5:
        return {"random": 0.5, "random_swapping": 0.5}
    third = 1.0 / 3.0
    return {"random": third, "random_swapping": third,
            "asymmetric_swapping": third}


def sample_scenario_kind(schedule: dict[str, float],
                         rng: np.random.Generator) -> str:
    kinds = sorted(schedule)
    probs = np.array([schedule[k] for k in kinds])
    return kinds[rng.choice(len(kinds), p=probs / probs.sum())]


# --- episode loop ------------------------------------------------------------


@dataclass
class TrainHooks:
    """Replay insertion and training cadence, threaded through episodes."""

    buffer: ReplayBuffer
    nets: list[AgentNets]
    cfg: MaddpgConfig
    train_rng: np.random.Generator
    explore_rng: Optional[np.random.Generator] = None
    env_steps: int = 0
    last_diag: dict = field(default_factory=dict)


@dataclass
class EpisodeResult:
    steps: int
    collisions: int
    comm_requests: int
    time_to_goal: list[Optional[int]]
    total_return: float
    termination: str  # "collision" | "timeout"
    log: list[dict]

    def mean_time_to_goal(self) -> float:
        reached = [t for t in self.time_to_goal if t is not None]
        return float(np.mean(reached)) if reached else float("nan")


def run_episode(
    policy: PolicyKind,
    scenario: Scenario,
    cfg: SimConfig,
    rng: np.random.Generator,
    hooks: Optional[TrainHooks] = None,
    initial_world: Optional[WorldState] = None,
) -> EpisodeResult:
    """Spawn, then observe / communicate / plan / execute until done."""
    if hooks is not None and not isinstance(policy, Learned):
        raise ValueError("training hooks only apply to the learned policy")
    if initial_world is not None:
        world = initial_world
    else:
        world = spawn_scenario(scenario, cfg.world, rng,
                               horizon=cfg.planner.horizon)
    n = world.n
    caches = [PlanCache(i) for i in range(n)]
    warm: list[Optional[np.ndarray]] = [None] * n
    explore = hooks.explore_rng if hooks is not None else None

    total_requests = 0
    total_return = 0.0
    time_to_goal: list[Optional[int]] = [None] * n
    log: list[dict] = []
    termination = "timeout"
    collision_pairs: set = set()
    steps_done = 0

    for t in range(cfg.max_steps):
        observations = [build_observation(world, i) for i in range(n)]
        z = [o.vector for o in observations]
        matrix, scores = decide_comm_scores(policy, z, world, explore)
        total_requests += comm_cost(matrix)
        for i in range(n):
            r = world.robots[i]
            log.append({
                "step": t,
                "robot": i,
                "position": [float(v) for v in r.position],
                "velocity": [float(v) for v in r.velocity],
                "comm_row": [int(v) for v in matrix.row_without_self(i)],
                "at_goal": r.at_goal(),
            })

        results = []
        for i in range(n):
            assumed = assemble_assumed_trajectories(
                i, matrix.entries[i], world.current_plans, caches[i], world,
                cfg.planner,
            )
            growth = [
                cfg.planner.separation_growth if c else cfg.planner.prediction_growth
                for c in assumed.communicated
            ]
            credence = [
                1.0 if c else cfg.planner.prediction_credence
                for c in assumed.communicated
            ]
            results.append(
                plan(world.robots[i], assumed.trajectories, cfg.planner,
                     warm[i], start_step=world.time_step, growth=growth,
                     penalty_scale=credence)
            )
        warm = [shift_warm_start(res.inputs) for res in results]

        new_world = advance_world(
            world,
            [res.first_input for res in results],
            cfg.world,
            new_plans=[res.trajectory for res in results],
            new_comm=matrix,
        )
        reward = compute_reward(new_world, matrix, cfg.reward)
        total_return += reward
        pairs = check_collisions(new_world)
        steps_done = t + 1
        terminal = bool(pairs) or steps_done == cfg.max_steps
        for i in range(n):
            if time_to_goal[i] is None and new_world.robots[i].at_goal():
                time_to_goal[i] = steps_done

        if hooks is not None:
            next_z = np.array(
                [build_observation(new_world, i).vector for i in range(n)]
            )
            hooks.buffer.push(TransitionSample(
                obs=np.array(z),
                scores=scores,
                matrix=matrix.entries.copy(),
                reward=reward,
                next_obs=next_z,
                terminal=terminal,
                collision=bool(pairs),
            ))
            hooks.env_steps += 1
            if hooks.env_steps % hooks.cfg.train_every == 0:
                diag = train_step(hooks.nets, hooks.buffer, hooks.cfg,
                                  hooks.train_rng)
                if diag.get("trained"):
                    hooks.last_diag = diag

        world = new_world
        if pairs:
            collision_pairs = pairs
            termination = "collision"
            break

    return EpisodeResult(
        steps=steps_done,
        collisions=len(collision_pairs),
        comm_requests=total_requests,
        time_to_goal=time_to_goal,
        total_return=total_return,
        termination=termination,
        log=log,
    )


# --- artifacts ---------------------------------------------------------------

METRICS_COLUMNS = (
    "episode", "scenario", "policy", "steps", "collisions", "comm_requests",
    "mean_time_to_goal",
)


def metrics_row(episode: int, scenario: str, policy: str,
                result: EpisodeResult) -> list:
    return [episode, scenario, policy, result.steps, result.collisions,
            result.comm_requests, repr(result.mean_time_to_goal())]


def write_trajectory_log(path, results: Sequence[EpisodeResult]) -> None:
    """Line-delimited JSON, one record per robot per step."""
    with open(path, "w") as fh:
        for episode, result in enumerate(results):
            for record in result.log:
                fh.write(json.dumps({"episode": episode, **record}) + "\n")


def seeded_rng(*parts) -> np.random.Generator:
    """Deterministic stream from a tuple of ints and strings."""
    entropy = []
    for p in parts:
        if isinstance(p, str):
            digest = hashlib.sha256(p.encode()).digest()
            entropy.append(int.from_bytes(digest[:8], "little"))
        else:
            entropy.append(int(p))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
