"""Assumed teammate trajectories.

A robot never knows what its teammates will actually do. For each teammate it
uses, in order of preference: a freshly requested plan (the teammate's plan
from the previous step), a cached plan from an earlier request shifted to the
current step, or a constant-velocity extrapolation of the observed state.
"""
from __future__ import annotations

from typing import NamedTuple, Optional, Sequence

import numpy as np

from .planner import PlannerConfig, Trajectory
from .world import RobotState, WorldState


class AssumedTrajectories(NamedTuple):
    """Per-teammate assumptions plus whether each came from a real plan."""

    trajectories: list[Trajectory]
    communicated: list[bool]


def predict_constant_velocity(
    observed: RobotState, dt: float, n_steps: int, start_step: int = 0
) -> Trajectory:
    """Positions p + k*dt*v for k = 1..n_steps.

    Accumulated step by step so the result is bit-identical to rolling the
    world forward with zero inputs.
    """
    if n_steps < 1:
        raise ValueError("need at least one prediction step")
    positions = np.empty((n_steps, 3))
    p = observed.position
    step = dt * observed.velocity
    for k in range(n_steps):
        p = p + step
        positions[k] = p
    return Trajectory(start_step=start_step, positions=positions)


def align_plan(
    stored: Trajectory,
    t0: int,
    now: int,
    observed: RobotState,
    dt: float,
    n_steps: int,
) -> Trajectory:
    """Shift a plan made at step t0 so it covers steps now+1 .. now+n_steps.

    Positions past the stored plan's end continue at the velocity implied by
    its last segment. Once the plan is older than the horizon nothing it says
    is still inside the window, so prediction falls back to constant velocity
    from the observed state; same if the plan is too short to imply a
    velocity.
    """
    if now < t0:
        raise ValueError("cannot align a plan into its own past")
    shift = now - t0
    if shift >= n_steps or len(stored) < 2:
        return predict_constant_velocity(observed, dt, n_steps, start_step=now)

    stored_pos = stored.positions
    keep = stored_pos[shift:]
    out = np.empty((n_steps, 3))
    out[: keep.shape[0]] = keep
    tail_step = stored_pos[-1] - stored_pos[-2]
    p = stored_pos[-1]
    for k in range(keep.shape[0], n_steps):
        p = p + tail_step
        out[k] = p
    return Trajectory(start_step=now, positions=out)


class PlanCache:
    """Per-robot store of the freshest plan received from each teammate."""

    def __init__(self, owner: int):
        self.owner = owner
        self._entries: dict[int, Trajectory] = {}

    def store(self, j: int, traj: Trajectory) -> None:
        if j == self.owner:
            raise ValueError("a robot does not cache its own plan")
        self._entries[j] = traj

    def get(self, j: int) -> Optional[Trajectory]:
        return self._entries.get(j)

    def __contains__(self, j: int) -> bool:
        return j in self._entries


def assemble_assumed_trajectories(
    i: int,
    comm_row: Sequence[int] | np.ndarray,
    fresh_plans: Sequence[Trajectory],
    cache: PlanCache,
    world: WorldState,
    cfg: PlannerConfig,
) -> AssumedTrajectories:
    """Build robot i's view of every teammate, ascending index, self skipped.

    A set request bit stores the teammate's previous-step plan in the cache
    and uses it; otherwise a cached non-stale plan is shifted forward; failing
    both, the teammate is assumed to keep its current velocity. Each slot is
    marked communicated when it descends from an actual plan (fresh or
    cached) rather than a constant-velocity guess.
    """
    comm_row = np.asarray(comm_row)
    if comm_row.shape[0] != world.n:
        raise ValueError("comm row length must equal the robot count")
    now = world.time_step
    trajectories: list[Trajectory] = []
    communicated: list[bool] = []
    for j in range(world.n):
        if j == i:
            continue
        if comm_row[j]:
            cache.store(j, fresh_plans[j])
        entry = cache.get(j)
        if (entry is not None and now - entry.start_step < cfg.horizon
                and len(entry) >= 2):
            trajectories.append(
                align_plan(entry, entry.start_step, now, world.robots[j],
                           cfg.dt, cfg.horizon)
            )
            communicated.append(True)
        else:
            trajectories.append(
                predict_constant_velocity(world.robots[j], cfg.dt, cfg.horizon,
                                          start_step=now)
            )
            communicated.append(False)
    return AssumedTrajectories(trajectories, communicated)
