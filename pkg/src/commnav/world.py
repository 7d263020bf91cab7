"""Physical ground truth: robot records, discrete-time dynamics, collisions.

Robots are enclosing spheres moving under double-integrator dynamics on a
fixed time grid. Everything here is value-semantic; operations never mutate
their inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

if TYPE_CHECKING:
    from .comms import CommMatrix
    from .planner import Trajectory


class DynamicsError(ValueError):
    """Raised when an integration step receives unusable data."""


def _vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=float)
    if v.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {v.shape}")
    return v


@dataclass
class RobotState:
    """Position, velocity and goal of one spherical robot, SI units."""

    position: np.ndarray
    velocity: np.ndarray
    goal: np.ndarray
    radius: float = 0.3

    def __post_init__(self):
        self.position = _vec3(self.position)
        self.velocity = _vec3(self.velocity)
        self.goal = _vec3(self.goal)
        self.radius = float(self.radius)
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if not (
            np.isfinite(self.position).all()
            and np.isfinite(self.velocity).all()
            and np.isfinite(self.goal).all()
        ):
            raise ValueError("robot state components must be finite")

    def at_goal(self) -> bool:
        return float(np.linalg.norm(self.goal - self.position)) <= self.radius


@dataclass
class ControlInput:
    """Commanded acceleration. Callers keep components inside the input box."""

    acceleration: np.ndarray

    def __post_init__(self):
        self.acceleration = _vec3(self.acceleration)


@dataclass
class WorldConfig:
    n: int = 4
    dt: float = 0.1
    radius: float = 0.3
    v_max: float = 2.0
    u_max: float = 2.0
    arena_half_extents: np.ndarray = field(
        default_factory=lambda: np.array([4.0, 4.0, 1.5])
    )

    def __post_init__(self):
        self.arena_half_extents = _vec3(self.arena_half_extents)
        if self.n < 2:
            raise ValueError("need at least two robots")
        if self.dt <= 0 or self.v_max <= 0 or self.u_max <= 0 or self.radius <= 0:
            raise ValueError("dt, v_max, u_max and radius must be positive")


@dataclass
class WorldState:
    """Joint state of the team at one time step.

    ``current_plans`` holds each robot's trajectory planned at this state's
    time step (the plan teammates may request one step later). ``prev_comm``
    is the request matrix applied at the previous step.
    """

    time_step: int
    robots: list[RobotState]
    current_plans: list["Trajectory"]
    prev_comm: "CommMatrix"

    def __post_init__(self):
        if len(self.robots) < 2:
            raise ValueError("world needs at least two robots")

    @property
    def n(self) -> int:
        return len(self.robots)

    def positions(self) -> np.ndarray:
        return np.array([r.position for r in self.robots])


def step_dynamics(
    state: RobotState, inp: ControlInput, dt: float, v_max: float = 2.0
) -> RobotState:
    """Advance one robot by one time step.

    Double integrator: p' = p + dt*v + dt^2/2 * u, then the velocity is
    hard-clamped into the +-v_max box component-wise. Goal and radius pass
    through unchanged.
    """
    if dt <= 0 or not np.isfinite(dt):
        raise DynamicsError(f"invalid dt {dt}")
    u = inp.acceleration
    if not np.isfinite(u).all():
        raise DynamicsError("non-finite control input")
    new_p = state.position + dt * state.velocity + (0.5 * dt * dt) * u
    new_v = np.clip(state.velocity + dt * u, -v_max, v_max)
    return RobotState(new_p, new_v, state.goal.copy(), state.radius)


def check_collisions(state: WorldState) -> set[tuple[int, int]]:
    """All unordered pairs (i, j) with center distance < r_i + r_j.

    Touching exactly at the sum of radii counts as collision-free.
    """
    pairs = set()
    robots = state.robots
    for i in range(len(robots)):
        for j in range(i + 1, len(robots)):
            dist = float(np.linalg.norm(robots[i].position - robots[j].position))
            if dist < robots[i].radius + robots[j].radius:
                pairs.add((i, j))
    return pairs


def all_at_goal(state: WorldState) -> bool:
    """True iff every robot is within its own radius of its goal."""
    return all(r.at_goal() for r in state.robots)


def advance_world(
    state: WorldState,
    inputs: Sequence[ControlInput],
    cfg: WorldConfig,
    new_plans: Optional[list["Trajectory"]] = None,
    new_comm: Optional["CommMatrix"] = None,
) -> WorldState:
    """Apply all robots' inputs in one synchronized step."""
    if len(inputs) != len(state.robots):
        raise DynamicsError("need exactly one input per robot")
    robots = [
        step_dynamics(r, u, cfg.dt, cfg.v_max) for r, u in zip(state.robots, inputs)
    ]
    return WorldState(
        time_step=state.time_step + 1,
        robots=robots,
        current_plans=state.current_plans if new_plans is None else new_plans,
        prev_comm=state.prev_comm if new_comm is None else new_comm,
    )
