"""Numerical release gates with independent oracles.

Every check here re-derives its expected answer through a different route
than the code under test: finite differences against hand-written backprop, a
generic bound-constrained solver against the SQP planner, explicit formula
evaluation against the reward, and step-by-step integration against the
closed-form predictor.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from . import maddpg
from .comms import CommMatrix
from .env import RewardConfig, compute_reward
from .neural import MlpParams, backward, forward, init_mlp
from .planner import PlannerConfig, plan
from .prediction import align_plan, predict_constant_velocity
from .world import ControlInput, RobotState, WorldState, step_dynamics


@dataclass
class CheckResult:
    name: str
    measured: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.measured < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: error {self.measured:.3e} (tol {self.tol:.1e})"


# --- gradient fidelity -------------------------------------------------------


def gradient_check(
    params: MlpParams,
    rng: np.random.Generator,
    probes_per_layer: int = 100,
    step: float = 1e-5,
    backward_fn: Callable = backward,
) -> float:
    """Max relative error of analytic gradients vs central differences.

    Probes every weight matrix, bias vector and the input vector.
    """
    x = rng.normal(size=params.input_dim)
    gout = rng.normal(size=params.output_dim)
    _, cache = forward(params, x)
    grads = backward_fn(params, cache, gout)

    def objective() -> float:
        y, _ = forward(params, x)
        return float(gout @ y)

    def probe(array, analytic, idx) -> float:
        old = array[idx]
        array[idx] = old + step
        fp = objective()
        array[idx] = old - step
        fm = objective()
        array[idx] = old
        fd = (fp - fm) / (2.0 * step)
        return abs(analytic[idx] - fd) / max(abs(analytic[idx]), abs(fd), 1e-8)

    worst = 0.0
    for l in range(len(params.weights)):
        W, b = params.weights[l], params.biases[l]
        for _ in range(probes_per_layer):
            idx = (rng.integers(W.shape[0]), rng.integers(W.shape[1]))
            worst = max(worst, probe(W, grads.d_weights[l], idx))
        for _ in range(probes_per_layer // 4 + 1):
            idx = (rng.integers(b.shape[0]),)
            worst = max(worst, probe(b, grads.d_biases[l], idx))
    for _ in range(probes_per_layer):
        idx = (rng.integers(x.shape[0]),)
        worst = max(worst, probe(x, grads.d_input, idx))
    return worst


def composite_gradient_check(
    rng: np.random.Generator,
    n_agents: int = 4,
    obs_dim: int = 24,
    probes: int = 100,
    step: float = 1e-5,
) -> float:
    """FD check of the actor update gradient flowing through the critic."""
    cfg = maddpg.MaddpgConfig(n_agents=n_agents, obs_dim=obs_dim)
    nets = maddpg.init_agent_nets(cfg, rng)
    B = 8
    batch = {
        "obs": rng.normal(size=(B, n_agents, obs_dim)),
        "scores": rng.uniform(0.05, 0.95, size=(B, n_agents, n_agents - 1)),
    }
    i = 0
    _, _, grads = maddpg.actor_gradient(i, nets, batch)

    def objective() -> float:
        obj, _, _ = maddpg.actor_gradient(i, nets, batch)
        return obj

    actor = nets[i].actor
    worst = 0.0
    for _ in range(probes):
        l = int(rng.integers(len(actor.weights)))
        W = actor.weights[l]
        idx = (rng.integers(W.shape[0]), rng.integers(W.shape[1]))
        old = W[idx]
        W[idx] = old + step
        fp = objective()
        W[idx] = old - step
        fm = objective()
        W[idx] = old
        fd = (fp - fm) / (2.0 * step)
        analytic = grads.d_weights[l][idx]
        worst = max(worst, abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-8))
    return worst


# --- planner fidelity --------------------------------------------------------


def _oracle_position_maps(cfg: PlannerConfig):
    """Position/velocity maps built by literally iterating the update rule."""
    N = cfg.horizon
    dt = cfg.dt
    Mp = np.zeros((N, 3, 3 * N))
    Mv = np.zeros((N, 3, 3 * N))
    mp = np.zeros((3, 3 * N))
    mv = np.zeros((3, 3 * N))
    for k in range(N):
        Ek = np.zeros((3, 3 * N))
        Ek[:, 3 * k:3 * k + 3] = np.eye(3)
        mp = mp + dt * mv + 0.5 * dt * dt * Ek
        mv = mv + dt * Ek
        Mp[k] = mp
        Mv[k] = mv
    return Mp, Mv


def solve_plan_oracle(state: RobotState, cfg: PlannerConfig) -> np.ndarray:
    """Bound-constrained quadratic solve of the no-teammates problem.

    Independent route: iterated dynamics maps plus a generic quasi-Newton
    solver with box bounds. Returns the (N, 3) position sequence.
    """
    N = cfg.horizon
    Mp, _ = _oracle_position_maps(cfg)
    ks = np.arange(1, N + 1)
    base = state.position[None, :] + (ks * cfg.dt)[:, None] * state.velocity
    weights = np.full(N, cfg.stage_goal_weight)
    weights[-1] = cfg.terminal_weight

    def cost_and_grad(u):
        pos = base + np.einsum("kij,j->ki", Mp, u)
        err = pos - state.goal[None, :]
        c = float(np.sum(weights * np.sum(err * err, axis=1)))
        c += cfg.input_weight * float(u @ u)
        grad = 2.0 * np.einsum("ki,kij->j", weights[:, None] * err, Mp)
        grad += 2.0 * cfg.input_weight * u
        return c, grad

    res = minimize(
        cost_and_grad,
        np.zeros(3 * N),
        jac=True,
        method="L-BFGS-B",
        bounds=[(-cfg.u_max, cfg.u_max)] * (3 * N),
        options={"maxiter": 2000, "ftol": 1e-16, "gtol": 1e-12},
    )
    u = res.x
    return base + np.einsum("kij,j->ki", Mp, u)


def planner_oracle_check(cfg: PlannerConfig | None = None) -> float:
    """Max per-coordinate gap between the planner and the oracle solve."""
    cfg = cfg or PlannerConfig()
    state = RobotState(position=[-2.0, 0.0, 0.0], velocity=[0.0, 0.0, 0.0],
                       goal=[2.0, 0.0, 0.0])
    result = plan(state, [], cfg)
    oracle = solve_plan_oracle(state, cfg)
    return float(np.abs(result.trajectory.positions - oracle).max())


# --- prediction exactness ----------------------------------------------------


def prediction_check() -> float:
    """Constant-velocity prediction vs world integration, plus zero-shift
    alignment; exact zero expected."""
    cfg = PlannerConfig()
    state = RobotState(position=[0.3, -1.2, 0.8], velocity=[1.3, -0.4, 0.2],
                       goal=[0.0, 0.0, 0.0])
    predicted = predict_constant_velocity(state, cfg.dt, cfg.horizon)
    worst = 0.0
    probe = state
    for k in range(cfg.horizon):
        probe = step_dynamics(probe, ControlInput(np.zeros(3)), cfg.dt,
                              v_max=cfg.v_max)
        worst = max(worst, float(np.abs(probe.position - predicted.positions[k]).max()))
    aligned = align_plan(predicted, predicted.start_step, predicted.start_step,
                         state, cfg.dt, cfg.horizon)
    worst = max(worst, float(np.abs(aligned.positions - predicted.positions).max()))
    return worst


# --- reward arithmetic -------------------------------------------------------


def reward_check(rng: np.random.Generator, n_pairs: int = 1000) -> float:
    """compute_reward vs a direct transcription of the formula."""
    cfg = RewardConfig()
    n = 4
    worst = 0.0
    for _ in range(n_pairs):
        positions = rng.uniform(-4, 4, size=(n, 3))
        goals = rng.uniform(-4, 4, size=(n, 3))
        mode = rng.random()
        if mode < 0.3:
            goals = positions + rng.uniform(-0.2, 0.2, size=(n, 3))
        elif mode < 0.6:
            positions[1] = positions[0] + rng.uniform(-0.4, 0.4, size=3)
        robots = [RobotState(positions[i], np.zeros(3), goals[i], 0.3)
                  for i in range(n)]
        world = WorldState(0, robots, [], CommMatrix.zeros(n))
        entries = rng.integers(0, 2, size=(n, n))
        np.fill_diagonal(entries, 0)
        matrix = CommMatrix(entries)

        got = compute_reward(world, matrix, cfg)
        all_goal = all(
            np.linalg.norm(goals[i] - positions[i]) <= 0.3 for i in range(n)
        )
        any_coll = any(
            np.linalg.norm(positions[i] - positions[j]) < 0.6
            for i in range(n) for j in range(i + 1, n)
        )
        want = (cfg.w_g * (cfg.r_g if all_goal else 0.0)
                + cfg.w_coll * (-cfg.r_coll if any_coll else 0.0)
                + cfg.w_c * (-float(entries.sum())))
        worst = max(worst, abs(got - want))
    return worst


# --- suite -------------------------------------------------------------------


def run_all(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    actor = init_mlp([24, 64, 64, 3], "sigmoid", rng)
    critic = init_mlp([108, 64, 64, 1], "identity", rng)
    return [
        CheckResult("actor gradient vs finite differences",
                    gradient_check(actor, rng), 1e-4),
        CheckResult("critic gradient vs finite differences",
                    gradient_check(critic, rng), 1e-4),
        CheckResult("actor-through-critic gradient vs finite differences",
                    composite_gradient_check(rng), 1e-3),
        CheckResult("planner vs bound-constrained oracle",
                    planner_oracle_check(), 1e-4),
        CheckResult("constant-velocity prediction exactness",
                    prediction_check(), 1e-300),
        CheckResult("reward formula vs direct evaluation",
                    reward_check(rng), 1e-300),
    ]
