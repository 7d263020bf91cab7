"""Per-robot receding-horizon trajectory optimization.

Each step a robot minimizes quadratic goal-tracking plus input effort over an
N-step horizon, subject to a hard acceleration box, a soft velocity box and
sphere-separation constraints against the trajectories it assumes for its
teammates. Separation constraints are nonconvex, so the solve is sequential:
linearize them around the current rollout, solve the resulting convex
subproblem (slack-penalized halfspaces, exact input box), and accept the step
through a backtracking line search on an exact penalty merit function. Only
the first input of the optimized sequence is ever executed.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .world import ControlInput, RobotState, WorldConfig


@dataclass
class Trajectory:
    """Planned positions for steps start_step+1 .. start_step+N."""

    start_step: int
    positions: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be (N, 3), got {self.positions.shape}")
        if not np.isfinite(self.positions).all():
            raise ValueError("trajectory positions must be finite")

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class PlannerConfig:
    horizon: int = 10
    dt: float = 0.1
    stage_goal_weight: float = 1.0
    input_weight: float = 0.1
    terminal_weight: float = 10.0
    sqp_max_iters: int = 8
    convergence_tol: float = 1e-2
    slack_penalty: float = 1e3
    safety_margin: float = 0.1
    separation_growth: float = 0.5
    prediction_growth: float = 0.0
    prediction_credence: float = 0.08
    brake_retry: bool = True
    v_max: float = 2.0
    u_max: float = 2.0

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")
        if min(self.stage_goal_weight, self.input_weight, self.terminal_weight) < 0:
            raise ValueError("cost weights must be non-negative")
        if self.slack_penalty <= 0 or self.convergence_tol <= 0:
            raise ValueError("slack_penalty and convergence_tol must be positive")

    @classmethod
    def for_world(cls, world: WorldConfig, **overrides) -> "PlannerConfig":
        base = dict(dt=world.dt, v_max=world.v_max, u_max=world.u_max)
        base.update(overrides)
        return cls(**base)


@dataclass
class PlanResult:
    trajectory: Trajectory
    first_input: ControlInput
    converged: bool
    max_constraint_violation: float
    inputs: np.ndarray  # (N, 3) full optimized input sequence, warm-start food

    def __post_init__(self):
        if self.max_constraint_violation < 0:
            raise ValueError("violation must be non-negative")


# --- prediction matrices -----------------------------------------------------
#
# With inputs U (N, 3) and start state (p0, v0), the unclamped model is affine:
#   p_k = p0 + k*dt*v0 + dt^2 * sum_{j<k} (k - j - 1/2) u_j
#   v_k = v0 + dt * sum_{j<k} u_j
# Flattening U row-major, the per-axis maps Sp, Sv lift to kron(S, I3).


@lru_cache(maxsize=8)
def _matrices(horizon: int, dt: float):
    N = horizon
    Sp = np.zeros((N, N))
    Sv = np.zeros((N, N))
    for k in range(1, N + 1):
        for j in range(k):
            Sp[k - 1, j] = dt * dt * (k - j - 0.5)
            Sv[k - 1, j] = dt
    return Sp, np.kron(Sv, np.eye(3))


def _cost_weights(cfg: PlannerConfig) -> np.ndarray:
    w = np.full(cfg.horizon, cfg.stage_goal_weight)
    w[-1] = cfg.terminal_weight
    return w


@lru_cache(maxsize=8)
def _hessian(cfg: PlannerConfig) -> np.ndarray:
    Sp, _ = _matrices(cfg.horizon, cfg.dt)
    w = _cost_weights(cfg)
    H_axis = 2.0 * (Sp.T @ (w[:, None] * Sp) + cfg.input_weight * np.eye(cfg.horizon))
    # keeps the Newton solve well-posed if input_weight is configured to zero
    H_axis += 1e-10 * np.eye(cfg.horizon)
    return np.kron(H_axis, np.eye(3))


def rollout(initial: RobotState, inputs: Sequence[ControlInput] | np.ndarray,
            cfg: PlannerConfig, start_step: int = 0) -> Trajectory:
    """Integrate an input sequence with the true (clamped) world dynamics."""
    U = _as_input_array(inputs)
    P, _ = _rollout_arrays(initial.position, initial.velocity, U, cfg.dt, cfg.v_max)
    return Trajectory(start_step=start_step, positions=P)


def _as_input_array(inputs) -> np.ndarray:
    if isinstance(inputs, np.ndarray):
        return np.asarray(inputs, dtype=float)
    return np.array([u.acceleration for u in inputs], dtype=float)


def _rollout_arrays(p0, v0, U, dt, v_max):
    # same arithmetic, in the same order, as world.step_dynamics
    N = U.shape[0]
    P = np.empty((N, 3))
    V = np.empty((N, 3))
    p, v = p0, v0
    for k in range(N):
        p = p + dt * v + (0.5 * dt * dt) * U[k]
        v = np.clip(v + dt * U[k], -v_max, v_max)
        P[k] = p
        V[k] = v
    return P, V


# --- convex subproblem -------------------------------------------------------


def _solve_box_hinge_qp(H, g, A, b, lo, hi, x0, row_weights,
                        max_iters=60, grad_tol=1e-9):
    """Minimize 0.5 x'Hx + g'x + sum_i w_i*max(0, b_i - a_i.x)^2 over the box.

    Active-set projected Newton: on the current piece the objective is an
    exact quadratic, so each iteration solves for its minimizer over the free
    coordinates, projects into the box and backtracks on the true objective.
    Falls back to a projected gradient step if the Newton segment stalls.
    """
    n = x0.size
    x = np.clip(x0, lo, hi)
    have_rows = A.shape[0] > 0
    w = row_weights

    def objective(z):
        val = 0.5 * z @ (H @ z) + g @ z
        if have_rows:
            h = np.maximum(b - A @ z, 0.0)
            val += float(w @ (h * h))
        return val

    fx = objective(x)
    tol_bound = 1e-12
    scale = 1.0 + float(np.abs(g).max(initial=0.0))
    for _ in range(max_iters):
        if have_rows:
            r = b - A @ x
            act = r > 0.0
        else:
            act = np.zeros(0, dtype=bool)
        grad = H @ x + g
        if act.any():
            Aact = A[act]
            wact = w[act]
            grad -= 2.0 * (Aact.T @ (wact * r[act]))
        clamped = ((x <= lo + tol_bound) & (grad > 0)) | (
            (x >= hi - tol_bound) & (grad < 0)
        )
        free = ~clamped
        if not free.any():
            break
        if float(np.abs(grad[free]).max()) <= grad_tol * scale:
            break
        Hp = H.copy()
        if act.any():
            Hp += 2.0 * (Aact.T @ (wact[:, None] * Aact))
        d = np.zeros(n)
        idx = np.ix_(free, free)
        d[free] = np.linalg.solve(Hp[idx], -grad[free])

        improved = False
        for direction in (d, -grad):
            alpha = 1.0
            for _ in range(40):
                xc = np.clip(x + alpha * direction, lo, hi)
                fc = objective(xc)
                if fc < fx - 1e-15 * (1.0 + abs(fx)):
                    x, fx = xc, fc
                    improved = True
                    break
                alpha *= 0.5
            if improved:
                break
        if not improved:
            break
    return x


# --- SQP machinery -----------------------------------------------------------


@dataclass
class SqpProblem:
    """Everything one robot's solve needs besides the current iterate."""

    p0: np.ndarray
    v0: np.ndarray
    goal: np.ndarray
    others: np.ndarray  # (m, N, 3) assumed teammate positions, m may be 0
    min_separation: float
    cfg: PlannerConfig
    growth: Optional[np.ndarray] = None       # (m,) separation inflation rate
    penalty_scale: Optional[np.ndarray] = None  # (m,) slack penalty credence

    def __post_init__(self):
        self._weights = _cost_weights(self.cfg)
        self._H = _hessian(self.cfg)
        Sp, Sv_big = _matrices(self.cfg.horizon, self.cfg.dt)
        self._Sp = Sp
        N = self.cfg.horizon
        m = self.others.shape[0]
        ks = np.arange(1, N + 1)
        # a communicated plan is the teammate's real intention, but it will be
        # replanned every step: required separation grows with lookahead at
        # the per-teammate rate chosen by the caller
        if self.growth is None:
            self.growth = np.full(m, self.cfg.separation_growth)
        if self.penalty_scale is None:
            self.penalty_scale = np.ones(m)
        self._rho = self.cfg.slack_penalty * np.asarray(self.penalty_scale)
        self._sep = (
            self.min_separation
            + np.asarray(self.growth)[:, None] * (ks * self.cfg.dt)[None, :]
        )  # (m, N)
        self._free_pos = self.p0[None, :] + (ks * self.cfg.dt)[:, None] * self.v0
        err = self._free_pos - self.goal[None, :]
        self._g = (2.0 * Sp.T @ (self._weights[:, None] * err)).reshape(-1)
        # velocity box rows are affine in U and fixed per solve
        v0_tiled = np.tile(self.v0, N)
        self._A_vel = np.vstack([-Sv_big, Sv_big])
        self._b_vel = np.concatenate(
            [v0_tiled - self.cfg.v_max, -self.cfg.v_max - v0_tiled]
        )
        self._row_weights = np.concatenate(
            [np.full(6 * N, self.cfg.slack_penalty), np.repeat(self._rho, N)]
        )

    def true_cost(self, P: np.ndarray, U: np.ndarray) -> float:
        err = P - self.goal[None, :]
        cost = float(np.sum(self._weights * np.sum(err * err, axis=1)))
        cost += self.cfg.input_weight * float(np.sum(U * U))
        return cost

    def violations(self, P: np.ndarray) -> np.ndarray:
        """Per-(teammate, step) shortfall below the separation target."""
        if self.others.shape[0] == 0:
            return np.zeros((0, self.cfg.horizon))
        diff = P[None, :, :] - self.others
        dist = np.linalg.norm(diff, axis=2)
        return np.maximum(self._sep - dist, 0.0)

    def merit(self, P: np.ndarray, U: np.ndarray) -> float:
        viol = self.violations(P)
        return self.true_cost(P, U) + float(self._rho @ viol.sum(axis=1))

    def linearized_rows(self, P: np.ndarray):
        """Halfspace rows a.U >= b from linearizing separation at rollout P."""
        rows_a = [self._A_vel]
        rows_b = [self._b_vel]
        N = self.cfg.horizon
        for j, q in enumerate(self.others):
            diff = P - q
            dist = np.linalg.norm(diff, axis=1)
            normals = np.where(
                dist[:, None] > 1e-9,
                diff / np.maximum(dist, 1e-9)[:, None],
                np.array([1.0, 0.0, 0.0]),
            )
            # row k is kron(Sp[k], normal_k)
            rows_a.append(
                np.einsum("kj,kc->kjc", self._Sp, normals).reshape(N, 3 * N)
            )
            rows_b.append(
                self._sep[j] + np.einsum("kc,kc->k", normals, q - self._free_pos)
            )
        return np.vstack(rows_a), np.concatenate(rows_b)


def solve_sqp_iteration(
    current_inputs: np.ndarray, problem: SqpProblem, cfg: PlannerConfig
) -> tuple[np.ndarray, float]:
    """One linearize-and-solve pass; merit never increases.

    Returns the accepted input sequence and the merit decrease achieved
    (zero when the iterate is already a fixed point).
    """
    U = np.clip(_as_input_array(current_inputs), -cfg.u_max, cfg.u_max)
    P, _ = _rollout_arrays(problem.p0, problem.v0, U, cfg.dt, cfg.v_max)
    merit = problem.merit(P, U)
    A, b = problem.linearized_rows(P)
    x = _solve_box_hinge_qp(
        problem._H,
        problem._g,
        A,
        b,
        -cfg.u_max,
        cfg.u_max,
        U.reshape(-1),
        problem._row_weights,
    )
    U_cand = x.reshape(-1, 3)

    # backtracking on the exact penalty merit of the true (clamped) rollout
    alpha = 1.0
    for _ in range(20):
        U_try = U + alpha * (U_cand - U)
        P_try, _ = _rollout_arrays(problem.p0, problem.v0, U_try, cfg.dt, cfg.v_max)
        m_try = problem.merit(P_try, U_try)
        if m_try <= merit + 1e-12 * (1.0 + abs(merit)):
            return U_try, merit - m_try
        alpha *= 0.5
    return U, 0.0


def plan(
    self_state: RobotState,
    others: Sequence[Trajectory],
    config: PlannerConfig,
    warm_start: Optional[np.ndarray] = None,
    start_step: int = 0,
    growth: Optional[Sequence[float]] = None,
    penalty_scale: Optional[Sequence[float]] = None,
) -> PlanResult:
    """Solve the receding-horizon problem for one robot.

    ``others`` are the trajectories this robot assumes for its teammates,
    already aligned so element k is the teammate's position at absolute step
    start_step + k + 1. ``growth`` optionally sets the per-teammate
    separation inflation rate (defaults to config.separation_growth for all);
    ``penalty_scale`` scales the slack penalty per teammate, expressing how
    much the assumed trajectory is believed. Infeasibility never raises:
    after sqp_max_iters the best iterate is returned with converged=False and
    the remaining shortfall reported.
    """
    N = config.horizon
    for t in others:
        if len(t) != N:
            raise ValueError("teammate trajectories must match the horizon")
    q = (
        np.array([t.positions for t in others])
        if others
        else np.zeros((0, N, 3))
    )
    problem = SqpProblem(
        p0=self_state.position,
        v0=self_state.velocity,
        goal=self_state.goal,
        others=q,
        min_separation=2.0 * self_state.radius + config.safety_margin,
        cfg=config,
        growth=None if growth is None else np.asarray(growth, dtype=float),
        penalty_scale=(None if penalty_scale is None
                       else np.asarray(penalty_scale, dtype=float)),
    )
    if warm_start is not None:
        U0 = np.clip(np.asarray(warm_start, dtype=float), -config.u_max, config.u_max)
        if U0.shape != (N, 3):
            raise ValueError("warm start must be an (N, 3) input sequence")
    else:
        U0 = np.zeros((N, 3))

    U, converged, merit = _sqp_loop(U0, problem, config)
    P, _ = _rollout_arrays(problem.p0, problem.v0, U, config.dt, config.v_max)
    max_viol = float(problem.violations(P).max(initial=0.0))

    # A stale warm start can sit on the far side of a moved constraint, where
    # the linearization points through the teammate instead of around it. If
    # the solve still ends badly violated, retry from a maximum-braking start
    # (whose rollout stays on the near side) and keep the better merit.
    viol_budget = config.safety_margin + config.convergence_tol
    if config.brake_retry and max_viol >= viol_budget and problem.others.shape[0] > 0:
        U_b, conv_b, merit_b = _sqp_loop(
            _braking_inputs(self_state.velocity, config), problem, config
        )
        if merit_b < merit:
            U, converged = U_b, conv_b
            P, _ = _rollout_arrays(problem.p0, problem.v0, U, config.dt,
                                   config.v_max)
            max_viol = float(problem.violations(P).max(initial=0.0))

    return PlanResult(
        trajectory=Trajectory(start_step=start_step, positions=P),
        first_input=ControlInput(U[0].copy()),
        converged=converged,
        max_constraint_violation=max_viol,
        inputs=U,
    )


def _braking_inputs(v0: np.ndarray, cfg: PlannerConfig) -> np.ndarray:
    """Input sequence that brings the robot to rest as fast as the box allows."""
    U = np.zeros((cfg.horizon, 3))
    v = v0.copy()
    for k in range(cfg.horizon):
        U[k] = np.clip(-v / cfg.dt, -cfg.u_max, cfg.u_max)
        v = v + cfg.dt * U[k]
    return U


def _sqp_loop(U: np.ndarray, problem: SqpProblem,
              config: PlannerConfig) -> tuple[np.ndarray, bool, float]:
    # converged means the merit has stalled AND the planned separation obeys
    # the contract dist >= 2r - convergence_tol, i.e. the shortfall against
    # the margin-inflated target stays within margin + tol
    viol_budget = config.safety_margin + config.convergence_tol
    converged = False
    for _ in range(config.sqp_max_iters):
        U, decrease = solve_sqp_iteration(U, problem, config)
        P, _ = _rollout_arrays(problem.p0, problem.v0, U, config.dt, config.v_max)
        if decrease < config.convergence_tol:
            converged = float(problem.violations(P).max(initial=0.0)) < viol_budget
            break
    P, _ = _rollout_arrays(problem.p0, problem.v0, U, config.dt, config.v_max)
    return U, converged, problem.merit(P, U)


def shift_warm_start(inputs: np.ndarray) -> np.ndarray:
    """Receding-horizon warm start: drop the executed input, repeat the last."""
    return np.vstack([inputs[1:], inputs[-1:]])
