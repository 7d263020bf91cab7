"""Centralized-training, decentralized-execution actor-critic.

Each robot owns an actor scoring its teammates from the local observation and
a critic that values joint observations plus joint actions. Training is
off-policy from a shared replay buffer of team transitions; execution needs
only the actors. Critics always consume the continuous scores, both for the
agent's own relaxed action and for the stored teammate slots, because the
deterministic policy gradient needs d(Q)/d(action); the binary thresholded
requests only ever affect the environment transition.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .neural import (
    CHECKPOINT_VERSION,
    GradientBuffer,
    MlpParams,
    OptimizerState,
    _pack_mlp,
    _pack_opt,
    _unpack_mlp,
    _unpack_opt,
    backward,
    forward,
    init_mlp,
    init_optimizer,
    optimizer_step,
    soft_update,
)


@dataclass(frozen=True)
class MaddpgConfig:
    n_agents: int = 4
    obs_dim: int = 24
    gamma: float = 0.98
    tau: float = 0.01
    actor_lr: float = 0.01
    critic_lr: float = 0.01
    hidden: int = 64
    buffer_capacity: int = 1_000_000
    batch_size: int = 1024
    warmup: int = 1024
    train_every: int = 100
    logit_reg: float = 1e-3

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")

    @property
    def act_dim(self) -> int:
        return self.n_agents - 1

    @property
    def critic_in_dim(self) -> int:
        return self.n_agents * (self.obs_dim + self.act_dim)


@dataclass
class AgentNets:
    actor: MlpParams
    actor_target: MlpParams
    critic: MlpParams
    critic_target: MlpParams
    actor_opt: OptimizerState
    critic_opt: OptimizerState


def init_agent_nets(cfg: MaddpgConfig, rng: np.random.Generator) -> list[AgentNets]:
    agents = []
    for _ in range(cfg.n_agents):
        actor = init_mlp([cfg.obs_dim, cfg.hidden, cfg.hidden, cfg.act_dim],
                         "sigmoid", rng)
        critic = init_mlp([cfg.critic_in_dim, cfg.hidden, cfg.hidden, 1],
                          "identity", rng)
        agents.append(
            AgentNets(
                actor=actor,
                actor_target=actor.copy(),
                critic=critic,
                critic_target=critic.copy(),
                actor_opt=init_optimizer(actor, cfg.actor_lr),
                critic_opt=init_optimizer(critic, cfg.critic_lr),
            )
        )
    return agents


@dataclass
class TransitionSample:
    """One team step: joint observations, scores, executed requests, reward."""

    obs: np.ndarray          # (n, obs_dim)
    scores: np.ndarray       # (n, n-1), continuous actor outputs
    matrix: np.ndarray       # (n, n) executed binary requests
    reward: float
    next_obs: np.ndarray     # (n, obs_dim)
    terminal: bool           # episode ended after this transition
    collision: bool          # ended by collision: cuts the bootstrap

    def __post_init__(self):
        if not np.isfinite(self.reward):
            raise ValueError("reward must be finite")
        if ((self.scores <= 0.0) | (self.scores >= 1.0)).any():
            raise ValueError("scores must lie strictly in (0, 1)")
        n = self.obs.shape[0]
        if self.scores.shape != (n, n - 1) or self.matrix.shape != (n, n):
            raise ValueError("score/matrix shapes inconsistent with team size")


class ReplayBuffer:
    """Fixed-capacity ring of team transitions with uniform sampling."""

    def __init__(self, capacity: int, n_agents: int, obs_dim: int):
        self.capacity = capacity
        self.n = n_agents
        self.obs = np.empty((capacity, n_agents, obs_dim))
        self.scores = np.empty((capacity, n_agents, n_agents - 1))
        self.matrix = np.empty((capacity, n_agents, n_agents), dtype=np.int8)
        self.reward = np.empty(capacity)
        self.next_obs = np.empty((capacity, n_agents, obs_dim))
        self.terminal = np.empty(capacity, dtype=bool)
        self.cut = np.empty(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, sample: TransitionSample) -> None:
        i = self.cursor
        self.obs[i] = sample.obs
        self.scores[i] = sample.scores
        self.matrix[i] = sample.matrix
        self.reward[i] = sample.reward
        self.next_obs[i] = sample.next_obs
        self.terminal[i] = sample.terminal
        self.cut[i] = sample.collision
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, batch_size: int) -> dict:
        idx = rng.integers(0, self.size, size=batch_size)
        return {
            "obs": self.obs[idx],
            "scores": self.scores[idx],
            "reward": self.reward[idx],
            "next_obs": self.next_obs[idx],
            "cut": self.cut[idx].astype(float),
        }


def act_explore(actor: MlpParams, z_i: np.ndarray,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Score teammates, then threshold at one shared delta' ~ U(0,1).

    The same draw applies to every score the robot emits this step, so
    request probabilities equal the scores themselves.
    """
    scores, _ = forward(actor, z_i)
    delta = rng.random()
    return scores, (scores > delta).astype(int)


def _joint_input(obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
    B = obs.shape[0]
    return np.concatenate([obs.reshape(B, -1), actions.reshape(B, -1)], axis=1)


def critic_target(i: int, batch: dict, nets: list[AgentNets],
                  gamma: float) -> np.ndarray:
    """Bootstrapped values y = R + gamma * (1 - cut) * Qbar_i(z', mu_bar(z'))."""
    next_obs = batch["next_obs"]
    B, n, _ = next_obs.shape
    next_actions = np.empty((B, n, n - 1))
    for j in range(n):
        next_actions[:, j], _ = forward(nets[j].actor_target, next_obs[:, j])
    q_next, _ = forward(nets[i].critic_target, _joint_input(next_obs, next_actions))
    return batch["reward"] + gamma * (1.0 - batch["cut"]) * q_next[:, 0]


def update_critic(i: int, nets: list[AgentNets], batch: dict,
                  gamma: float) -> float:
    """One squared-error step on agent i's critic; returns the pre-step loss."""
    y = critic_target(i, batch, nets, gamma)
    xa = _joint_input(batch["obs"], batch["scores"])
    q, cache = forward(nets[i].critic, xa)
    err = q[:, 0] - y
    loss = float(np.mean(err * err))
    gout = (2.0 * err / err.size)[:, None]
    grads = backward(nets[i].critic, cache, gout)
    optimizer_step(nets[i].critic, grads, nets[i].critic_opt)
    return loss


def _actor_q_chain(i: int, nets: list[AgentNets], batch: dict):
    """Forward the batch through actor i and its critic; return the pieces."""
    obs = batch["obs"]
    B, n, _ = obs.shape
    a_i, actor_cache = forward(nets[i].actor, obs[:, i])
    actions = batch["scores"].copy()
    actions[:, i] = a_i
    q, critic_cache = forward(nets[i].critic, _joint_input(obs, actions))
    gout = np.full((B, 1), 1.0 / B)
    critic_grads = backward(nets[i].critic, critic_cache, gout)
    a_cols = slice(n * obs.shape[2] + i * (n - 1),
                   n * obs.shape[2] + (i + 1) * (n - 1))
    ga = critic_grads.d_input[:, a_cols]
    return float(np.mean(q)), a_i, actor_cache, ga


def actor_gradient(i: int, nets: list[AgentNets],
                   batch: dict) -> tuple[float, float, GradientBuffer]:
    """Gradient of E[Q_i] w.r.t. agent i's actor parameters.

    Agent i's action slot is replaced by its live actor output; the other
    slots keep the stored scores. Returns (objective, mean score, gradient).
    """
    objective, a_i, actor_cache, ga = _actor_q_chain(i, nets, batch)
    actor_grads = backward(nets[i].actor, actor_cache, ga)
    return objective, float(np.mean(a_i)), actor_grads


def update_actor(i: int, nets: list[AgentNets], batch: dict,
                 logit_reg: float = 1e-3) -> tuple[float, float]:
    """Ascend E[Q_i] minus a small pre-activation penalty.

    The penalty (mean squared head logit, cited-baseline coefficient) keeps
    sigmoid scores out of saturation, where the deterministic policy gradient
    would vanish and freeze the actor. The critic itself is not updated here.
    """
    objective, a_i, actor_cache, ga = _actor_q_chain(i, nets, batch)
    activations, pre, _ = actor_cache
    logits = pre[-1]
    # minimizing: -(mean Q) + logit_reg * mean(logits^2)
    reg_delta = (2.0 * logit_reg / logits.size) * logits
    grads = backward(nets[i].actor, actor_cache, -ga, logit_gradient=reg_delta)
    optimizer_step(nets[i].actor, grads, nets[i].actor_opt)
    return objective, float(np.mean(a_i))


def train_step(nets: list[AgentNets], buffer: ReplayBuffer, cfg: MaddpgConfig,
               rng: np.random.Generator) -> dict:
    """Critic step, actor step and target blends for every agent."""
    if len(buffer) < max(cfg.warmup, cfg.batch_size):
        return {"trained": False}
    diag = {"trained": True, "critic_loss": [], "actor_objective": [],
            "mean_score": []}
    for i in range(cfg.n_agents):
        batch = buffer.sample(rng, cfg.batch_size)
        diag["critic_loss"].append(update_critic(i, nets, batch, cfg.gamma))
        objective, mean_score = update_actor(i, nets, batch, cfg.logit_reg)
        diag["actor_objective"].append(objective)
        diag["mean_score"].append(mean_score)
        soft_update(nets[i].actor_target, nets[i].actor, cfg.tau)
        soft_update(nets[i].critic_target, nets[i].critic, cfg.tau)
    return diag


# --- checkpointing -----------------------------------------------------------


def save_agents(path, nets: list[AgentNets], extra: Optional[dict] = None,
                buffer: Optional[ReplayBuffer] = None) -> None:
    arrays: dict = {}
    meta = {"version": CHECKPOINT_VERSION, "n_agents": len(nets), "agents": []}
    for i, agent in enumerate(nets):
        meta["agents"].append({
            "actor": _pack_mlp(f"a{i}_actor", agent.actor, arrays),
            "actor_target": _pack_mlp(f"a{i}_actor_t", agent.actor_target, arrays),
            "critic": _pack_mlp(f"a{i}_critic", agent.critic, arrays),
            "critic_target": _pack_mlp(f"a{i}_critic_t", agent.critic_target, arrays),
            "actor_opt": _pack_opt(f"a{i}_aopt", agent.actor_opt, arrays),
            "critic_opt": _pack_opt(f"a{i}_copt", agent.critic_opt, arrays),
        })
    if buffer is not None:
        meta["buffer"] = {"cursor": buffer.cursor, "size": buffer.size,
                          "capacity": buffer.capacity}
    if extra:
        meta["extra"] = extra
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_agents(path) -> tuple[list[AgentNets], dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        nets = []
        for i, am in enumerate(meta["agents"]):
            nets.append(AgentNets(
                actor=_unpack_mlp(f"a{i}_actor", am["actor"], data),
                actor_target=_unpack_mlp(f"a{i}_actor_t", am["actor_target"], data),
                critic=_unpack_mlp(f"a{i}_critic", am["critic"], data),
                critic_target=_unpack_mlp(f"a{i}_critic_t", am["critic_target"], data),
                actor_opt=_unpack_opt(f"a{i}_aopt", am["actor_opt"], data),
                critic_opt=_unpack_opt(f"a{i}_copt", am["critic_opt"], data),
            ))
    return nets, meta
