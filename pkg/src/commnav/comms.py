"""Communication policies and the request matrix they produce.

Four policies decide, per step, which teammates each robot asks for a plan:
broadcast everything, stay silent, request inside a distance threshold, or a
learned per-robot scoring network thresholded at delta (or at a uniformly
random delta' during exploration). Requests are unilateral; the matrix need
not be symmetric.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .neural import MlpParams, forward
from .world import WorldState


class PolicyError(ValueError):
    """Raised when a policy cannot be evaluated against the given state."""


@dataclass
class CommMatrix:
    """n x n binary request matrix; entry (i, j) = robot i asks robot j."""

    entries: np.ndarray

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=int)
        n, m = self.entries.shape
        if n != m:
            raise ValueError("comm matrix must be square")
        if np.trace(np.abs(self.entries)) != 0:
            raise ValueError("a robot never requests itself")
        if not np.isin(self.entries, (0, 1)).all():
            raise ValueError("comm matrix entries must be 0 or 1")

    @classmethod
    def zeros(cls, n: int) -> "CommMatrix":
        return cls(np.zeros((n, n), dtype=int))

    @classmethod
    def full(cls, n: int) -> "CommMatrix":
        return cls(np.ones((n, n), dtype=int) - np.eye(n, dtype=int))

    def row_without_self(self, i: int) -> np.ndarray:
        """Robot i's request flags over teammates, ascending index."""
        return np.delete(self.entries[i], i)


def comm_cost(matrix: CommMatrix) -> int:
    """Total number of requests in the step."""
    return int(matrix.entries.sum())


@dataclass(frozen=True)
class FullComm:
    pass


@dataclass(frozen=True)
class NoComm:
    pass


@dataclass(frozen=True)
class DistanceBased:
    epsilon: float

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass
class Learned:
    actors: list[MlpParams]
    delta: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must be inside (0, 1)")


PolicyKind = Union[FullComm, NoComm, DistanceBased, Learned]


def decide_comm_scores(
    policy: PolicyKind,
    observations: Sequence[np.ndarray],
    world: WorldState,
    explore: Optional[np.random.Generator] = None,
) -> tuple[CommMatrix, Optional[np.ndarray]]:
    """Evaluate a policy; also returns the raw actor scores for Learned.

    With an exploration source, each robot draws one delta' ~ U(0,1) for the
    step and applies it to all of its scores; without one the configured
    delta is used. Scores are None for the non-learned policies.
    """
    n = world.n
    entries = np.zeros((n, n), dtype=int)
    scores = None
    if isinstance(policy, FullComm):
        entries = np.ones((n, n), dtype=int) - np.eye(n, dtype=int)
    elif isinstance(policy, NoComm):
        pass
    elif isinstance(policy, DistanceBased):
        pos = world.positions()
        for i in range(n):
            for j in range(n):
                if i != j and np.linalg.norm(pos[i] - pos[j]) < policy.epsilon:
                    entries[i, j] = 1
    elif isinstance(policy, Learned):
        if len(policy.actors) != n:
            raise PolicyError("need one actor per robot")
        scores = np.empty((n, n - 1))
        for i in range(n):
            s, _ = forward(policy.actors[i], observations[i])
            if s.shape != (n - 1,):
                raise PolicyError(
                    f"actor {i} produced {s.shape}, expected ({n - 1},)"
                )
            scores[i] = s
            threshold = explore.random() if explore is not None else policy.delta
            row = s > threshold
            others = [j for j in range(n) if j != i]
            entries[i, others] = row.astype(int)
    else:
        raise PolicyError(f"unknown policy {policy!r}")
    return CommMatrix(entries), scores


def decide_comm(
    policy: PolicyKind,
    observations: Sequence[np.ndarray],
    world: WorldState,
    explore: Optional[np.random.Generator] = None,
) -> CommMatrix:
    matrix, _ = decide_comm_scores(policy, observations, world, explore)
    return matrix
