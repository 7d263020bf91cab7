"""Fully-connected networks with exact backprop, written on plain numpy.

Actors and critics share one architecture family: affine layers with
rectified-linear hidden activations, a sigmoid head for actors (scores in
(0,1)) and an identity head for critics. Backward passes are hand-derived
chain rule; ``gradient_check`` in selfcheck verifies them against central
finite differences.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np


class ShapeError(ValueError):
    """Raised when tensors do not chain through the network."""


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    # keep outputs strictly inside (0, 1) even for extreme pre-activations
    return np.clip(out, 1e-12, 1.0 - 1e-12)


@dataclass
class MlpParams:
    """Layer weights (out, in) and biases (out,), plus the head activation."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output_activation: str = "identity"  # "identity" | "sigmoid"

    def __post_init__(self):
        if self.output_activation not in ("identity", "sigmoid"):
            raise ValueError(f"unknown activation {self.output_activation!r}")
        if len(self.weights) != len(self.biases):
            raise ShapeError("weights and biases must pair up")
        for l in range(1, len(self.weights)):
            if self.weights[l].shape[1] != self.weights[l - 1].shape[0]:
                raise ShapeError("layer dimensions do not chain")
        for W, b in zip(self.weights, self.biases):
            if b.shape != (W.shape[0],):
                raise ShapeError("bias shape must match layer output")
            if not (np.isfinite(W).all() and np.isfinite(b).all()):
                raise ValueError("parameters must be finite")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [W.shape[0] for W in self.weights]

    def copy(self) -> "MlpParams":
        return MlpParams(
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.output_activation,
        )


@dataclass
class GradientBuffer:
    """Parameter gradients plus the gradient w.r.t. the network input."""

    d_weights: list[np.ndarray]
    d_biases: list[np.ndarray]
    d_input: np.ndarray

    def all_finite(self) -> bool:
        return (
            all(np.isfinite(g).all() for g in self.d_weights)
            and all(np.isfinite(g).all() for g in self.d_biases)
            and bool(np.isfinite(self.d_input).all())
        )


def init_mlp(layer_sizes, output_activation, rng: np.random.Generator) -> MlpParams:
    """Uniform +-1/sqrt(fan_in) weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, output_activation)


def forward(params: MlpParams, x: np.ndarray):
    """Evaluate the network; returns (output, cache) for an exact backward.

    Accepts a single vector (d,) or a batch (B, d); the output matches.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    a = x[None, :] if single else x
    if a.ndim != 2 or a.shape[1] != params.input_dim:
        raise ShapeError(
            f"input dim {a.shape[-1] if a.ndim else None} != {params.input_dim}"
        )
    activations = [a]
    pre = []
    last = len(params.weights) - 1
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ W.T + b
        pre.append(z)
        if l < last:
            a = np.maximum(z, 0.0)
        elif params.output_activation == "sigmoid":
            a = _sigmoid(z)
        else:
            a = z
        activations.append(a)
    out = a[0] if single else a
    cache = (activations, pre, single)
    return out, cache


def backward(params: MlpParams, cache, output_gradient: np.ndarray,
             logit_gradient: Optional[np.ndarray] = None) -> GradientBuffer:
    """Gradients of sum(output_gradient * output) w.r.t. parameters and input.

    For batched caches the parameter gradients are summed over the batch;
    scale ``output_gradient`` by 1/B upstream for a mean. ``logit_gradient``
    optionally adds a gradient expressed directly in the head's
    pre-activation space (used to regularize sigmoid actors away from
    saturation, where the output-space gradient vanishes).
    """
    activations, pre, single = cache
    if len(activations) != len(params.weights) + 1:
        raise ShapeError("cache does not match this network")
    g = np.asarray(output_gradient, dtype=float)
    if single:
        g = g[None, :]
    if g.shape != activations[-1].shape:
        raise ShapeError("output gradient shape mismatch")

    if params.output_activation == "sigmoid":
        y = activations[-1]
        delta = g * y * (1.0 - y)
    else:
        delta = g
    if logit_gradient is not None:
        lg = np.asarray(logit_gradient, dtype=float)
        if single:
            lg = lg[None, :]
        delta = delta + lg

    d_weights = [None] * len(params.weights)
    d_biases = [None] * len(params.weights)
    for l in range(len(params.weights) - 1, -1, -1):
        a_in = activations[l]
        if a_in.shape != pre[l].shape and a_in.shape[1] != params.weights[l].shape[1]:
            raise ShapeError("stale cache")
        d_weights[l] = delta.T @ a_in
        d_biases[l] = delta.sum(axis=0)
        d_a = delta @ params.weights[l]
        if l > 0:
            delta = d_a * (pre[l - 1] > 0.0)
    d_input = d_a[0] if single else d_a
    return GradientBuffer(d_weights, d_biases, d_input)


@dataclass
class OptimizerState:
    """Adaptive-moment state for one parameter set."""

    m_w: list[np.ndarray]
    v_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_b: list[np.ndarray]
    step: int = 0
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    skipped: int = 0


def init_optimizer(params: MlpParams, learning_rate: float = 0.01,
                   beta1: float = 0.9, beta2: float = 0.999,
                   epsilon: float = 1e-8) -> OptimizerState:
    return OptimizerState(
        m_w=[np.zeros_like(W) for W in params.weights],
        v_w=[np.zeros_like(W) for W in params.weights],
        m_b=[np.zeros_like(b) for b in params.biases],
        v_b=[np.zeros_like(b) for b in params.biases],
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
    )


def optimizer_step(params: MlpParams, grads: GradientBuffer,
                   opt: OptimizerState) -> bool:
    """Bias-corrected adaptive-moment update, in place.

    Returns False (and leaves everything untouched except the skip counter)
    when any gradient entry is non-finite.
    """
    if not grads.all_finite():
        opt.skipped += 1
        return False
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    for l in range(len(params.weights)):
        for p, g, m, v in (
            (params.weights[l], grads.d_weights[l], opt.m_w[l], opt.v_w[l]),
            (params.biases[l], grads.d_biases[l], opt.m_b[l], opt.v_b[l]),
        ):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= opt.learning_rate * (m / c1) / (np.sqrt(v / c2) + opt.epsilon)
    return True


def soft_update(target: MlpParams, online: MlpParams, tau: float) -> MlpParams:
    """target <- (1 - tau) * target + tau * online, element-wise, in place."""
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must be in (0, 1]")
    for Wt, Wo in zip(target.weights, online.weights):
        if Wt.shape != Wo.shape:
            raise ShapeError("target and online networks differ in shape")
        Wt *= 1.0 - tau
        Wt += tau * Wo
    for bt, bo in zip(target.biases, online.biases):
        bt *= 1.0 - tau
        bt += tau * bo
    return target


# --- checkpoint container ----------------------------------------------------

CHECKPOINT_VERSION = 1


def _pack_mlp(prefix: str, params: MlpParams, arrays: dict) -> dict:
    meta = {"activation": params.output_activation,
            "layers": params.layer_sizes()}
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"{prefix}_w{l}"] = W
        arrays[f"{prefix}_b{l}"] = b
    return meta


def _unpack_mlp(prefix: str, meta: dict, arrays) -> MlpParams:
    n_layers = len(meta["layers"]) - 1
    weights = [np.array(arrays[f"{prefix}_w{l}"]) for l in range(n_layers)]
    biases = [np.array(arrays[f"{prefix}_b{l}"]) for l in range(n_layers)]
    return MlpParams(weights, biases, meta["activation"])


def _pack_opt(prefix: str, opt: OptimizerState, arrays: dict) -> dict:
    for l in range(len(opt.m_w)):
        arrays[f"{prefix}_mw{l}"] = opt.m_w[l]
        arrays[f"{prefix}_vw{l}"] = opt.v_w[l]
        arrays[f"{prefix}_mb{l}"] = opt.m_b[l]
        arrays[f"{prefix}_vb{l}"] = opt.v_b[l]
    return {
        "step": opt.step,
        "learning_rate": opt.learning_rate,
        "beta1": opt.beta1,
        "beta2": opt.beta2,
        "epsilon": opt.epsilon,
        "skipped": opt.skipped,
        "n_layers": len(opt.m_w),
    }


def _unpack_opt(prefix: str, meta: dict, arrays) -> OptimizerState:
    n = meta["n_layers"]
    return OptimizerState(
        m_w=[np.array(arrays[f"{prefix}_mw{l}"]) for l in range(n)],
        v_w=[np.array(arrays[f"{prefix}_vw{l}"]) for l in range(n)],
        m_b=[np.array(arrays[f"{prefix}_mb{l}"]) for l in range(n)],
        v_b=[np.array(arrays[f"{prefix}_vb{l}"]) for l in range(n)],
        step=meta["step"],
        learning_rate=meta["learning_rate"],
        beta1=meta["beta1"],
        beta2=meta["beta2"],
        epsilon=meta["epsilon"],
        skipped=meta["skipped"],
    )


def save_mlp(path, params: MlpParams, opt: Optional[OptimizerState] = None):
    """Write one network (and optionally its optimizer) to an .npz file."""
    arrays: dict = {}
    meta = {
        "version": CHECKPOINT_VERSION,
        "net": _pack_mlp("net", params, arrays),
    }
    if opt is not None:
        meta["opt"] = _pack_opt("opt", opt, arrays)
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_mlp(path):
    """Round-trips save_mlp bit-exactly; returns (params, opt_or_None)."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        params = _unpack_mlp("net", meta["net"], data)
        opt = _unpack_opt("opt", meta["opt"], data) if "opt" in meta else None
    return params, opt
