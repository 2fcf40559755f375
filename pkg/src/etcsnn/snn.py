"""Leaky integrate-and-fire layers unrolled through time.

Each layer keeps a membrane potential ``v`` per neuron.  One step charges
the stored (post-reset) potential toward the input current,

    v_charged = (1 - 1/tau_m) * v + (1/tau_m) * i

then emits a spike wherever ``v_charged >= v_th`` and hard-resets spiked
entries to ``v_reset``.  The spike step function carries a triangular
pseudo-derivative of half-width ``1/surrogate_a`` peaking at the
threshold; the reset multiplier ``(1 - s)`` is wrapped in stop_gradient,
so that pseudo-derivative is the only path gradients take through a
spike.

Networks here are plain feedforward stacks of fully connected LIF layers
(no biases), finished by a non-spiking layer that leak-integrates its
input current with the same time constant.  That output layer's per-step
potentials are the network's logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import (
    CustomGradSpec,
    ShapeMismatchError,
    Tensor,
    add,
    custom_grad,
    matmul,
    mul,
    scale,
    stop_gradient,
    sub,
)
from .losses import TimestepOutputs

__all__ = [
    "LifParams",
    "LifState",
    "NetworkSpec",
    "surrogate_factor",
    "spike_fn",
    "lif_step",
    "lif_unroll",
    "init_weights",
    "initial_state",
]


@dataclass(frozen=True)
class LifParams:
    """Neuron constants, shared by every layer of a network."""

    tau_m: float = 2.0
    v_th: float = 0.5
    v_reset: float = 0.0
    surrogate_a: float = 2.0

    def __post_init__(self):
        if not self.tau_m >= 1.0:
            raise ValueError(f"tau_m must be >= 1, got {self.tau_m}")
        if not self.surrogate_a > 0.0:
            raise ValueError(f"surrogate_a must be > 0, got {self.surrogate_a}")

    @property
    def leak(self) -> float:
        return 1.0 - 1.0 / self.tau_m


def surrogate_factor(v: np.ndarray, params: LifParams) -> np.ndarray:
    """Triangular pseudo-derivative of the spike step, evaluated at ``v``.

    Zero outside ``|v - v_th| > 1/a``, rising linearly to ``a`` at the
    threshold.
    """
    a = params.surrogate_a
    dist = np.abs(v - params.v_th)
    return np.where(dist > 1.0 / a, 0.0, a - a * a * dist)


def spike_fn(v: Tensor, params: LifParams) -> Tensor:
    """Heaviside spike (1.0 where v >= v_th) with the triangular surrogate."""
    spec = CustomGradSpec(
        forward=lambda x: (x >= params.v_th).astype(np.float64),
        backward=lambda x: surrogate_factor(x, params),
    )
    return custom_grad(v, spec, name="spike")


@dataclass
class LifState:
    """Post-step layer state: stored potential and the spikes just emitted."""

    v: Tensor
    s: Tensor


def initial_state(batch: int, neurons: int, params: LifParams) -> LifState:
    v0 = Tensor(np.full((batch, neurons), params.v_reset))
    s0 = Tensor(np.zeros((batch, neurons)))
    return LifState(v=v0, s=s0)


def lif_step(
    state: LifState,
    input_current: Tensor,
    params: LifParams,
    spike: Callable[[Tensor], Tensor] | None = None,
) -> LifState:
    """Advance one timestep: charge, fire, hard-reset.

    ``spike`` overrides the nonlinearity (a test hook -- identity turns the
    layer into a plain leaky integrator).  With an override the reset is
    skipped, since the override's output need not be binary.
    """
    charged = add(scale(state.v, params.leak), scale(input_current, 1.0 / params.tau_m))
    if spike is not None:
        return LifState(v=charged, s=spike(charged))
    spiked = spike_fn(charged, params)
    # Hard reset: v -> v * (1 - s) + v_reset * s, with the spike factor
    # behind stop_gradient so the reset adds no second gradient path.
    keep = stop_gradient(sub(Tensor(np.ones_like(charged.data)), spiked))
    v_next = mul(charged, keep)
    if params.v_reset != 0.0:
        v_next = add(v_next, scale(stop_gradient(spiked), params.v_reset))
    return LifState(v=v_next, s=spiked)


@dataclass(frozen=True)
class NetworkSpec:
    """Shape of a feedforward LIF classifier.

    ``layer_sizes`` runs input -> hidden... -> classes; there must be at
    least one hidden layer.  The final layer is always the non-spiking
    integrator.
    """

    layer_sizes: tuple[int, ...]
    timesteps: int
    lif: LifParams = LifParams()
    output_mode: str = "integrator"

    def __post_init__(self):
        if len(self.layer_sizes) < 3:
            raise ValueError("need input, at least one hidden layer, and classes")
        if any(n < 1 for n in self.layer_sizes):
            raise ValueError(f"layer sizes must be positive, got {self.layer_sizes}")
        if self.layer_sizes[-1] < 2:
            raise ValueError("need at least 2 classes")
        if self.timesteps < 1:
            raise ValueError(f"timesteps must be >= 1, got {self.timesteps}")
        if self.output_mode != "integrator":
            raise ValueError(f"unsupported output_mode {self.output_mode!r}")

    @property
    def classes(self) -> int:
        return self.layer_sizes[-1]


def init_weights(spec: NetworkSpec, seed: int) -> list[Tensor]:
    """Uniform(+-sqrt(6/fan_in)) weights for each consecutive layer pair."""
    rng = np.random.default_rng(seed)
    weights = []
    for fan_in, fan_out in zip(spec.layer_sizes, spec.layer_sizes[1:]):
        bound = math.sqrt(6.0 / fan_in)
        weights.append(Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out))))
    return weights


def lif_unroll(
    spec: NetworkSpec,
    weights: Sequence[Tensor],
    inputs: np.ndarray,
    spike: Callable[[Tensor], Tensor] | None = None,
) -> TimestepOutputs:
    """Run the whole network over all timesteps as one differentiable graph.

    ``inputs`` is (batch, timesteps, input_dim) of per-step input currents.
    Hidden layers follow ``lif_step`` from zeroed state; the output layer
    leak-integrates its current with no threshold, spike, or reset.
    Returns the output layer's potential at every step.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 3:
        raise ShapeMismatchError(f"inputs must be (batch, T, dim), got {inputs.shape}")
    batch, steps, dim = inputs.shape
    if steps != spec.timesteps:
        raise ShapeMismatchError(f"inputs provide {steps} timesteps, spec wants {spec.timesteps}")
    if dim != spec.layer_sizes[0]:
        raise ShapeMismatchError(f"inputs have dim {dim}, spec wants {spec.layer_sizes[0]}")
    if len(weights) != len(spec.layer_sizes) - 1:
        raise ShapeMismatchError(
            f"got {len(weights)} weight matrices for {len(spec.layer_sizes)} layers"
        )
    for i, (w, fan_in, fan_out) in enumerate(
        zip(weights, spec.layer_sizes, spec.layer_sizes[1:])
    ):
        if w.shape != (fan_in, fan_out):
            raise ShapeMismatchError(
                f"weight {i} has shape {w.shape}, expected {(fan_in, fan_out)}"
            )

    lif = spec.lif
    hidden_sizes = spec.layer_sizes[1:-1]
    states = [initial_state(batch, n, lif) for n in hidden_sizes]
    v_out = Tensor(np.zeros((batch, spec.classes)))
    outputs: list[Tensor] = []
    for t in range(steps):
        signal = Tensor(inputs[:, t, :])
        for i in range(len(hidden_sizes)):
            current = matmul(signal, weights[i])
            states[i] = lif_step(states[i], current, lif, spike=spike)
            signal = states[i].s
        out_current = matmul(signal, weights[-1])
        v_out = add(scale(v_out, lif.leak), scale(out_current, 1.0 / lif.tau_m))
        outputs.append(v_out)
    return TimestepOutputs(outputs)
