"""Layers as splitting steps.

With step size gamma the attention sublayer becomes the diffusion field
``F* = MHA / gamma`` and the FFN sublayer the convection field
``G* = FFN / gamma``. A Lie-Trotter step with Euler sub-steps then reproduces
a Transformer layer, and a Strang-Marchuk step reproduces a Macaron layer,
where the convection field switches from the ``down`` to the ``up`` FFN at
the half-step time ``t_l + gamma/2``. At gamma = 1 both identities hold
bit-for-bit.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .layers import (
    LayerParams,
    attention_sublayer,
    clone_params,
    ffn_sublayer,
    init_layer,
    layer_forward,
)
from .splitting import (
    ParticleState,
    SchemeConfig,
    SplitSystem,
    lie_trotter_step,
    strang_marchuk_step,
)
from .tensor import ContractError, make_rng

__all__ = [
    "wrap_transformer_as_fields",
    "wrap_macaron_as_fields",
    "wrap_layer",
    "scheme_for",
    "layer_step",
    "stack_as_trajectory",
    "EquivalenceReport",
    "equivalence_check",
]


def wrap_transformer_as_fields(params: LayerParams, gamma: float = 1.0, t_l: float = 0.0) -> SplitSystem:
    if params.kind != "transformer":
        raise ContractError(f"expected transformer parameters, got {params.kind!r}")

    def diffusion(x, t):
        return attention_sublayer(x, params, 0).data / gamma

    def convection(x, t):
        return ffn_sublayer(x, params, "ffn", 1).data / gamma

    return SplitSystem(diffusion, convection, name=f"transformer-layer@{t_l:g}")


def wrap_macaron_as_fields(params: LayerParams, gamma: float = 1.0, t_l: float = 0.0) -> SplitSystem:
    """Convection uses ``ffn_down`` at time ``t_l`` and ``ffn_up`` at ``t_l + gamma/2``."""
    if params.kind != "macaron":
        raise ContractError(f"expected macaron parameters, got {params.kind!r}")
    half_time = t_l + gamma / 2

    def diffusion(x, t):
        return attention_sublayer(x, params, 1).data / gamma

    def convection(x, t):
        if t == t_l:
            return ffn_sublayer(x, params, "ffn_down", 0).data / gamma
        if t == half_time:
            return ffn_sublayer(x, params, "ffn_up", 2).data / gamma
        raise ContractError(f"macaron convection is defined at t={t_l} and t={half_time}, not t={t}")

    return SplitSystem(diffusion, convection, name=f"macaron-layer@{t_l:g}")


def wrap_layer(params: LayerParams, gamma: float = 1.0, t_l: float = 0.0) -> SplitSystem:
    if params.kind == "transformer":
        return wrap_transformer_as_fields(params, gamma, t_l)
    return wrap_macaron_as_fields(params, gamma, t_l)


def scheme_for(params: LayerParams) -> str:
    return "lie-trotter" if params.kind == "transformer" else "strang-marchuk"


def layer_step(params: LayerParams, x: np.ndarray, gamma: float = 1.0, t_l: float = 0.0) -> np.ndarray:
    """One splitting step with Euler sub-steps on the wrapped fields."""
    system = wrap_layer(params, gamma, t_l)
    config = SchemeConfig(scheme_for(params), "euler", gamma)
    stepper = lie_trotter_step if config.scheme == "lie-trotter" else strang_marchuk_step
    return stepper(system, ParticleState(x, t_l), config).positions


def stack_as_trajectory(stack: Sequence[LayerParams], x0: np.ndarray, gamma: float = 1.0,
                        t0: float = 0.0) -> list[np.ndarray]:
    """``[x_0, ..., x_L]``; layer ``l`` acts at time ``t0 + gamma * l``."""
    if not stack:
        raise ContractError("stack must contain at least one layer")
    d_model = stack[0].d_model
    if any(p.d_model != d_model for p in stack):
        raise ContractError("all layers in a stack must share d_model")
    if np.shape(x0)[-1] != d_model:
        raise ContractError(f"input width {np.shape(x0)[-1]} does not match d_model={d_model}")
    traj = [np.array(x0, dtype=np.float64)]
    for l, params in enumerate(stack):
        traj.append(layer_step(params, traj[-1], gamma, t0 + gamma * l))
    return traj


@dataclass(frozen=True)
class EquivalenceReport:
    architecture: str
    d_model: int
    n: int
    heads: int
    seed: int
    max_abs_diff: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)


def equivalence_check(architecture: str, d_model: int, n: int, heads: int, seed: int,
                      perturb: float = 0.0) -> EquivalenceReport:
    """Compare stepper path and layer path on one random instance.

    ``perturb`` adds to one weight entry of the layer path only; a nonzero
    value is a sensitivity control that must show up as a mismatch.
    """
    rng = make_rng(seed)
    params = init_layer(architecture, d_model, heads, rng, bias_scale=0.5)
    x = rng.uniform(-1.0, 1.0, (n, d_model))
    via_steps = layer_step(params, x)
    layer_params = params
    if perturb:
        layer_params = clone_params(params)
        layer_params.attention.output.data[0, 0] += perturb
    via_layer = layer_forward(x, layer_params).data
    diff = float(np.max(np.abs(via_steps - via_layer)))
    return EquivalenceReport(architecture, d_model, n, heads, seed, diff)
