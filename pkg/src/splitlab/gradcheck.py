"""Reverse-mode gradients of layer parameters against central differences."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import init_layer, layer_forward
from .tensor import broken_adjoint, finite_diff_grad, make_rng


@dataclass(frozen=True)
class GradCheck:
    name: str
    rel_error: float


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def gradcheck_layer(kind: str, d_model: int = 8, n: int = 4, heads: int = 2, seed: int = 0,
                    h: float = 1e-5, layer_norm: bool = False, break_grad: bool = False) -> list[GradCheck]:
    """Check d(loss)/d(param) for every parameter of one random layer.

    The loss is a fixed random linear functional of the layer output, so every
    output entry contributes. ``break_grad`` flips the sign of the ReLU adjoint
    and must make the check fail.
    """
    rng = make_rng(seed)
    params = init_layer(kind, d_model, heads, rng, layer_norm=layer_norm, bias_scale=0.5)
    if layer_norm:
        for nrm in params.norms:
            nrm.gain.data += rng.uniform(-0.5, 0.5, nrm.gain.shape)
            nrm.bias.data += rng.uniform(-0.5, 0.5, nrm.bias.shape)
    x = rng.uniform(-1.0, 1.0, (n, d_model))
    memory = rng.uniform(-1.0, 1.0, (n + 1, d_model)) if kind.endswith("decoder") else None
    probe = rng.uniform(-1.0, 1.0, (n, d_model))

    def loss():
        return (layer_forward(x, params, encoder_output=memory) * probe).sum()

    named = params.named_parameters()
    for _, p in named:
        p.zero_grad()
    if break_grad:
        with broken_adjoint():
            loss().backward()
    else:
        loss().backward()

    results = []
    for name, p in named:
        def f(value, p=p):
            saved = p.data
            p.data = value
            try:
                return float(loss().data)
            finally:
                p.data = saved

        numeric = finite_diff_grad(f, p.data, h)
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        results.append(GradCheck(name, relative_error(analytic, numeric)))
    return results
