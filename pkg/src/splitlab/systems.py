"""Test systems for the splitting integrators.

``scalar``       x' = a x + b x                       (n = d = 1)
``commuting``    x' = x A + x B with AB = BA          (2 x 2)
``noncommuting`` A = [[0,1],[0,0]], B = [[0,0],[1,0]] (2 x 2)
``nonlinear``    4 particles in the plane: softmax-weighted attraction
                 (diffusion) plus the cubic drift x - x^3 (convection)
"""
from __future__ import annotations

import numpy as np
import scipy.linalg

from .splitting import ParticleState, SplitSystem, rk4_flow
from .tensor import matmul, softmax_rows

__all__ = [
    "linear_system",
    "scalar_system",
    "commuting_system",
    "noncommuting_system",
    "nonlinear_system",
    "SYSTEMS",
    "default_state",
]


def linear_system(a: np.ndarray, b: np.ndarray, name: str = "linear") -> SplitSystem:
    """Split system with diffusion ``x @ a`` and convection ``x @ b``.

    Sub-flows are ``x @ expm(dt * a)`` and ``x @ expm(dt * b)``. Note the
    convection ``x @ b`` acts on each row separately, so it is position-wise
    for any ``b``.
    """
    a = np.array(a, dtype=np.float64)
    b = np.array(b, dtype=np.float64)
    return SplitSystem(
        diffusion=lambda x, t: matmul(x, a),
        convection=lambda x, t: matmul(x, b),
        diffusion_flow=lambda x, t, dt: matmul(x, scipy.linalg.expm(dt * a)),
        convection_flow=lambda x, t, dt: matmul(x, scipy.linalg.expm(dt * b)),
        name=name,
        linear_generator=a + b,
    )


def scalar_system(a: float = 1.0, b: float = 2.0) -> SplitSystem:
    return linear_system([[a]], [[b]], name="scalar")


def commuting_system() -> SplitSystem:
    # b is a polynomial in a, so ab = ba
    a = np.array([[0.0, 1.0], [-1.0, 0.0]])
    b = 0.5 * np.eye(2) + 0.3 * a
    return linear_system(a, b, name="commuting")


def noncommuting_system() -> SplitSystem:
    a = np.array([[0.0, 1.0], [0.0, 0.0]])
    b = np.array([[0.0, 0.0], [1.0, 0.0]])
    return linear_system(a, b, name="noncommuting")


def _attraction(x: np.ndarray, t: float) -> np.ndarray:
    w = softmax_rows(x @ x.T)
    return w @ x - x


def _drift(x: np.ndarray, t: float) -> np.ndarray:
    return x - x**3


def _drift_flow(x: np.ndarray, t: float, dt: float) -> np.ndarray:
    # u = x^2 solves the logistic equation u' = 2u(1 - u)
    u = x * x
    e = np.exp(2.0 * dt)
    return np.sign(x) * np.sqrt(u * e / (1.0 - u + u * e))


def nonlinear_system() -> SplitSystem:
    """Coupled particle system; the diffusion sub-flow is fine-grid RK4."""
    return SplitSystem(
        diffusion=_attraction,
        convection=_drift,
        diffusion_flow=lambda x, t, dt: rk4_flow(_attraction, x, t, dt),
        convection_flow=_drift_flow,
        name="nonlinear",
    )


SYSTEMS = {
    "scalar": scalar_system,
    "commuting": commuting_system,
    "noncommuting": noncommuting_system,
    "nonlinear": nonlinear_system,
}


def default_state(name: str) -> ParticleState:
    """Starting state used by the order studies for each shipped system."""
    if name == "scalar":
        return ParticleState(np.array([[1.0]]))
    if name == "nonlinear":
        return ParticleState(np.array([[0.6, -0.2], [0.1, 0.8], [-0.5, 0.3], [0.2, -0.7]]))
    return ParticleState(np.array([[1.0, 0.5], [-0.3, 0.8]]))
