"""A Transformer layer is one Lie-Trotter step; a Macaron layer is one Strang-Marchuk step.

Run: python3 demos/02_layers_as_splitting_steps.py
"""
import numpy as np

from splitlab.correspondence import layer_step, stack_as_trajectory, wrap_macaron_as_fields
from splitlab.layers import init_layer, layer_forward
from splitlab.tensor import make_rng

rng = make_rng(0)
x = rng.uniform(-1, 1, (5, 8))  # five tokens, model width 8

# Attention couples the tokens (the "diffusion" field); the FFN acts on each
# token alone (the "convection" field). With step size 1 a generic splitting
# stepper built from those two fields reproduces the layer bit for bit.
for kind in ("transformer", "macaron"):
    params = init_layer(kind, 8, 2, rng, bias_scale=0.5)
    via_layer = layer_forward(x, params).data
    via_stepper = layer_step(params, x)
    print(f"{kind:11s} max |layer - stepper| = {np.max(np.abs(via_layer - via_stepper)):.1e}")

# In the Macaron step the convection field changes parameters halfway
# through the step: the "down" FFN at time t, the "up" FFN at t + 1/2.
params = init_layer("macaron", 8, 2, rng, bias_scale=0.5)
fields = wrap_macaron_as_fields(params, gamma=1.0, t_l=0.0)
print("convection at t=0 and t=0.5 differ:",
      not np.allclose(fields.convection(x, 0.0), fields.convection(x, 0.5)))

# A stack of layers is a trajectory of particles through time.
stack = [init_layer("macaron", 8, 2, rng, bias_scale=0.5) for _ in range(3)]
traj = stack_as_trajectory(stack, x)
for t, xt in enumerate(traj):
    print(f"t={t}: mean particle norm {np.linalg.norm(xt, axis=1).mean():.3f}")
