"""How fast does each splitting scheme's one-step error shrink with the step size?

Run: python3 demos/01_order_study.py
"""
from splitlab.splitting import InsufficientDataError, gamma_grid, local_errors, order_study
from splitlab.systems import SYSTEMS, default_state

grid = gamma_grid(1e-3, 1e-1, 9)

# A linear system x' = xA + xB whose matrices do not commute. Splitting the
# right-hand side into the two pieces and stepping each exactly leaves an
# error that comes only from the splitting itself.
system, state = SYSTEMS["noncommuting"](), default_state("noncommuting")
print("gamma        Lie-Trotter   Strang-Marchuk")
lt = local_errors(system, state, "lie-trotter", "exact", grid)
sm = local_errors(system, state, "strang-marchuk", "exact", grid)
for a, b in zip(lt, sm):
    print(f"{a.gamma:9.2e}   {a.abs_error:11.3e}   {b.abs_error:11.3e}")

# Shrinking gamma tenfold cuts the Lie-Trotter error about 100x and the
# Strang-Marchuk error about 1000x: local orders 2 and 3.
for scheme in ("lie-trotter", "strang-marchuk"):
    est = order_study(system, state, scheme, "exact", grid)
    print(f"{scheme:15s} fitted slope {est.slope:.3f}  (r^2 {est.r2:.6f})")

# The same holds on a nonlinear interacting particle system.
nl, nl_state = SYSTEMS["nonlinear"](), default_state("nonlinear")
for scheme in ("lie-trotter", "strang-marchuk"):
    print(f"nonlinear {scheme:15s} slope {order_study(nl, nl_state, scheme, 'exact', grid).slope:.3f}")

# When the two pieces commute, splitting costs nothing: every error sits at
# the level of floating-point rounding and no slope can be fitted.
com, com_state = SYSTEMS["commuting"](), default_state("commuting")
errs = [s.abs_error for s in local_errors(com, com_state, "lie-trotter", "exact", grid)]
print(f"commuting system: largest Lie-Trotter error {max(errs):.1e}")
try:
    order_study(com, com_state, "lie-trotter", "exact", grid)
except InsufficientDataError as exc:
    print(f"  fit refused: {exc}")
