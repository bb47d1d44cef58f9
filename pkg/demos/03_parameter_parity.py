"""Swapping one wide FFN for two half-width FFNs keeps the weight count fixed.

Run: python3 demos/03_parameter_parity.py
"""
from splitlab.layers import init_layer, param_count
from splitlab.tensor import make_rng

for d_model, heads in ((4, 1), (64, 4), (512, 8)):
    t = param_count(init_layer("transformer", d_model, heads, make_rng(0)))
    m = param_count(init_layer("macaron", d_model, heads, make_rng(0)))
    print(f"d_model {d_model:4d}: weights {t.weights:>9,} vs {m.weights:>9,}; "
          f"totals {t.total:>9,} vs {m.total:>9,} (macaron +{m.total - t.total})")

# The extra d_model scalars are the second FFN's output bias.
t = param_count(init_layer("transformer", 512, 8, make_rng(0)))
m = param_count(init_layer("macaron", 512, 8, make_rng(0)))
print("per sublayer, d_model 512:")
for name, count in t.by_sublayer.items():
    print(f"  transformer {name:10s} {count:>10,}")
for name, count in m.by_sublayer.items():
    print(f"  macaron     {name:10s} {count:>10,}")
