"""Train both architectures on synthetic copy and reverse tasks (about half a minute).

Run: python3 demos/04_toy_training.py
"""
import numpy as np

from splitlab.training import TaskSpec, build_model, compare, default_configs, greedy_decode, train

# Copy: an encoder-only model predicts every token of its input.
copy = TaskSpec("copy")
result = compare(["transformer", "macaron"], [copy], seeds=[0, 1, 2])
print(result.report())

# Reverse: an encoder-decoder model whose decoder layers are
# (half FFN, causal self-attention, cross-attention, half FFN).
reverse = TaskSpec("reverse")
model_cfg, train_cfg = default_configs(reverse, "macaron")
model = build_model(model_cfg, reverse.vocab_size, seed=0)
record = train(model_cfg, reverse, train_cfg, model=model)
print(f"reverse/macaron: sequence accuracy {record.final['seq_acc']:.3f} at step {record.steps_to_threshold}")

src = np.array([[3, 7, 5, 2, 9, 4, 11, 6, 15, 8, 12, 10]])
print("input  ", src[0].tolist())
print("decoded", greedy_decode(model, src)[0].tolist())
