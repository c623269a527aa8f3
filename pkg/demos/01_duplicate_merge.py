"""
Merging redundant experts end to end
====================================

A toy MoE stack is built with deliberate redundancy: every layer has eight
experts, but only four distinct ones (expert ``i`` and ``i + 4`` are copies).
Clustering on expert outputs should find the pairs, and merging each pair in
its shared subspace should leave the model's outputs untouched while halving
the expert parameters.
"""

import numpy as np

from submoe import (
    MergeConfig,
    ModelConfig,
    RedundancySpec,
    capture,
    compress_model,
    gen_synthetic,
    make_calib,
    multilayer_plan,
    output_divergence,
    param_count,
)

# %%
# Build the model and a calibration set of random tokens.
config = ModelConfig(d_model=32, d_expert=64, n_layers=4, n_experts=8, top_k=2, seed=0)
model = gen_synthetic(config, RedundancySpec(n_distinct=4, noise=0.0))
calib = make_calib(config.d_model, m=1024, seed=1)
print(f"original parameters: {param_count(model):,}")

# %%
# One forward sweep records every expert's output on every token, along with
# the router's choices.
trace = capture(model, calib)

# %%
# Cluster two layers at a time, keeping half the experts overall.
plan = multilayer_plan(model, trace, keep_ratio=0.5, window=2)
for i, groups in enumerate(plan.layers):
    print(f"layer {i}: {groups}")

# %%
# Merge each group and compare the compressed model against the original.
compressed, report = compress_model(model, plan, trace, MergeConfig())
div = output_divergence(model, compressed, calib)
print(f"compressed parameters: {param_count(compressed):,}")
print(f"end-to-end relative error: {div.end_to_end_rel_error:.2e}")
print(f"end-to-end cosine:         {div.end_to_end_cosine:.6f}")

# %%
# Routers are kept whole; each original expert index now points at the slot
# holding its group's merged expert.
print("expert map, layer 0:", compressed.layers[0].expert_map.tolist())
assert np.isclose(div.end_to_end_rel_error, 0.0, atol=1e-5)
