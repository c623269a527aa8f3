"""
Clustering and merging choices on a noisy model
===============================================

With noise between expert copies, merging is no longer lossless and the
choices start to matter. This sweeps the similarity metric, clustering
algorithm, layer window and V-merging mode, and reports end-to-end output
divergence after 2:1 compression.
"""

import itertools

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
)

config = ModelConfig(d_model=32, d_expert=64, n_layers=4, n_experts=8, top_k=2, seed=5)
model = gen_synthetic(config, RedundancySpec(n_distinct=3, noise=0.2))
calib = make_calib(32, m=1024, seed=6)
trace = capture(model, calib)


def divergence(plan, merge_config=MergeConfig()):
    comp, _ = compress_model(model, plan, trace, merge_config)
    return output_divergence(model, comp, calib, residuals=False).end_to_end_rel_error


# %%
print("metric          algorithm     window  rel. error")
for metric, algo, window in itertools.product(
    ("expert_output", "router_logits", "weight"), ("kmeans", "hierarchical", "random"), (1, 2)
):
    plan = multilayer_plan(model, trace, 0.5, window=window, metric=metric, algorithm=algo, seed=0)
    print(f"{metric:15s} {algo:13s} {window:6d}  {divergence(plan):.4f}")

# %%
plan = multilayer_plan(model, trace, 0.5)
print("\nv_merge     rel. error")
for mode in ("frequency", "average", "drop"):
    print(f"{mode:10s}  {divergence(plan, MergeConfig(v_merge=mode)):.4f}")

# %%
print("\nrank_ratio  whiten  rel. error")
for ratio, whiten in itertools.product((0.1, 0.2, 0.3), (False, True)):
    print(f"{ratio:10.1f}  {str(whiten):6s}  {divergence(plan, MergeConfig(rank_ratio=ratio, whiten=whiten)):.4f}")
