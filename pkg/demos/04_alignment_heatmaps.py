"""
Expert similarity before and after subspace alignment
=====================================================

``pre`` is the mean cosine between expert outputs on the calibration tokens.
``post`` is the cosine between each expert's block of the right factor when
the whole layer is decomposed jointly. Both are written as CSV for plotting.
"""

import sys
from pathlib import Path

import numpy as np

from submoe import ModelConfig, RedundancySpec, alignment_heatmaps, capture, gen_synthetic, make_calib
from submoe.evaluation import write_heatmaps

config = ModelConfig(d_model=32, d_expert=64, n_layers=2, n_experts=8, top_k=2, seed=3)
model = gen_synthetic(config, RedundancySpec(n_distinct=4, noise=0.1))
trace = capture(model, make_calib(32, m=512, seed=4))
report = alignment_heatmaps(model, trace, layer=0)

np.set_printoptions(precision=2, suppress=True, linewidth=120)
print("output similarity (pre):")
print(report.pre)
print("V-block similarity (post):")
print(report.post)

out_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("heatmaps")
for p in write_heatmaps(report, out_dir):
    print("wrote", p)
