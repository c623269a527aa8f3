"""Mixture-of-experts compression by clustering experts and merging them in a shared SVD subspace."""

from .calib import (
    ActivationTrace,
    CalibSet,
    FrequencyTable,
    WhitenCache,
    capture,
    expert_frequencies,
    make_calib,
    whitening_matrix,
)
from .cluster import ClusterPlan, hierarchical, kmeans, kmeans_pp_init, multilayer_plan, random_grouping
from .evaluation import alignment_heatmaps, output_divergence
from .io import load_checkpoint, save_checkpoint
from .merge import (
    MergeConfig,
    compress_model,
    direct_weighted_merge,
    merge_group,
    merge_v,
    reconstruct,
    union_svd,
    whiten_merge_truncate,
)
from .model import (
    ExpertWeights,
    FactoredExpert,
    ModelConfig,
    MoELayer,
    MoEStack,
    RedundancySpec,
    expert_forward,
    gen_synthetic,
    layer_forward,
    param_count,
    stack_forward,
)

__version__ = "0.1.0"
