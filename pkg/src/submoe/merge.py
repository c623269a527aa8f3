"""Subspace expert merging.

Experts of a group are concatenated along the input axis, ``M = [W1 | ... | Wn]``
(shape ``O x nI``), and decomposed once. The left factor (with singular
values folded in) is shared; each expert keeps its own ``r x I`` block of the
right factor, and only those blocks are averaged.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .calib import ActivationTrace, WhitenCache, expert_frequencies
from .cluster import ClusterPlan
from .model import (
    ROLES,
    ExpertWeights,
    FactoredExpert,
    LowRankFactor,
    MoELayer,
    MoEStack,
    ShapeError,
    param_count,
)

logger = logging.getLogger(__name__)

V_MERGE_MODES = ("frequency", "average", "drop")


@dataclass(frozen=True)
class UnionDecomposition:
    u_sigma: np.ndarray  # (O, r)
    sigma: np.ndarray  # (r,)
    blocks: list  # n arrays of shape (r, I)

    @property
    def rank(self) -> int:
        return self.sigma.shape[0]

    @property
    def u(self) -> np.ndarray:
        """Orthonormal left factor (columns with zero singular value are left at 0)."""
        safe = np.where(self.sigma > 0, self.sigma, 1.0)
        return np.where(self.sigma > 0, self.u_sigma / safe, 0.0)


def _check_group(mats) -> list[np.ndarray]:
    mats = [np.asarray(w, dtype=np.float64) for w in mats]
    if not mats:
        raise ValueError("need at least one matrix")
    shape = mats[0].shape
    for w in mats:
        if w.ndim != 2 or w.shape != shape:
            raise ShapeError(f"group matrices disagree in shape: {w.shape} vs {shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("non-finite weight entries")
    return mats


def union_svd(mats) -> UnionDecomposition:
    """Thin SVD of the input-axis concatenation of ``mats``."""
    mats = _check_group(mats)
    u, s, vt = np.linalg.svd(np.hstack(mats), full_matrices=False)
    return UnionDecomposition(u_sigma=u * s, sigma=s, blocks=np.split(vt, len(mats), axis=1))


def merge_weights(freqs, mode: str = "frequency") -> np.ndarray:
    """Convex combination weights for one group's members."""
    f = np.asarray(freqs, dtype=np.float64)
    if np.any(f < 0) or not np.all(np.isfinite(f)):
        raise ValueError("frequencies must be finite and non-negative")
    n = len(f)
    if mode == "average" or (mode == "frequency" and f.sum() == 0):
        return np.full(n, 1.0 / n)
    if mode == "frequency":
        return f / f.sum()
    if mode == "drop":
        w = np.zeros(n)
        w[int(np.argmax(f))] = 1.0
        return w
    raise ValueError(f"unknown v_merge mode {mode!r}; choose from {V_MERGE_MODES}")


def _combine(blocks, w) -> np.ndarray:
    out = np.zeros_like(blocks[0])
    for wi, b in zip(w, blocks):
        if wi:
            out += wi * b
    return out


def merge_v(decomp: UnionDecomposition, freqs, mode: str = "frequency") -> np.ndarray:
    """Merged right factor: frequency-weighted, plain average, or the most-used block."""
    if len(freqs) != len(decomp.blocks):
        raise ValueError("one frequency per block required")
    return _combine(decomp.blocks, merge_weights(freqs, mode))


def reconstruct(decomp: UnionDecomposition, v_merged: np.ndarray) -> np.ndarray:
    return decomp.u_sigma @ v_merged


def direct_weighted_merge(mats, weights) -> np.ndarray:
    """Baseline parameter averaging ``sum(a_i W_i)`` with ``a = w / sum(w)``."""
    mats = _check_group(mats)
    if len(weights) != len(mats):
        raise ValueError("one weight per matrix required")
    return _combine(mats, merge_weights(weights, "frequency"))


def kept_rank(rows: int, cols: int, rank_ratio: float) -> int:
    """Rank whose factored storage ``r (O + I)`` is about ``(1 - rank_ratio) O I``."""
    if not 0 < rank_ratio < 1:
        raise ValueError("rank_ratio must be in (0, 1)")
    return max(1, math.floor((1.0 - rank_ratio) * rows * cols / (rows + cols)))


def dense_macs(rows: int, cols: int) -> int:
    return rows * cols


def factored_macs(rank: int, rows: int, cols: int) -> int:
    return rank * (rows + cols)


def whiten_merge_truncate(
    mats,
    freqs,
    whiteners=None,
    rank_ratio: float | None = None,
    rank: int | None = None,
    mode: str = "frequency",
) -> LowRankFactor:
    """Activation-aware merge of one role into a rank-limited factor pair.

    Each weight is re-weighted as ``W_i S_i`` before the union decomposition;
    the right blocks are mapped back with ``S_i^{-1}`` (triangular solve)
    before averaging. ``whiteners=None`` skips the re-weighting. The kept rank
    is ``rank`` if given, otherwise :func:`kept_rank` of ``rank_ratio``.
    """
    mats = _check_group(mats)
    if whiteners is None:
        scaled = mats
    else:
        if len(whiteners) != len(mats):
            raise ValueError("one whitening factor per matrix required")
        scaled = [w @ s for w, s in zip(mats, whiteners)]
    dec = union_svd(scaled)
    if whiteners is None:
        dewhite = dec.blocks
    else:
        # B S^{-1} = X  <=>  S^T X^T = B^T
        dewhite = [solve_triangular(s.T, b.T, lower=False, check_finite=True).T for b, s in zip(dec.blocks, whiteners)]
    v = _combine(dewhite, merge_weights(freqs, mode))
    rows, cols = mats[0].shape
    r = rank if rank is not None else kept_rank(rows, cols, rank_ratio)
    r = min(r, dec.rank)
    if r < 1:
        raise ValueError("rank must be >= 1")
    return LowRankFactor(left=dec.u_sigma[:, :r].copy(), right=v[:r].copy())


@dataclass(frozen=True)
class MergeConfig:
    v_merge: str = "frequency"
    rank_ratio: float = 0.0
    whiten: bool = False
    store_factored: bool = False
    eps_scale: float = 1e-6

    def __post_init__(self):
        if self.v_merge not in V_MERGE_MODES:
            raise ValueError(f"unknown v_merge mode {self.v_merge!r}")
        if not 0 <= self.rank_ratio < 1:
            raise ValueError("rank_ratio must be in [0, 1)")
        if self.store_factored and self.rank_ratio == 0:
            raise ValueError("store_factored requires rank_ratio > 0")
        if self.whiten and self.rank_ratio == 0:
            logger.warning("whitening without truncation reduces to weighted averaging")

    @property
    def truncating(self) -> bool:
        return self.rank_ratio > 0


def merge_group(experts, freqs, config: MergeConfig = MergeConfig(), whiteners=None):
    """Merge one group of dense experts.

    ``whiteners`` is a per-expert ``{role: S}`` mapping, used only when
    ``config.whiten``. Returns ``(expert, info)`` where ``info`` records ranks
    and member reconstruction errors per role.
    """
    if len(experts) != len(freqs):
        raise ValueError("one frequency per expert required")
    if len(experts) == 1 and not config.truncating and not config.whiten:
        return experts[0], {"weights": [1.0], "roles": {}}
    w = merge_weights(freqs, config.v_merge)
    roles, info = {}, {"weights": w.tolist(), "roles": {}}
    for role in ROLES:
        mats = [e.weight(role) for e in experts]
        if config.truncating or config.whiten:
            ss = [wh[role] for wh in whiteners] if config.whiten else None
            rank = None if config.truncating else min(mats[0].shape[0], len(mats) * mats[0].shape[1])
            f = whiten_merge_truncate(mats, freqs, ss, config.rank_ratio or None, rank, config.v_merge)
            roles[role] = f if config.store_factored else f.dense()
            merged, rank = f.dense(), f.rank
        else:
            dec = union_svd(mats)
            merged = reconstruct(dec, merge_v(dec, freqs, config.v_merge))
            roles[role], rank = merged, dec.rank
        info["roles"][role] = {
            "rank": int(rank),
            "member_rel_error": [float(np.linalg.norm(m - merged) / max(np.linalg.norm(m), 1e-300)) for m in mats],
        }
    cls = FactoredExpert if config.store_factored else ExpertWeights
    return cls(**roles), info


def remap_router(layer: MoELayer, groups, merged) -> MoELayer:
    """New layer with one slot per group; the router keeps all original rows."""
    if len(groups) != len(merged):
        raise ValueError("one merged expert per group required")
    emap = np.full(layer.n_original, -1, dtype=np.int64)
    for slot, g in enumerate(groups):
        emap[list(g)] = slot
    if np.any(emap < 0):
        raise ValueError("groups do not cover every original expert")
    return MoELayer(router=layer.router, experts=list(merged), expert_map=emap)


@dataclass
class MergeReport:
    params_before: int
    params_after: int
    expert_params_before: int
    expert_params_after: int
    config: dict
    layers: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "params_before": self.params_before,
            "params_after": self.params_after,
            "expert_params_before": self.expert_params_before,
            "expert_params_after": self.expert_params_after,
            "config": self.config,
            "layers": self.layers,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def compress_model(model: MoEStack, plan: ClusterPlan, trace: ActivationTrace, config: MergeConfig = MergeConfig()):
    """Merge every group of ``plan``; returns ``(compressed_model, report)``.

    The input model must still have one dense expert per original index.
    """
    cfg = model.config
    if len(plan.layers) != cfg.n_layers or len(trace.layers) != cfg.n_layers:
        raise ValueError("plan, trace and model disagree on layer count")
    for li, layer in enumerate(model.layers):
        if len(layer.experts) != cfg.n_experts or not np.array_equal(layer.expert_map, np.arange(cfg.n_experts)):
            raise ValueError(f"layer {li} is already merged")
        if not all(isinstance(e, ExpertWeights) for e in layer.experts):
            raise ValueError(f"layer {li} holds factored experts")
        if trace.layers[li].n_experts != cfg.n_experts:
            raise ValueError(f"trace layer {li} has {trace.layers[li].n_experts} experts, model {cfg.n_experts}")
        if sorted(i for g in plan.layers[li] for i in g) != list(range(cfg.n_experts)):
            raise ValueError(f"plan layer {li} is not a partition of the experts")

    table = expert_frequencies(trace)
    cache = WhitenCache(model, trace, config.eps_scale) if config.whiten else None
    new_layers, report_layers = [], []
    for li, layer in enumerate(model.layers):
        freqs = table.freqs(li)
        merged, groups_info = [], []
        for g in plan.layers[li]:
            whiteners = [{r: cache.get(li, i, r) for r in ROLES} for i in g] if cache else None
            e, info = merge_group([layer.experts[i] for i in g], freqs[g], config, whiteners)
            merged.append(e)
            groups_info.append({"members": list(map(int, g)), "freqs": freqs[g].tolist(), **info,
                                "params_before": sum(layer.experts[i].num_params() for i in g),
                                "params_after": e.num_params()})
        new_layers.append(remap_router(layer, plan.layers[li], merged))
        report_layers.append({"layer": li, "groups": groups_info})
    out = MoEStack(config=cfg, layers=new_layers)
    report = MergeReport(
        params_before=param_count(model),
        params_after=param_count(out),
        expert_params_before=sum(e.num_params() for ly in model.layers for e in ly.experts),
        expert_params_after=sum(e.num_params() for ly in out.layers for e in ly.experts),
        config={"v_merge": config.v_merge, "rank_ratio": config.rank_ratio, "whiten": config.whiten,
                "store_factored": config.store_factored, "eps_scale": config.eps_scale},
        layers=report_layers,
    )
    return out, report
