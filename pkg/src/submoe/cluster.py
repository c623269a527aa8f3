"""Grouping functionally similar experts.

Signatures are unit vectors, so squared Euclidean distance between two of
them is ``2 - 2 cos``; plain k-means on signatures therefore clusters by
cosine similarity.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.hierarchy import cut_tree, linkage

from .calib import ActivationTrace
from .model import ROLES, MoEStack

logger = logging.getLogger(__name__)

METRICS = ("expert_output", "router_logits", "weight")
ALGORITHMS = ("kmeans", "hierarchical", "random")


class InfeasibleBudgetError(ValueError):
    """The requested keep ratio leaves fewer groups than layers in a window."""


def _cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine; rows where either side is zero give 0."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    dots = np.sum(a * b, axis=-1)
    return np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)


def output_similarity(trace: ActivationTrace, layer: int, i: int, j: int) -> float:
    """Mean per-token cosine between the outputs of experts ``i`` and ``j``."""
    out = trace.layers[layer].outputs
    return float(np.mean(_cosines(out[i], out[j])))


def similarity_matrix(trace: ActivationTrace, layer: int) -> np.ndarray:
    out = trace.layers[layer].outputs
    norms = np.linalg.norm(out, axis=2, keepdims=True)
    unit = np.divide(out, norms, out=np.zeros_like(out), where=norms > 0)
    sim = np.einsum("imd,jmd->ij", unit, unit) / out.shape[1]
    sim = 0.5 * (sim + sim.T)
    return np.clip(sim, -1.0, 1.0)


@dataclass(frozen=True)
class ExpertSignature:
    layer: int
    expert: int
    vec: np.ndarray
    metric: str


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else np.zeros_like(v)


def signature(model: MoEStack, trace: ActivationTrace, layer: int, i: int, metric: str = "expert_output") -> ExpertSignature:
    if metric == "expert_output":
        out = trace.layers[layer].outputs[i]
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        per_token = np.divide(out, norms, out=np.zeros_like(out), where=norms > 0)
        vec = _unit(per_token.ravel())
    elif metric == "router_logits":
        lt = trace.layers[layer]
        vec = _unit(lt.inputs @ model.layers[layer].router[i])
    elif metric == "weight":
        ly = model.layers[layer]
        e = ly.experts[ly.expert_map[i]]
        vec = _unit(np.concatenate([e.weight(r).ravel() for r in ROLES]))
    else:
        raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")
    return ExpertSignature(layer=layer, expert=i, vec=vec, metric=metric)


def layer_signatures(model: MoEStack, trace: ActivationTrace, layer: int, metric: str = "expert_output") -> np.ndarray:
    n = model.config.n_experts
    return np.stack([signature(model, trace, layer, i, metric).vec for i in range(n)])


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # explicit differences keep duplicates at exactly zero distance
    return np.stack([np.sum((points - c) ** 2, axis=1) for c in centers], axis=1)


def kmeans_pp_init(points: np.ndarray, k: int, seed=None) -> np.ndarray:
    """k-means++ seeding; returns the indices of the chosen points.

    If every remaining point coincides with a chosen seed, the next seed is
    drawn uniformly from the points not yet chosen.
    """
    n = len(points)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} points")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(points, points[chosen])[:, 0]
    for _ in range(1, k):
        d2[chosen] = 0.0
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(points, points[[nxt]])[:, 0])
    return np.array(chosen)


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    objective: list = field(default_factory=list)  # J after every update step
    n_iter: int = 0

    @property
    def inertia(self) -> float:
        return self.objective[-1]


def _objective(points, labels, centroids) -> float:
    return float(np.sum((points - centroids[labels]) ** 2))


def _fill_empty(points, labels, centroids, k):
    # move the point farthest from its centroid (taken from a cluster with >1 member)
    for j in range(k):
        if np.any(labels == j):
            continue
        sizes = np.bincount(labels, minlength=k)
        movable = np.flatnonzero(sizes[labels] > 1)
        dist = np.sum((points[movable] - centroids[labels[movable]]) ** 2, axis=1)
        p = movable[np.argmax(dist)]
        labels[p] = j
        centroids[j] = points[p]
    return labels


def kmeans(points: np.ndarray, k: int, max_iter: int = 100, tol: float = 1e-6, seed=None) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Ties in assignment go to the lowest centroid index. Stops when the
    assignment is unchanged, the objective moves by less than ``tol * J``,
    or after ``max_iter`` rounds.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} points")
    centroids = points[kmeans_pp_init(points, k, seed)].copy()
    labels = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        new = np.argmin(_sq_dists(points, centroids), axis=1)
        new = _fill_empty(points, new, centroids, k)
        centroids = np.stack([points[new == j].mean(axis=0) for j in range(k)])
        history.append(_objective(points, new, centroids))
        unchanged = labels is not None and np.array_equal(new, labels)
        labels = new
        if unchanged:
            break
        if len(history) > 1 and abs(history[-2] - history[-1]) < tol * history[-1]:
            break
    return KMeansResult(labels=labels, centroids=centroids, objective=history, n_iter=it)


def _canonical(labels: np.ndarray) -> np.ndarray:
    """Relabel so clusters are numbered by first appearance."""
    _, first, inv = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inv]


def hierarchical(points: np.ndarray, k: int) -> np.ndarray:
    """Average-linkage agglomerative clustering cut at exactly ``k`` clusters."""
    n = len(points)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} points")
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    z = linkage(np.asarray(points, dtype=np.float64), method="average", metric="euclidean")
    return _canonical(cut_tree(z, n_clusters=k).ravel())


def random_grouping(n: int, k: int, seed=None) -> np.ndarray:
    """Uniformly random balanced partition of ``n`` items into ``k`` groups."""
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} items")
    perm = np.random.default_rng(seed).permutation(n)
    labels = np.empty(n, dtype=np.int64)
    labels[perm] = np.arange(n) % k
    return labels


def labels_to_groups(labels) -> list[list[int]]:
    groups: dict[int, list[int]] = {}
    for i, lab in enumerate(np.asarray(labels).tolist()):
        groups.setdefault(lab, []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


@dataclass
class ClusterPlan:
    layers: list  # per layer: list of groups of original indices
    window: int
    keep_ratio: float
    budget_total: int

    def __post_init__(self):
        for li, groups in enumerate(self.layers):
            flat = sorted(i for g in groups for i in g)
            if not groups or any(not g for g in groups) or flat != list(range(len(flat))):
                raise ValueError(f"layer {li}: groups are not an exact partition")
        if self.n_groups > self.budget_total:
            raise ValueError("plan exceeds its expert budget")

    @property
    def n_groups(self) -> int:
        return sum(len(g) for g in self.layers)

    def to_dict(self) -> dict:
        return {
            "window": self.window,
            "keep_ratio": self.keep_ratio,
            "budget_total": self.budget_total,
            "layers": [{"layer": i, "groups": [list(map(int, g)) for g in gs]} for i, gs in enumerate(self.layers)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterPlan":
        layers = [None] * len(d["layers"])
        for entry in d["layers"]:
            layers[entry["layer"]] = [sorted(int(i) for i in g) for g in entry["groups"]]
        n_groups = sum(len(g) for g in layers)
        return cls(layers=layers, window=int(d["window"]), keep_ratio=float(d["keep_ratio"]),
                   budget_total=int(d.get("budget_total", n_groups)))

    @classmethod
    def from_json(cls, text: str) -> "ClusterPlan":
        return cls.from_dict(json.loads(text))

    @classmethod
    def identity(cls, n_layers: int, n_experts: int) -> "ClusterPlan":
        return cls([[[i] for i in range(n_experts)] for _ in range(n_layers)], 1, 1.0, n_layers * n_experts)


def window_budget(keep_ratio: float, n_experts: int, n_layers_in_window: int) -> int:
    # 1e-9 guards ratios like 0.3 whose float product lands just above an integer
    return max(1, math.ceil(keep_ratio * n_experts * n_layers_in_window - 1e-9))


def _cluster(points, k, algorithm, seed):
    if algorithm == "kmeans":
        return kmeans(points, k, seed=seed).labels
    if algorithm == "hierarchical":
        return hierarchical(points, k)
    if algorithm == "random":
        return random_grouping(len(points), k, seed)
    raise ValueError(f"unknown algorithm {algorithm!r}; choose from {ALGORITHMS}")


def _rebalance(groups: list, sigs: list, budget: int) -> list:
    """Merge the most similar same-layer group pairs until ``budget`` groups remain.

    ``groups`` is a list of (layer, members); ``sigs[layer]`` the signature rows.
    """
    groups = [(li, list(g)) for li, g in groups]
    while len(groups) > budget:
        best, best_sim = None, -np.inf
        cents = [_unit(sigs[li][g].mean(axis=0)) for li, g in groups]
        for a in range(len(groups)):
            for b in range(a + 1, len(groups)):
                if groups[a][0] != groups[b][0]:
                    continue
                s = float(cents[a] @ cents[b])
                if s > best_sim + 1e-15:
                    best, best_sim = (a, b), s
        if best is None:
            break
        a, b = best
        merged = (groups[a][0], sorted(groups[a][1] + groups[b][1]))
        groups = [g for i, g in enumerate(groups) if i not in best] + [merged]
    return groups


def multilayer_plan(
    model: MoEStack,
    trace: ActivationTrace,
    keep_ratio: float,
    window: int = 2,
    metric: str = "expert_output",
    algorithm: str = "kmeans",
    seed=0,
) -> ClusterPlan:
    """Jointly cluster experts of ``window`` consecutive layers under one budget.

    Each window keeps ``ceil(keep_ratio * n * layers_in_window)`` groups.
    Clusters that mix layers are split per layer, then the most similar
    same-layer groups are merged back until the window budget is met, so
    layers with redundant experts end up with fewer groups.
    """
    if not 0 < keep_ratio <= 1:
        raise ValueError("keep_ratio must be in (0, 1]")
    if window < 1:
        raise ValueError("window must be >= 1")
    n, n_layers = model.config.n_experts, model.config.n_layers
    if len(trace.layers) != n_layers:
        raise ValueError("trace and model disagree on layer count")
    plan_layers: list = [None] * n_layers
    budget_total = 0
    for w, start in enumerate(range(0, n_layers, window)):
        idx = list(range(start, min(start + window, n_layers)))
        k = window_budget(keep_ratio, n, len(idx))
        if k < len(idx):
            raise InfeasibleBudgetError(f"keep_ratio {keep_ratio} gives {k} groups for {len(idx)} layers")
        budget_total += k
        sigs = {li: layer_signatures(model, trace, li, metric) for li in idx}
        pooled = np.concatenate([sigs[li] for li in idx])
        wseed = None if seed is None else np.random.SeedSequence([int(seed), w])
        labels = _cluster(pooled, k, algorithm, wseed)
        groups = []
        for lab in np.unique(labels):
            members = np.flatnonzero(labels == lab)
            for pos, li in enumerate(idx):
                g = [int(m - pos * n) for m in members if pos * n <= m < (pos + 1) * n]
                if g:
                    groups.append((li, g))
        groups = _rebalance(groups, sigs, k)
        for li in idx:
            plan_layers[li] = sorted((g for l2, g in groups if l2 == li), key=lambda g: g[0])
        logger.debug("window %d: %s groups per layer", w, [len(plan_layers[li]) for li in idx])
    return ClusterPlan(layers=plan_layers, window=window, keep_ratio=keep_ratio, budget_total=budget_total)
