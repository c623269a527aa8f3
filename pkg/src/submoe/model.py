"""MoE layer stack: weights, routing, forward pass and a synthetic generator.

Weights follow the column-vector convention ``y = W @ x`` with row-major
``(out, in)`` storage, so ``gate``/``up`` are ``(d_expert, d_model)`` and
``down`` is ``(d_model, d_expert)``. Batched entry points take tokens as rows
of an ``(m, d_model)`` array.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.special import expit

ROLES = ("gate", "up", "down")


class ShapeError(ValueError):
    """Raised when array dimensions disagree with the model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    d_expert: int
    n_layers: int
    n_experts: int
    top_k: int
    seed: int = 0

    def __post_init__(self):
        for name in ("d_model", "d_expert", "n_layers", "n_experts", "top_k"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.top_k > self.n_experts:
            raise ValueError("top_k must not exceed n_experts")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "d_expert": self.d_expert,
            "n_layers": self.n_layers,
            "n_experts": self.n_experts,
            "top_k": self.top_k,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: int(d[k]) for k in ("d_model", "d_expert", "n_layers", "n_experts", "top_k", "seed")})


def _check_matrix(name: str, w: np.ndarray, shape: tuple[int, int]) -> None:
    if w.ndim != 2 or w.shape != shape:
        raise ShapeError(f"{name}: expected shape {shape}, got {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError(f"{name}: non-finite entries")


@dataclass(frozen=True)
class ExpertWeights:
    gate: np.ndarray
    up: np.ndarray
    down: np.ndarray

    def __post_init__(self):
        h, d = self.gate.shape
        _check_matrix("up", self.up, (h, d))
        _check_matrix("down", self.down, (d, h))

    @property
    def d_model(self) -> int:
        return self.gate.shape[1]

    @property
    def d_expert(self) -> int:
        return self.gate.shape[0]

    def weight(self, role: str) -> np.ndarray:
        return getattr(self, role)

    def apply(self, role: str, x: np.ndarray) -> np.ndarray:
        """Apply one role's weight to row-token inputs ``x``."""
        return x @ getattr(self, role).T

    def num_params(self) -> int:
        return sum(getattr(self, r).size for r in ROLES)


@dataclass(frozen=True)
class LowRankFactor:
    """``left @ right`` with singular values folded into ``left``."""

    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        if self.left.ndim != 2 or self.right.ndim != 2 or self.left.shape[1] != self.right.shape[0]:
            raise ShapeError(f"incompatible factors {self.left.shape} @ {self.right.shape}")
        r = self.left.shape[1]
        if not 1 <= r <= min(self.left.shape[0], self.right.shape[1]):
            raise ShapeError(f"rank {r} out of range for {self.shape}")

    @property
    def rank(self) -> int:
        return self.left.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.left.shape[0], self.right.shape[1])

    def dense(self) -> np.ndarray:
        return self.left @ self.right


@dataclass(frozen=True)
class FactoredExpert:
    gate: LowRankFactor
    up: LowRankFactor
    down: LowRankFactor

    def __post_init__(self):
        h, d = self.gate.shape
        if self.up.shape != (h, d) or self.down.shape != (d, h):
            raise ShapeError("factored roles disagree on expert shape")

    @property
    def d_model(self) -> int:
        return self.gate.shape[1]

    @property
    def d_expert(self) -> int:
        return self.gate.shape[0]

    def weight(self, role: str) -> np.ndarray:
        return getattr(self, role).dense()

    def apply(self, role: str, x: np.ndarray) -> np.ndarray:
        f = getattr(self, role)
        return (x @ f.right.T) @ f.left.T

    def num_params(self) -> int:
        return sum(getattr(self, r).left.size + getattr(self, r).right.size for r in ROLES)


Expert = Union[ExpertWeights, FactoredExpert]


@dataclass(frozen=True)
class MoELayer:
    router: np.ndarray
    experts: list
    expert_map: np.ndarray = None

    def __post_init__(self):
        n = self.router.shape[0]
        if self.expert_map is None:
            if len(self.experts) != n:
                raise ShapeError("expert_map required when experts were merged")
            object.__setattr__(self, "expert_map", np.arange(n, dtype=np.int64))
        emap = np.asarray(self.expert_map, dtype=np.int64)
        object.__setattr__(self, "expert_map", emap)
        if emap.shape != (n,):
            raise ShapeError(f"expert_map must have length {n}")
        if emap.min() < 0 or emap.max() >= len(self.experts):
            raise ValueError("expert_map refers to a missing slot")
        if len(np.unique(emap)) != len(self.experts):
            raise ValueError("every expert slot must be referenced by an original index")

    @property
    def n_original(self) -> int:
        return self.router.shape[0]

    def groups(self) -> list[list[int]]:
        """Original indices served by each slot, in slot order."""
        return [np.flatnonzero(self.expert_map == s).tolist() for s in range(len(self.experts))]


@dataclass(frozen=True)
class MoEStack:
    config: ModelConfig
    layers: list = field(default_factory=list)

    def __post_init__(self):
        cfg = self.config
        if len(self.layers) != cfg.n_layers:
            raise ShapeError(f"expected {cfg.n_layers} layers, got {len(self.layers)}")
        for i, layer in enumerate(self.layers):
            _check_matrix(f"layer {i} router", layer.router, (cfg.n_experts, cfg.d_model))
            for e in layer.experts:
                if (e.d_expert, e.d_model) != (cfg.d_expert, cfg.d_model):
                    raise ShapeError(f"layer {i}: expert shape disagrees with config")


def silu(z: np.ndarray) -> np.ndarray:
    return z * expit(z)


def expert_hidden(e: Expert, x: np.ndarray) -> np.ndarray:
    """Input of the down projection: ``silu(gate x) * (up x)``."""
    return silu(e.apply("gate", x)) * e.apply("up", x)


def expert_forward(e: Expert, x) -> np.ndarray:
    """Expert output for a single vector or a batch of row tokens."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != e.d_model or x.ndim > 2:
        raise ShapeError(f"expected input of width {e.d_model}, got shape {x.shape}")
    return e.apply("down", expert_hidden(e, x))


def route(router: np.ndarray, x: np.ndarray, top_k: int):
    """Top-k routing over original experts.

    Returns ``(logits, topk, gates)`` where ``topk`` holds the selected indices
    per token (highest logit first, lower index on ties) and ``gates`` the
    softmax over the selected logits only.
    """
    logits = x @ router.T
    topk = np.argsort(-logits, axis=1, kind="stable")[:, :top_k]
    sel = np.take_along_axis(logits, topk, axis=1)
    sel = np.exp(sel - sel[:, :1])
    gates = sel / sel.sum(axis=1, keepdims=True)
    return logits, topk, gates


def slot_gates(layer: MoELayer, topk: np.ndarray, gates: np.ndarray) -> np.ndarray:
    """``(m, n_slots)`` gate mass; co-selected originals sharing a slot add up."""
    m = topk.shape[0]
    out = np.zeros((m, len(layer.experts)))
    rows = np.repeat(np.arange(m), topk.shape[1])
    np.add.at(out, (rows, layer.expert_map[topk].ravel()), gates.ravel())
    return out


def layer_forward_batch(layer: MoELayer, x: np.ndarray, top_k: int):
    """Routed layer output for row tokens; returns ``(y, topk, gates)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.router.shape[1]:
        raise ShapeError(f"expected (m, {layer.router.shape[1]}) input, got {x.shape}")
    _, topk, gates = route(layer.router, x, top_k)
    sg = slot_gates(layer, topk, gates)
    y = np.zeros_like(x)
    for s, e in enumerate(layer.experts):
        rows = np.flatnonzero(sg[:, s])
        if rows.size:
            y[rows] += sg[rows, s, None] * expert_forward(e, x[rows])
    return y, topk, gates


def layer_forward(layer: MoELayer, x, top_k: int):
    """Single-token layer forward.

    Returns ``(y, selected, gates)``: the output vector, the set of selected
    original expert indices, and a ``{slot: gate}`` map after summing gates of
    originals merged into the same slot.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("layer_forward takes a single vector; use layer_forward_batch")
    y, topk, gates = layer_forward_batch(layer, x[None, :], top_k)
    sg = slot_gates(layer, topk, gates)[0]
    return y[0], frozenset(topk[0].tolist()), {int(s): float(sg[s]) for s in np.flatnonzero(sg)}


def stack_forward(model: MoEStack, x) -> np.ndarray:
    """Residual stack ``x <- x + layer(x)``; accepts a vector or row tokens."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x.copy()
    if h.shape[1] != model.config.d_model:
        raise ShapeError(f"expected width {model.config.d_model}, got {h.shape[1]}")
    for layer in model.layers:
        y, _, _ = layer_forward_batch(layer, h, model.config.top_k)
        h = h + y
    return h[0] if single else h


@dataclass(frozen=True)
class RedundancySpec:
    """How many distinct base experts a layer has and how much noise separates copies."""

    n_distinct: int
    noise: float = 0.0


def gen_synthetic(config: ModelConfig, redundancy: RedundancySpec, seed: int | None = None) -> MoEStack:
    """Deterministic toy MoE stack with controlled expert redundancy.

    Expert ``i`` is ``base[i % n_distinct] + noise * U(-a, a)`` with
    ``a = 1/sqrt(d_model)``. The noise draws are taken even when ``noise == 0``
    so that models differing only in ``noise`` share bases, routers and noise
    directions. All values are rounded to float32 so checkpoints are lossless.
    """
    if not 1 <= redundancy.n_distinct <= config.n_experts:
        raise ValueError("n_distinct must be in [1, n_experts]")
    if redundancy.noise < 0:
        raise ValueError("noise must be >= 0")
    rng = np.random.default_rng(config.seed if seed is None else seed)
    d, h, n = config.d_model, config.d_expert, config.n_experts
    a = 1.0 / np.sqrt(d)
    shapes = {"gate": (h, d), "up": (h, d), "down": (d, h)}

    def f32(w):
        return w.astype(np.float32).astype(np.float64)

    layers = []
    for _ in range(config.n_layers):
        bases = [{r: rng.uniform(-a, a, shapes[r]) for r in ROLES} for _ in range(redundancy.n_distinct)]
        experts = []
        for i in range(n):
            base = bases[i % redundancy.n_distinct]
            experts.append(
                ExpertWeights(**{r: f32(base[r] + redundancy.noise * rng.uniform(-a, a, shapes[r])) for r in ROLES})
            )
        router = f32(rng.uniform(-a, a, (n, d)))
        layers.append(MoELayer(router=router, experts=experts))
    return MoEStack(config=config, layers=layers)


def param_count(model: MoEStack) -> int:
    """Router entries plus expert entries (``r * (O + I)`` per factored role)."""
    return sum(layer.router.size + sum(e.num_params() for e in layer.experts) for layer in model.layers)


def expert_param_count(model: MoEStack) -> int:
    return sum(e.num_params() for layer in model.layers for e in layer.experts)
