"""Calibration data, activation capture and the statistics derived from it."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.linalg import cholesky

from .io import read_container, write_container
from .model import MoEStack, ShapeError, expert_forward, expert_hidden, route, slot_gates

DEFAULT_CALIB_TOKENS = 32 * 128
DEFAULT_EPS_SCALE = 1e-6


@dataclass(frozen=True)
class CalibSet:
    tokens: np.ndarray  # (m, d_model)
    source: str

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ShapeError("calibration set needs at least one token")
        if not np.all(np.isfinite(self.tokens)):
            raise ValueError("calibration tokens must be finite")

    @property
    def m(self) -> int:
        return self.tokens.shape[0]


def make_calib(d_model: int, m: int = DEFAULT_CALIB_TOKENS, seed: int = 0) -> CalibSet:
    """``m`` i.i.d. standard normal tokens, rounded to float32."""
    if m < 1:
        raise ValueError("m must be >= 1")
    tokens = np.random.default_rng(seed).standard_normal((m, d_model))
    return CalibSet(tokens.astype(np.float32).astype(np.float64), f"synthetic(seed={seed})")


def save_calib(calib: CalibSet, path) -> None:
    write_container(path, {"kind": "calib"}, [("calib", calib.tokens)])


def load_calib(path) -> CalibSet:
    _, tensors = read_container(path)
    if "calib" not in tensors:
        raise ValueError(f"{path}: no 'calib' tensor")
    return CalibSet(tensors["calib"], f"file({path})")


def parse_calib_spec(spec: str, d_model: int, seed: int = 0) -> CalibSet:
    """``synth:<m>`` or ``file:<path>``."""
    kind, _, arg = spec.partition(":")
    if kind == "synth":
        return make_calib(d_model, int(arg) if arg else DEFAULT_CALIB_TOKENS, seed)
    if kind == "file":
        calib = load_calib(arg)
        if calib.tokens.shape[1] != d_model:
            raise ShapeError(f"calibration width {calib.tokens.shape[1]} != d_model {d_model}")
        return calib
    raise ValueError(f"bad calibration spec {spec!r}; expected synth:<m> or file:<path>")


@dataclass(frozen=True)
class LayerTrace:
    inputs: np.ndarray  # (m, d_model) layer input per token
    outputs: np.ndarray  # (n, m, d_model) dense E_i(x) for every original expert
    router_logits: np.ndarray  # (m, n)
    topk: np.ndarray  # (m, top_k) selected original indices

    @property
    def n_experts(self) -> int:
        return self.outputs.shape[0]

    @property
    def m(self) -> int:
        return self.inputs.shape[0]

    def routed_mask(self, expert: int) -> np.ndarray:
        return np.any(self.topk == expert, axis=1)


@dataclass(frozen=True)
class ActivationTrace:
    layers: list
    top_k: int

    @property
    def m(self) -> int:
        return self.layers[0].m if self.layers else 0


def capture(model: MoEStack, calib: CalibSet) -> ActivationTrace:
    """One forward sweep recording layer inputs, dense expert outputs and routing.

    Every original expert is evaluated on every token; the residual stream
    advances with the routed layer output. The model is not modified.
    """
    cfg = model.config
    if calib.tokens.shape[1] != cfg.d_model:
        raise ShapeError(f"calibration width {calib.tokens.shape[1]} != d_model {cfg.d_model}")
    x = calib.tokens.astype(np.float64, copy=True)
    layers = []
    for layer in model.layers:
        logits, topk, gates = route(layer.router, x, cfg.top_k)
        slot_out = np.stack([expert_forward(e, x) for e in layer.experts])
        outputs = slot_out[layer.expert_map]
        sg = slot_gates(layer, topk, gates)
        y = np.einsum("ms,smd->md", sg, slot_out)
        layers.append(LayerTrace(inputs=x, outputs=outputs, router_logits=logits, topk=topk))
        x = x + y
    return ActivationTrace(layers=layers, top_k=cfg.top_k)


def save_trace(trace: ActivationTrace, path) -> None:
    tensors = []
    for i, lt in enumerate(trace.layers):
        tensors.append((f"layer.{i}.inputs", lt.inputs))
        tensors.append((f"layer.{i}.router_logits", lt.router_logits))
        tensors.append((f"layer.{i}.topk", lt.topk.astype(np.float64)))
        for j in range(lt.n_experts):
            tensors.append((f"layer.{i}.expert.{j}.outputs", lt.outputs[j]))
    meta = {"kind": "trace", "n_layers": len(trace.layers), "top_k": trace.top_k}
    write_container(path, meta, tensors)


def load_trace(path) -> ActivationTrace:
    header, t = read_container(path)
    if header.get("kind") != "trace":
        raise ValueError(f"{path}: not an activation trace")
    layers = []
    for i in range(int(header["n_layers"])):
        n = t[f"layer.{i}.router_logits"].shape[1]
        layers.append(
            LayerTrace(
                inputs=t[f"layer.{i}.inputs"],
                outputs=np.stack([t[f"layer.{i}.expert.{j}.outputs"] for j in range(n)]),
                router_logits=t[f"layer.{i}.router_logits"],
                topk=t[f"layer.{i}.topk"].astype(np.int64),
            )
        )
    return ActivationTrace(layers=layers, top_k=int(header["top_k"]))


@dataclass(frozen=True)
class FrequencyTable:
    """Per-layer routing counts; ``freqs(layer)[i]`` is the share of tokens selecting ``i``."""

    counts: list  # per layer, int array of length n
    n_tokens: int

    def freqs(self, layer: int) -> np.ndarray:
        return self.counts[layer] / self.n_tokens

    def exact(self, layer: int) -> list[Fraction]:
        return [Fraction(int(c), self.n_tokens) for c in self.counts[layer]]


def expert_frequencies(trace: ActivationTrace) -> FrequencyTable:
    counts = [np.bincount(lt.topk.ravel(), minlength=lt.n_experts) for lt in trace.layers]
    return FrequencyTable(counts=counts, n_tokens=trace.m)


def whitening_matrix(acts: np.ndarray, eps_scale: float = DEFAULT_EPS_SCALE) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor ``S`` with ``S S^T = A^T A + eps I``.

    ``acts`` holds one activation per row, shape ``(m, I)``. The jitter is
    ``eps_scale`` times the mean diagonal of the Gram matrix, or ``eps_scale``
    itself when the activations are all zero. Returns ``(S, eps)``.
    """
    acts = np.asarray(acts, dtype=np.float64)
    if acts.ndim != 2 or acts.shape[0] < 1:
        raise ShapeError("activations must be a non-empty (m, I) matrix")
    if not np.all(np.isfinite(acts)):
        raise ValueError("activations must be finite")
    dim = acts.shape[1]
    gram = acts.T @ acts
    tr = np.trace(gram)
    eps = eps_scale * tr / dim if tr > 0 else eps_scale
    gram[np.diag_indices(dim)] += eps
    return cholesky(gram, lower=True), eps


def role_inputs(model: MoEStack, trace: ActivationTrace, layer: int, expert: int) -> dict[str, np.ndarray]:
    """Per-role input activations of one original expert on the tokens routed to it.

    gate/up see the layer input; down sees the expert's hidden activation.
    Falls back to all tokens if the expert was never selected.
    """
    lt = trace.layers[layer]
    mask = lt.routed_mask(expert)
    x = lt.inputs[mask] if mask.any() else lt.inputs
    ly = model.layers[layer]
    e = ly.experts[ly.expert_map[expert]]
    return {"gate": x, "up": x, "down": expert_hidden(e, x)}


@dataclass
class WhitenCache:
    """Lazily computed whitening factors keyed by ``(layer, expert, role)``."""

    model: MoEStack
    trace: ActivationTrace
    eps_scale: float = DEFAULT_EPS_SCALE

    def __post_init__(self):
        self._s: dict = {}
        self.eps_used: dict = {}

    def get(self, layer: int, expert: int, role: str) -> np.ndarray:
        key = (layer, expert, "up" if role == "gate" else role)
        if key not in self._s:
            acts = role_inputs(self.model, self.trace, layer, expert)[key[2]]
            self._s[key], self.eps_used[key] = whitening_matrix(acts, self.eps_scale)
        return self._s[key]
