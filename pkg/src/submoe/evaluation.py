"""Fidelity measurements for compressed models."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calib import ActivationTrace, CalibSet
from .cluster import similarity_matrix
from .io import atomic_write_text
from .merge import union_svd
from .model import ROLES, MoEStack, ShapeError, expert_hidden, layer_forward_batch, route


def _rel_errors(ref: np.ndarray, other: np.ndarray) -> np.ndarray:
    """Per-row ``||ref - other|| / ||ref||``; a zero reference row gives 0 if matched, else 1."""
    num = np.linalg.norm(ref - other, axis=1)
    den = np.linalg.norm(ref, axis=1)
    out = np.where(num > 0, 1.0, 0.0)
    np.divide(num, den, out=out, where=den > 0)
    return out


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-row cosine; two zero rows count as identical (1), one zero row as 0."""
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    den = na * nb
    out = np.where((na == 0) & (nb == 0), 1.0, 0.0)
    np.divide(np.sum(a * b, axis=1), den, out=out, where=den > 0)
    return np.clip(out, -1.0, 1.0)


@dataclass
class DivergenceReport:
    end_to_end_rel_error: float
    end_to_end_cosine: float
    layers: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "end_to_end": {"rel_error": self.end_to_end_rel_error, "cosine": self.end_to_end_cosine},
            "layers": self.layers,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def group_residuals(orig: MoEStack, comp: MoEStack, layer: int, x: np.ndarray) -> list:
    """Gate-weighted role mismatch of every merged slot.

    For slot ``s`` with members ``Q`` and role input ``x_i`` of member ``i``,
    reports the token mean of ``|| sum_{i in Q} G_i(x) (W_i - W_merged) x_i ||``,
    where ``G_i`` are the original routing gates (zero if unselected).
    """
    cfg = orig.config
    ol, cl = orig.layers[layer], comp.layers[layer]
    _, topk, gates = route(ol.router, x, cfg.top_k)
    g_full = np.zeros((x.shape[0], cfg.n_experts))
    np.put_along_axis(g_full, topk, gates, axis=1)
    out = []
    for slot, members in enumerate(cl.groups()):
        merged = cl.experts[slot]
        per_role = {}
        for role in ROLES:
            wm = merged.weight(role)
            acc = 0.0
            for i in members:
                e = ol.experts[ol.expert_map[i]]
                xi = expert_hidden(e, x) if role == "down" else x
                acc = acc + g_full[:, i, None] * (xi @ (e.weight(role) - wm).T)
            per_role[role] = float(np.mean(np.linalg.norm(np.atleast_2d(acc), axis=1)))
        out.append({"slot": slot, "members": members, "residual": per_role})
    return out


def output_divergence(orig: MoEStack, comp: MoEStack, calib: CalibSet, residuals: bool = True) -> DivergenceReport:
    """Compare two models on the calibration tokens.

    Per-layer statistics feed both models the original model's layer input;
    end-to-end statistics compare full stack outputs.
    """
    if orig.config.n_layers != comp.config.n_layers or orig.config.d_model != comp.config.d_model:
        raise ShapeError("models have different shapes")
    k = orig.config.top_k
    x = calib.tokens.astype(np.float64, copy=True)
    xc = x.copy()
    layers = []
    for li, (lo, lc) in enumerate(zip(orig.layers, comp.layers)):
        yo, _, _ = layer_forward_batch(lo, x, k)
        yc, _, _ = layer_forward_batch(lc, x, k)
        entry = {
            "layer": li,
            "rel_error": float(np.mean(_rel_errors(yo, yc))),
            "cosine": float(np.mean(_cosine_rows(yo, yc))),
        }
        if residuals:
            entry["groups"] = group_residuals(orig, comp, li, x)
        layers.append(entry)
        xc = xc + layer_forward_batch(lc, xc, k)[0]
        x = x + yo
    return DivergenceReport(
        end_to_end_rel_error=float(np.mean(_rel_errors(x, xc))),
        end_to_end_cosine=float(np.mean(_cosine_rows(x, xc))),
        layers=layers,
    )


@dataclass
class AlignmentReport:
    """Expert similarity before (output cosine) and after subspace alignment.

    ``post[i, j]`` is the cosine between the right-factor blocks of experts
    ``i`` and ``j`` in a union decomposition of the whole layer, averaged over
    the three weight roles.
    """

    layer: int
    pre: np.ndarray
    post: np.ndarray

    def to_dict(self) -> dict:
        return {"layer": self.layer, "pre": self.pre.tolist(), "post": self.post.tolist(),
                "post_definition": "cosine between per-expert V blocks of a layer-wide union SVD"}


def _block_cosines(blocks: list) -> np.ndarray:
    flat = np.stack([b.ravel() for b in blocks])
    norms = np.linalg.norm(flat, axis=1)
    unit = np.divide(flat, norms[:, None], out=np.zeros_like(flat), where=norms[:, None] > 0)
    return unit @ unit.T


def alignment_heatmaps(model: MoEStack, trace: ActivationTrace, layer: int) -> AlignmentReport:
    ly = model.layers[layer]
    experts = [ly.experts[ly.expert_map[i]] for i in range(ly.n_original)]
    post = np.zeros((ly.n_original, ly.n_original))
    for role in ROLES:
        dec = union_svd([e.weight(role) for e in experts])
        # directions with ~zero singular value are arbitrary; leave them out
        keep = dec.sigma > dec.sigma.max() * 1e-12 if dec.sigma.size and dec.sigma.max() > 0 else slice(0, 0)
        post += _block_cosines([b[keep] for b in dec.blocks])
    post /= len(ROLES)
    post = np.clip(0.5 * (post + post.T), -1.0, 1.0)
    return AlignmentReport(layer=layer, pre=similarity_matrix(trace, layer), post=post)


def matrix_csv(mat: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + [f"e{j}" for j in range(mat.shape[1])])
    for i, row in enumerate(mat):
        w.writerow([f"e{i}"] + [repr(float(v)) for v in row])
    return buf.getvalue()


def write_heatmaps(report: AlignmentReport, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for name in ("pre", "post"):
        p = out_dir / f"layer{report.layer}_{name}.csv"
        atomic_write_text(p, matrix_csv(getattr(report, name)))
        paths.append(p)
    return paths
