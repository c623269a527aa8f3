"""Command-line pipeline: gen -> stats -> plan -> merge -> eval / inspect."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from . import calib as calib_mod
from .cluster import ClusterPlan, multilayer_plan
from .evaluation import alignment_heatmaps, output_divergence, write_heatmaps
from .io import CheckpointError, atomic_write_text, load_checkpoint, save_checkpoint
from .merge import MergeConfig, compress_model
from .model import ModelConfig, RedundancySpec, gen_synthetic

logger = logging.getLogger("submoe")

METRIC_FLAGS = {"output": "expert_output", "router": "router_logits", "weight": "weight"}
ALGO_FLAGS = {"kmeans": "kmeans", "hier": "hierarchical", "random": "random"}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    # generator
    d_model: int = 32
    d_expert: int = 64
    n_layers: int = 4
    n_experts: int = 8
    top_k: int = 2
    n_distinct: int = 8
    noise: float = 0.0
    # pipeline
    seed: int = 0
    calib: str = f"synth:{calib_mod.DEFAULT_CALIB_TOKENS}"
    metric: str = "output"
    algo: str = "kmeans"
    window: int = 2
    keep_ratio: float = 0.5
    v_merge: str = "frequency"
    rank_ratio: float = 0.0
    whiten: bool = False
    store_factored: bool = False

    def validate(self) -> None:
        if self.metric not in METRIC_FLAGS:
            raise UsageError(f"--metric must be one of {sorted(METRIC_FLAGS)}")
        if self.algo not in ALGO_FLAGS:
            raise UsageError(f"--algo must be one of {sorted(ALGO_FLAGS)}")
        if not 0 < self.keep_ratio <= 1:
            raise UsageError("--keep-ratio must be in (0, 1]")
        if not 0 <= self.rank_ratio < 1:
            raise UsageError("--rank-ratio must be in [0, 1)")
        if self.store_factored and self.rank_ratio == 0:
            raise UsageError("--store-factored requires --rank-ratio > 0")
        if self.window < 1:
            raise UsageError("--window must be >= 1")
        if not self.calib.startswith(("synth:", "file:")):
            raise UsageError("--calib must be synth:<m> or file:<path>")

    def merge_config(self) -> MergeConfig:
        return MergeConfig(v_merge=self.v_merge, rank_ratio=self.rank_ratio, whiten=self.whiten,
                           store_factored=self.store_factored)


def load_config_file(path) -> dict:
    path = Path(path)
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        data = tomllib.loads(path.read_text())
    else:
        data = json.loads(path.read_text())
    known = {f.name for f in fields(RunConfig)}
    data = {k.replace("-", "_"): v for k, v in data.items()}
    unknown = set(data) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return data


def build_config(args) -> RunConfig:
    values = load_config_file(args.config) if args.config else {}
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def _write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2) + "\n")


def cmd_gen(cfg: RunConfig, args) -> None:
    mc = ModelConfig(cfg.d_model, cfg.d_expert, cfg.n_layers, cfg.n_experts, cfg.top_k, cfg.seed)
    model = gen_synthetic(mc, RedundancySpec(cfg.n_distinct, cfg.noise))
    save_checkpoint(model, args.out)
    if args.calib_out:
        calib_mod.save_calib(calib_mod.parse_calib_spec(cfg.calib, mc.d_model, cfg.seed), args.calib_out)


def _calib_for(model, cfg):
    return calib_mod.parse_calib_spec(cfg.calib, model.config.d_model, cfg.seed)


def cmd_stats(cfg: RunConfig, args) -> None:
    model = load_checkpoint(args.model)
    trace = calib_mod.capture(model, _calib_for(model, cfg))
    calib_mod.save_trace(trace, args.out)


def cmd_plan(cfg: RunConfig, args) -> None:
    model = load_checkpoint(args.model)
    trace = calib_mod.load_trace(args.trace)
    plan = multilayer_plan(model, trace, cfg.keep_ratio, cfg.window, METRIC_FLAGS[cfg.metric],
                           ALGO_FLAGS[cfg.algo], cfg.seed)
    atomic_write_text(args.out, plan.to_json())


def cmd_merge(cfg: RunConfig, args) -> None:
    model = load_checkpoint(args.model)
    trace = calib_mod.load_trace(args.trace)
    plan = ClusterPlan.from_json(Path(args.plan).read_text())
    out, report = compress_model(model, plan, trace, cfg.merge_config())
    save_checkpoint(out, args.out)
    if args.report:
        atomic_write_text(args.report, report.to_json())
    logger.info("parameters %d -> %d", report.params_before, report.params_after)


def cmd_eval(cfg: RunConfig, args) -> None:
    orig = load_checkpoint(args.orig)
    comp = load_checkpoint(args.comp)
    report = output_divergence(orig, comp, _calib_for(orig, cfg))
    atomic_write_text(args.out, report.to_json())
    logger.info("end-to-end relative error %.3e", report.end_to_end_rel_error)


def cmd_inspect(cfg: RunConfig, args) -> None:
    model = load_checkpoint(args.model)
    trace = calib_mod.load_trace(args.trace)
    report = alignment_heatmaps(model, trace, args.layer)
    write_heatmaps(report, args.out_dir)
    _write_json(Path(args.out_dir) / f"layer{args.layer}_alignment.json", report.to_dict())


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--calib", help="synth:<m> or file:<path>")
    common.add_argument("-v", "--verbose", action="store_true")

    opts = argparse.ArgumentParser(add_help=False)
    opts.add_argument("--keep-ratio", dest="keep_ratio", type=float)
    opts.add_argument("--rank-ratio", dest="rank_ratio", type=float)
    opts.add_argument("--window", type=int)
    opts.add_argument("--metric", choices=sorted(METRIC_FLAGS))
    opts.add_argument("--algo", choices=sorted(ALGO_FLAGS))
    opts.add_argument("--v-merge", dest="v_merge", choices=["frequency", "average", "drop"])
    opts.add_argument("--whiten", action="store_true", default=None)
    opts.add_argument("--store-factored", dest="store_factored", action="store_true", default=None)

    p = argparse.ArgumentParser(prog="submoe", description="Compress MoE stacks by subspace expert merging.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic checkpoint")
    g.add_argument("-o", "--out", required=True)
    g.add_argument("--calib-out", help="also write the calibration set here")
    for name, typ in (("d_model", int), ("d_expert", int), ("n_layers", int), ("n_experts", int),
                      ("top_k", int), ("n_distinct", int), ("noise", float)):
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)

    s = sub.add_parser("stats", parents=[common], help="capture activations into a trace file")
    s.add_argument("model")
    s.add_argument("-o", "--out", required=True)

    pl = sub.add_parser("plan", parents=[common, opts], help="cluster experts into a plan")
    pl.add_argument("model")
    pl.add_argument("trace")
    pl.add_argument("-o", "--out", required=True)

    m = sub.add_parser("merge", parents=[common, opts], help="merge experts per plan")
    m.add_argument("model")
    m.add_argument("plan")
    m.add_argument("trace")
    m.add_argument("-o", "--out", required=True)
    m.add_argument("--report")

    e = sub.add_parser("eval", parents=[common], help="compare original and compressed outputs")
    e.add_argument("orig")
    e.add_argument("comp")
    e.add_argument("-o", "--out", required=True)

    i = sub.add_parser("inspect", parents=[common], help="write alignment heatmaps as CSV")
    i.add_argument("model")
    i.add_argument("trace")
    i.add_argument("--layer", type=int, default=0)
    i.add_argument("--out-dir", dest="out_dir", required=True)
    return p


COMMANDS = {"gen": cmd_gen, "stats": cmd_stats, "plan": cmd_plan, "merge": cmd_merge,
            "eval": cmd_eval, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
    except (UsageError, TypeError) as exc:
        parser.print_usage(sys.stderr)
        print(f"submoe: error: {exc}", file=sys.stderr)
        return 2
    try:
        COMMANDS[args.command](cfg, args)
    except (CheckpointError, ValueError, OSError) as exc:
        print(f"submoe {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
