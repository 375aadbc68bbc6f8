"""``dp-graphgen`` command line.

Exit codes: 0 success, 2 configuration or usage error, 3 stage failure.
Output defaults to ``$DP_GRAPHGEN_OUT/<command>`` (or ``./dp-graphgen-out/<command>``).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

from . import accountant, pipeline
from .assembler import count_edges, read_samples, symmetrize
from .config import ConfigError, ExperimentConfig, apply_overrides, load_config, parse_assignment
from .graph import EdgeSplit, read_edge_list
from .training import samples_to_pairs

OUT_ENV = "DP_GRAPHGEN_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def default_out(command: str) -> Path:
    return Path(os.environ.get(OUT_ENV, "dp-graphgen-out")) / command


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (INI sections experiment/model/gan/dp)")
    common.add_argument("--seed", type=int, help="master seed (overrides experiment.seed)")
    common.add_argument("--out", type=Path, help=f"output directory (default ${OUT_ENV}/<command>)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dp-graphgen", description="Differentially private graph generation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="parse an edge list and keep its largest component")
    p.add_argument("edges", type=Path)

    p = sub.add_parser("split", parents=[common], help="hold out validation edges and non-edges")
    p.add_argument("graph", type=Path)
    p.add_argument("--val-fraction", type=float)

    p = sub.add_parser("train", parents=[common], help="train the generator on a saved split")
    p.add_argument("split_dir", type=Path)

    p = sub.add_parser("generate", parents=[common], help="sample sequences from a checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--num-samples", type=int)

    p = sub.add_parser("assemble", parents=[common], help="build a graph from sampled sequences")
    p.add_argument("--samples", type=Path, required=True)
    p.add_argument("--target-edges", type=int, required=True)
    p.add_argument("--num-nodes", type=int, required=True)

    p = sub.add_parser("evaluate", parents=[common], help="compute statistics of a generated graph")
    p.add_argument("generated", type=Path)
    p.add_argument("--reference", type=Path, required=True)
    p.add_argument("--samples", type=Path, help="samples for link-prediction scoring (needs --split)")
    p.add_argument("--split", type=Path, help="split directory for link-prediction scoring")
    p.add_argument("--epsilon", type=float, default=math.inf)

    p = sub.add_parser("account", parents=[common], help="privacy spend of the subsampled Gaussian mechanism")
    p.add_argument("--q", type=float, required=True, help="sampling rate")
    p.add_argument("--sigma", type=float, required=True, help="noise multiplier")
    p.add_argument("--steps", type=int, required=True)
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument("--delta", type=float, help="report epsilon at this delta")
    target.add_argument("--epsilon", type=float, help="report delta at this epsilon")
    p.add_argument("--max-order", type=int, default=64)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("run", parents=[common], help="full pipeline from edge list to report")
    p.add_argument("--dataset", type=Path)
    p.add_argument("--baseline", action="store_true", help="non-private random-walk baseline")

    p = sub.add_parser("sweep", parents=[common], help="run the pipeline over a sigma x C grid")
    p.add_argument("--dataset", type=Path)
    p.add_argument("--sigmas", type=_floats, required=True)
    p.add_argument("--clips", type=_floats, default=[0.05, 0.1, 0.5, 1.0])
    p.add_argument("--resume", action="store_true")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = dict(parse_assignment(item) for item in args.set)
    if args.seed is not None:
        overrides["experiment.seed"] = str(args.seed)
    if getattr(args, "dataset", None) is not None:
        overrides["experiment.dataset"] = str(args.dataset)
    return apply_overrides(cfg, overrides) if overrides else cfg


def _out(args, cfg: ExperimentConfig) -> Path:
    out = args.out or (Path(cfg.experiment.output_dir) if cfg.experiment.output_dir else default_out(args.command))
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_account(args, cfg) -> int:
    ledger = accountant.advance(
        accountant.make_ledger(args.q, args.sigma, range(1, args.max_order + 1)), args.steps)
    if args.delta is not None:
        value, order = accountant.epsilon_with_order(ledger, args.delta)
        result = {"epsilon": value, "delta": args.delta, "order": order}
        text = f"epsilon = {value:.6g} at delta = {args.delta:g} (order {order})"
    else:
        value, order = accountant.delta_with_order(ledger, args.epsilon)
        result = {"delta": value, "epsilon": args.epsilon, "order": order}
        text = f"delta = {value:.6g} at epsilon = {args.epsilon:g} (order {order})"
    result.update(q=args.q, sigma=args.sigma, steps=args.steps)
    print(json.dumps(result, sort_keys=True) if args.json else text)
    return EXIT_OK


def _run_stage(name, fn, *a):
    try:
        return fn(*a)
    except Exception as exc:
        raise pipeline.StageError(name, exc) from exc


def cmd_ingest(args, cfg):
    out = _out(args, cfg)
    _, info = _run_stage("ingest", pipeline.stage_ingest, args.edges, out)
    print(json.dumps(info, sort_keys=True))
    return EXIT_OK


def cmd_split(args, cfg):
    out = _out(args, cfg)
    frac = args.val_fraction if args.val_fraction is not None else cfg.experiment.val_fraction
    graph = _run_stage("split", lambda p: read_edge_list(p)[0], args.graph)
    split = _run_stage("split", pipeline.stage_split, graph, frac, cfg.experiment.seed, out)
    print(f"train edges {split.train.num_edges}, validation pairs {len(split.validation_edges)}")
    return EXIT_OK


def cmd_train(args, cfg):
    out = _out(args, cfg)
    split = _run_stage("train", EdgeSplit.load, args.split_dir)
    _, summary = _run_stage("train", pipeline.stage_train, split.train, split, cfg, cfg.experiment.seed, out)
    print(json.dumps({k: summary[k] for k in ("epsilon", "stop_reason", "best_checkpoint")}))
    return EXIT_OK


def cmd_generate(args, cfg):
    out = _out(args, cfg)
    volume = args.num_samples if args.num_samples is not None else cfg.experiment.sample_volume
    samples = _run_stage("generate", pipeline.stage_generate, args.checkpoint, volume, cfg.experiment.seed, out)
    print(f"wrote {len(samples)} samples to {out / pipeline.SAMPLES_FILE}")
    return EXIT_OK


def cmd_assemble(args, cfg):
    out = _out(args, cfg)
    samples = _run_stage("assemble", read_samples, args.samples)
    graph, _ = _run_stage("assemble", pipeline.stage_assemble, samples, args.num_nodes, args.target_edges,
                          cfg.experiment.seed, out)
    print(f"assembled {graph.num_edges} edges on {graph.num_nodes} nodes")
    return EXIT_OK


def cmd_evaluate(args, cfg):
    out = _out(args, cfg)

    def run():
        generated, _ = read_edge_list(args.generated)
        reference, _ = read_edge_list(args.reference)
        sm = split = None
        if args.samples is not None and args.split is not None:
            sm = symmetrize(count_edges(samples_to_pairs(read_samples(args.samples)), generated.num_nodes))
            split = EdgeSplit.load(args.split)
        return pipeline.stage_evaluate(generated, reference, sm, split, args.epsilon, {}, out)

    report = _run_stage("evaluate", run)
    sys.stdout.write(report.to_json())
    return EXIT_OK


def cmd_run(args, cfg):
    if not cfg.experiment.dataset:
        raise ConfigError("experiment.dataset is not set (use --dataset or the config file)")
    out = _out(args, cfg)
    report = (pipeline.baseline_run if args.baseline else pipeline.run_pipeline)(cfg, out)
    print(f"epsilon {report.epsilon_at_eval:.6g}, auc {report.auc}, ap {report.ap}; artifacts in {out}")
    return EXIT_OK


def cmd_sweep(args, cfg):
    if not cfg.experiment.dataset:
        raise ConfigError("experiment.dataset is not set (use --dataset or the config file)")
    out = _out(args, cfg)
    rows = pipeline.run_sweep(cfg, args.sigmas, args.clips, out, resume=args.resume)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} rows, {failed} failed; table in {out / 'sweep.csv'}")
    return EXIT_STAGE if failed else EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest, "split": cmd_split, "train": cmd_train, "generate": cmd_generate,
    "assemble": cmd_assemble, "evaluate": cmd_evaluate, "account": cmd_account, "run": cmd_run,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except ValueError as exc:
        # invalid arguments outside any stage (e.g. accountant inputs)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
