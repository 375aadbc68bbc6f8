"""Stage-by-stage pipeline: ingest, split, train, generate, assemble, evaluate.

Every stage reads its inputs from and writes its outputs to an output
directory, so a single stage can be re-run from the artifacts of the previous
one. ``run_pipeline`` chains them and writes a manifest that is enough to
reproduce everything in the directory.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import accountant
from .assembler import assemble_graph, count_edges, read_samples, symmetrize, write_samples
from .config import ExperimentConfig
from .evaluation import EvaluationReport, evaluate
from .graph import EdgeSplit, Graph, largest_connected_component, read_edge_list, split_edges, write_edge_list
from .model import generate_samples, load_checkpoint, save_checkpoint
from .training import derive_seed, samples_to_pairs, train

logger = logging.getLogger(__name__)

FAILED_MARKER = "FAILED"
CONFIG_FILE = "effective_config.ini"
GRAPH_FILE = "graph.txt"
SPLIT_DIR = "split"
CHECKPOINT_FILE = "generator.ckpt"
HISTORY_FILE = "history.jsonl"
SAMPLES_FILE = "samples.txt"
ASSEMBLED_FILE = "assembled.txt"
REPORT_FILE = "report.json"
REPORT_CSV = "report.csv"
MANIFEST_FILE = "manifest.json"


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class Seeds:
    split: int
    train: int
    generate: int
    assemble: int

    @classmethod
    def from_master(cls, seed: int) -> "Seeds":
        return cls(*(derive_seed(seed, name) for name in ("split", "train", "generate", "assemble")))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def stage_ingest(dataset, out: Path) -> tuple[Graph, dict]:
    graph, stats = read_edge_list(dataset)
    lcc, keep = largest_connected_component(graph)
    write_edge_list(out / GRAPH_FILE, lcc)
    np.savetxt(out / "node_ids.txt", keep, fmt="%d")
    info = {"input_nodes": graph.num_nodes, "input_edges": graph.num_edges, "lcc_nodes": lcc.num_nodes,
            "lcc_edges": lcc.num_edges, "self_loops_dropped": stats.self_loops_dropped,
            "duplicates_dropped": stats.duplicates_dropped}
    _write_json(out / "ingest.json", info)
    return lcc, info


def stage_split(graph: Graph, val_fraction: float, seed: int, out: Path) -> EdgeSplit:
    split = split_edges(graph, val_fraction, seed)
    split.save(out / SPLIT_DIR)
    return split


def stage_train(train_graph: Graph, split: EdgeSplit | None, cfg: ExperimentConfig, seed: int, out: Path):
    model_cfg = cfg.model_config(train_graph.num_nodes)
    result = train(train_graph, split, model_cfg, cfg.gan, cfg.dp, seed, mode=cfg.experiment.mode)
    history = result.history
    (out / HISTORY_FILE).write_text(history.to_jsonl())
    summary = {
        "ledger": result.ledger.to_dict(),
        "target_delta": cfg.dp.target_delta,
        "dp_enabled": cfg.dp.enabled,
        "epsilon": result.trainer.epsilon(),
        "stop_reason": history.stop_reason,
        "best_checkpoint": None if history.best_index is None else history.records[history.best_index].epoch,
        "generator_steps": result.trainer.generator_steps,
    }
    save_checkpoint(out / CHECKPOINT_FILE, result.generator, result.discriminator,
                    global_step=result.trainer.generator_steps, rng=result.trainer.rng, extra=summary)
    return result, summary


def stage_generate(checkpoint, volume: int, seed: int, out: Path) -> np.ndarray:
    if volume <= 0:
        raise ValueError("no samples: sample_volume must be positive")
    gen, _, _ = load_checkpoint(checkpoint)
    samples = generate_samples(gen, volume, seed)
    write_samples(out / SAMPLES_FILE, samples)
    return samples


def stage_assemble(samples: np.ndarray, num_nodes: int, target_edges: int, seed: int, out: Path):
    if len(samples) == 0:
        raise ValueError("no samples to assemble")
    sm = symmetrize(count_edges(samples_to_pairs(samples), num_nodes))
    graph, stats = assemble_graph(sm, target_edges, seed, return_stats=True)
    write_edge_list(out / ASSEMBLED_FILE, graph)
    _write_json(out / "assembly.json", {
        "target_edges": target_edges, "seed": seed, "support_pairs": stats.support_pairs,
        "phase1_edges": stats.phase1_edges, "phase2_edges": stats.phase2_edges,
        "isolated_nodes": stats.isolated_nodes, "dropped_self_pairs": sm.dropped_self_pairs,
    })
    return graph, sm


def stage_evaluate(generated: Graph, reference: Graph, sm, split, epsilon: float, provenance: dict,
                   out: Path) -> EvaluationReport:
    report = evaluate(generated, reference, sm, split, epsilon=epsilon, provenance=provenance)
    (out / REPORT_FILE).write_text(report.to_json())
    (out / REPORT_CSV).write_text(",".join(report.csv_columns()) + "\n" + report.to_csv_row())
    return report


class _Stages:
    """Runs named stages, turning any exception into a StageError and a FAILED marker."""

    def __init__(self, out: Path):
        self.out = out
        self.timings: dict[str, float] = {}

    def __call__(self, name, fn, *args):
        t0 = time.perf_counter()
        logger.info("stage %s", name)
        try:
            result = fn(*args)
        except Exception as exc:
            (self.out / FAILED_MARKER).write_text(f"stage: {name}\nerror: {type(exc).__name__}: {exc}\n")
            raise StageError(name, exc) from exc
        self.timings[name] = time.perf_counter() - t0
        return result


def run_pipeline(cfg: ExperimentConfig, out_dir=None) -> EvaluationReport:
    """Ingest through evaluation; returns the report and leaves every artifact in ``out_dir``."""
    out = Path(out_dir or cfg.experiment.output_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    (out / FAILED_MARKER).unlink(missing_ok=True)
    (out / CONFIG_FILE).write_text(cfg.to_ini())
    exp = cfg.experiment
    seeds = Seeds.from_master(exp.seed)
    stage = _Stages(out)

    graph, ingest_info = stage("ingest", stage_ingest, exp.dataset, out)
    split = None
    train_graph = graph
    if exp.val_fraction > 0:
        split = stage("split", stage_split, graph, exp.val_fraction, seeds.split, out)
        train_graph = split.train
    _, train_summary = stage("train", stage_train, train_graph, split, cfg, seeds.train, out)
    samples = stage("generate", stage_generate, out / CHECKPOINT_FILE, exp.sample_volume, seeds.generate, out)
    generated, sm = stage("assemble", stage_assemble, samples, graph.num_nodes, train_graph.num_edges,
                          seeds.assemble, out)
    epsilon = train_summary["epsilon"]
    provenance = {
        "config_hash": cfg.digest(),
        "seed": exp.seed,
        "seeds": seeds.__dict__,
        "mode": exp.mode if exp.mode == "edge" else f"walk({exp.walk_length})",
        "label": exp.label,
        "target_delta": cfg.dp.target_delta,
        "stop_reason": train_summary["stop_reason"],
        "edge_overlap_reference": "train graph",
    }
    report = stage("evaluate", stage_evaluate, generated, train_graph, sm, split, epsilon, provenance, out)

    _write_json(out / MANIFEST_FILE, {
        "config_hash": cfg.digest(),
        "config_file": CONFIG_FILE,
        "seed": exp.seed,
        "seeds": seeds.__dict__,
        "ingest": ingest_info,
        "train": train_summary,
        "epsilon": epsilon,
        "artifacts": [GRAPH_FILE] + ([SPLIT_DIR] if split else []) + [CHECKPOINT_FILE, HISTORY_FILE, SAMPLES_FILE, ASSEMBLED_FILE,
                      REPORT_FILE, REPORT_CSV],
        "wall_clock": stage.timings,
    })
    return report


def recompute_epsilon(manifest: dict) -> float:
    """Epsilon from the ledger fields recorded in a run manifest."""
    train_info = manifest["train"]
    if not train_info["dp_enabled"]:
        return math.inf
    led = train_info["ledger"]
    ledger = accountant.advance(
        accountant.make_ledger(led["sampling_rate"], led["noise_scale"], led["orders"], led["sampling"]),
        led["steps"])
    return accountant.epsilon_for_delta(ledger, train_info["target_delta"])


def baseline_run(cfg: ExperimentConfig, out_dir=None) -> EvaluationReport:
    """Non-private random-walk run, labelled as a baseline."""
    if cfg.experiment.mode != "walk":
        raise ValueError("baseline runs use walk mode")
    cfg = cfg.replace(**{"dp.enabled": False, "experiment.label": cfg.experiment.label or "baseline"})
    return run_pipeline(cfg, out_dir)


SWEEP_COLUMNS = ["sigma", "clip_bound", "status", "epsilon", "max_degree", "assortativity", "triangle_count",
                 "power_law_exponent", "clustering_coefficient", "characteristic_path_length", "auc", "ap",
                 "edge_overlap", "error"]


def _row_dir(root: Path, sigma: float, clip: float) -> Path:
    return root / f"sigma={sigma:g}_clip={clip:g}"


def _sweep_row(sigma, clip, report: EvaluationReport | None, error: str = "") -> dict:
    row = {"sigma": sigma, "clip_bound": clip, "status": "ok" if report else "failed", "error": error}
    if report is not None:
        d = report.to_dict()
        row.update({k: d[k] for k in SWEEP_COLUMNS if k in d})
        row["epsilon"] = report.epsilon_at_eval
    return row


def run_sweep(base: ExperimentConfig, sigma_grid, clip_grid, out_dir, resume: bool = False) -> list[dict]:
    """One pipeline run per (sigma, C) pair; writes ``sweep.csv`` and returns its rows.

    A failed row is recorded with its error and the sweep moves on. With
    ``resume`` a row whose directory already holds a report (and no FAILED
    marker) is read back instead of re-run.
    """
    sigma_grid, clip_grid = list(sigma_grid), list(clip_grid)
    if not sigma_grid or not clip_grid:
        raise ValueError("sweep grids must be non-empty")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for clip in clip_grid:
        for sigma in sigma_grid:
            row_out = _row_dir(root, sigma, clip)
            done = (row_out / REPORT_FILE).exists() and not (row_out / FAILED_MARKER).exists()
            if resume and done:
                logger.info("skipping finished row sigma=%g C=%g", sigma, clip)
                report = EvaluationReport.from_dict(json.loads((row_out / REPORT_FILE).read_text()))
                rows.append(_sweep_row(sigma, clip, report))
                continue
            try:
                cfg = base.replace(**{"dp.noise_scale": sigma, "dp.clip_bound": clip})
                rows.append(_sweep_row(sigma, clip, run_pipeline(cfg, row_out)))
            except (StageError, ValueError) as exc:
                logger.error("row sigma=%g C=%g failed: %s", sigma, clip, exc)
                rows.append(_sweep_row(sigma, clip, None, str(exc)))
    with open(root / "sweep.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, SWEEP_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows
