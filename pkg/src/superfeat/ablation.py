"""Ablation harness: train/evaluate a grid of configuration cells.

A grid is either an explicit list of override mappings or a mapping of
dotted keys to value lists (expanded as a cross product).  Cells share
cached checkpoints and codebooks through the content-hash directories, so
cells differing only in retrieval knobs reuse one training run.  Per-cell
failures are recorded in the results table and the harness continues.
"""

from __future__ import annotations

import itertools
import json
import logging
from pathlib import Path

from . import pipeline, report
from .config import RunConfig, apply_overrides
from .evaluation import evaluate_retrieval
from .training import measure_match_stats

log = logging.getLogger(__name__)

MATCH_STAT_TUPLES = 50

RESULT_HEADER = ["cell", "map", "avg_clusters", "match_ratio", "mean_matchset",
                 "status"]


def expand_grid(grid) -> list[dict]:
    """Normalize a grid spec into a list of {dotted key: value} cells."""
    if isinstance(grid, list):
        return [dict(cell) for cell in grid]
    if isinstance(grid, dict):
        keys = sorted(grid)
        cells = []
        for combo in itertools.product(*(grid[k] for k in keys)):
            cells.append(dict(zip(keys, combo)))
        return cells
    raise ValueError("grid must be a list of cells or a key -> values mapping")


def _cell_config(base: RunConfig, cell: dict) -> RunConfig:
    return apply_overrides(base, [f"{k}={json.dumps(v)}" for k, v in cell.items()])


def run_cell(cfg: RunConfig, root: Path) -> dict:
    """Train (or reuse), evaluate retrieval, and measure match statistics."""
    pipeline.cmd_train(cfg, root)
    model = pipeline.require_model(cfg, root)
    eval_set = pipeline.dataset_for_split(cfg, "eval")
    result = evaluate_retrieval(
        model, eval_set, scales=cfg.retrieval.scales, budget=cfg.retrieval.budget,
        codebook_k=cfg.retrieval.codebook_size,
        kmeans_iterations=cfg.retrieval.kmeans_iterations,
        alpha=cfg.retrieval.selectivity_alpha,
        tau=cfg.retrieval.selectivity_threshold, seed=cfg.seed)
    train_set = pipeline.dataset_for_split(cfg, "train")
    stats = measure_match_stats(model, train_set, cfg, num_tuples=MATCH_STAT_TUPLES)
    return {
        "map": result["map"],
        "avg_clusters": result["avg_clusters"],
        "match_ratio": stats["match_ratio"],
        "mean_matchset": stats["mean_matchset"],
    }


def ablation_harness(base: RunConfig, grid, root: Path,
                     out_dir: Path | None = None) -> list[dict]:
    """Run every cell; emit ablation.csv (and a memory figure for budget
    sweeps) under the base config's run directory."""
    cells = expand_grid(grid)
    out_dir = Path(out_dir) if out_dir else pipeline.prepare_run(base, root)
    rows = []
    for cell in cells:
        label = json.dumps(cell, sort_keys=True)
        try:
            cfg = _cell_config(base, cell)
            metrics = run_cell(cfg, root)
            rows.append({"cell": label, **metrics, "status": "ok"})
            log.info("cell %s: mAP %.4f", label, metrics["map"])
        except Exception as exc:  # noqa: BLE001 - harness must keep going
            rows.append({"cell": label, "map": "", "avg_clusters": "",
                         "match_ratio": "", "mean_matchset": "",
                         "status": f"error:{type(exc).__name__}"})
            log.warning("cell %s failed: %s", label, exc)
    csv_rows = [[row["cell"], row["map"], row["avg_clusters"], row["match_ratio"],
                 row["mean_matchset"], row["status"]] for row in rows]
    report.write_csv(out_dir / "ablation.csv", RESULT_HEADER, csv_rows)

    budget_cells = [(cell, row) for cell, row in zip(cells, rows)
                    if set(cell) == {"retrieval.budget"} and row["status"] == "ok"]
    if len(budget_cells) >= 2:
        sweep = [(cell["retrieval.budget"], row["avg_clusters"], row["map"])
                 for cell, row in budget_cells]
        report.save_memory_sweep_figure(sweep, out_dir / "ablation_memory.png")
    return rows
