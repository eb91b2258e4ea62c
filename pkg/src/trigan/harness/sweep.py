"""Trainer x size x repeat grid, summary and aggregate tables."""
from __future__ import annotations

import csv
import json
import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from ..training import TRAINER_LABELS, TrainerKind, train_run
from .config import ExperimentConfig, resolve_datasets

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("trainer", "size", "repeat", "seed", "final_acc", "best_acc", "status", "run")
AGGREGATE_COLUMNS = ("trainer", "size", "n", "mean", "std", "median", "mean_best")


def sweep_cells(config: ExperimentConfig):
    """Per-cell configs; repeat ``k`` uses seed ``config.seed + k``."""
    cells = []
    for trainer in config.trainers:
        for size in config.train_sizes:
            for k in range(config.repeats):
                cell = config.replace(trainer=trainer, n_train=int(size), seed=config.seed + k)
                cells.append((k, cell))
    return cells


def run_cell(cell: ExperimentConfig) -> dict:
    """Train one cell; failures are reported in the row rather than raised."""
    digest = cell.run_hash()
    row = {"trainer": cell.trainer, "size": cell.n_train, "seed": cell.seed, "run": digest}
    try:
        train, val = resolve_datasets(cell)
        result = train_run(cell, train, val, Path(cell.out_dir) / digest, config_hash=digest)
    except Exception as exc:  # one bad cell must not sink the sweep
        logger.error("cell %s/%s seed %s failed: %s", cell.trainer, cell.n_train, cell.seed, exc)
        row.update(final_acc=None, best_acc=None, status=f"failed: {exc}")
        return row
    row.update(final_acc=result.final_accuracy, best_acc=result.best_accuracy, status="ok")
    return row


def _fmt(v):
    return "" if v is None else (repr(float(v)) if isinstance(v, float) else str(v))


def aggregate(rows):
    """Mean, sample std, median of final accuracy (and mean best) per trainer x size."""
    groups = {}
    for r in rows:
        if r["final_acc"] is None:
            continue
        groups.setdefault((r["trainer"], int(r["size"])), []).append(r)
    out = []
    for (trainer, size), grp in groups.items():
        finals = [float(r["final_acc"]) for r in grp]
        bests = [float(r["best_acc"]) for r in grp]
        out.append(
            {
                "trainer": trainer,
                "size": size,
                "n": len(finals),
                "mean": statistics.fmean(finals),
                "std": statistics.stdev(finals) if len(finals) > 1 else 0.0,
                "median": statistics.median(finals),
                "mean_best": statistics.fmean(bests),
            }
        )
    order = {k.value: i for i, k in enumerate(TRAINER_LABELS)}
    out.sort(key=lambda a: (order.get(a["trainer"], 99), a["size"]))
    return out


def table_markdown(agg, trainers, sizes) -> str:
    """Trainers as rows, training sizes as columns, ``mean ± std`` accuracy in percent.

    Cells without a successful run show ``-``.
    """
    cells = {(a["trainer"], a["size"]): a for a in agg}
    lines = [
        "| Model | " + " | ".join(str(s) for s in sizes) + " |",
        "|---|" + "---|" * len(sizes),
    ]
    for t in trainers:
        vals = []
        for s in sizes:
            a = cells.get((t, int(s)))
            vals.append("-" if a is None else f"{100 * a['mean']:.2f} ± {100 * a['std']:.2f}")
        lines.append(f"| {TRAINER_LABELS[TrainerKind(t)]} | " + " | ".join(vals) + " |")
    return "\n".join(lines) + "\n"


def run_sweep(config: ExperimentConfig):
    """Run every cell, then write ``summary.csv``, ``aggregate.csv`` and ``table.md``.

    Returns ``(sweep_dir, rows, aggregate_rows, n_failed)``.
    """
    cells = sweep_cells(config)
    configs = [c for _, c in cells]
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(run_cell, configs))
    else:
        results = [run_cell(c) for c in configs]
    rows = []
    for (k, _), res in zip(cells, results):
        rows.append(dict(res, repeat=k))
    sweep_dir = Path(config.out_dir) / config.sweep_hash()
    sweep_dir.mkdir(parents=True, exist_ok=True)
    with open(sweep_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in SUMMARY_COLUMNS])
    agg = aggregate(rows)
    with open(sweep_dir / "aggregate.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_COLUMNS)
        for a in agg:
            w.writerow([_fmt(a[c]) for c in AGGREGATE_COLUMNS])
    (sweep_dir / "table.md").write_text(table_markdown(agg, config.trainers, [int(s) for s in config.train_sizes]))
    (sweep_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    failed = sum(1 for r in rows if r["status"] != "ok")
    return sweep_dir, rows, agg, failed
