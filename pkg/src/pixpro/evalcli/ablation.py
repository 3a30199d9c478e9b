"""Grid runner: pretrain + probes per config cell, cached per cell directory."""

from __future__ import annotations

import itertools
import json
import logging
from pathlib import Path

import numpy as np

from ..data import Dataset
from ..trainer.config import TrainRunConfig
from ..trainer.loop import run_pretrain
from .probes import evaluate_checkpoint

log = logging.getLogger(__name__)

REPORT_NAME = "report.json"


def expand_grid(axes: dict[str, list]) -> list[dict]:
    """Cartesian product of ``{key: [values...]}`` into override dicts."""
    keys = sorted(axes)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(axes[k] for k in keys))]


def cell_dir(root: Path, cfg: TrainRunConfig) -> Path:
    return root / f"cell-{cfg.digest()[:16]}"


def run_cell(cfg: TrainRunConfig, overrides: dict, out: Path, dataset: Dataset,
             probe_set: Dataset | None, n_pairs: int, seed: int) -> dict:
    report_path = out / REPORT_NAME
    if report_path.exists():
        return json.loads(report_path.read_text())
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = run_pretrain(cfg, out, dataset=dataset, resume=True)
        probe = probe_set or dataset
        reports = evaluate_checkpoint(result.checkpoint, probe.images, probe.labels, n_pairs, seed)
        row = {"overrides": overrides, "config_digest": cfg.digest(), "status": "ok",
               "metrics": {r.metric: r.value for r in reports},
               "reports": [r.to_dict() for r in reports]}
    except Exception as exc:  # a failed cell is recorded, the grid goes on
        log.warning("cell %s failed: %s", overrides, exc)
        row = {"overrides": overrides, "config_digest": cfg.digest(), "status": "failed",
               "error": f"{type(exc).__name__}: {exc}", "metrics": {}}
        # failures are not cached so a fixed cell reruns next time
        return row
    report_path.write_text(json.dumps(row, sort_keys=True))
    return row


def run_ablation(grid: list[dict], base: TrainRunConfig, out_dir: str | Path, dataset: Dataset,
                 probe_set: Dataset | None = None, n_pairs: int = 256, seed: int = 0) -> list[dict]:
    """Run every cell of ``grid`` (override dicts on ``base``); returns rows sorted by config."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for overrides in grid:
        try:
            cfg = base.replace(**overrides)
        except Exception as exc:
            rows.append({"overrides": overrides, "config_digest": None, "status": "failed",
                         "error": f"{type(exc).__name__}: {exc}", "metrics": {}})
            continue
        rows.append(run_cell(cfg, overrides, cell_dir(root, cfg), dataset, probe_set, n_pairs, seed))
    rows.sort(key=lambda r: json.dumps(r["overrides"], sort_keys=True))
    with open(root / "table.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    (root / "table.txt").write_text(format_table(rows))
    return rows


def format_table(rows: list[dict]) -> str:
    metrics = sorted({m for r in rows for m in r["metrics"]})
    header = ["config", "status"] + metrics
    lines = ["\t".join(header)]
    for r in rows:
        cfg = ",".join(f"{k}={v}" for k, v in sorted(r["overrides"].items())) or "(base)"
        vals = [f"{r['metrics'][m]:.4f}" if m in r["metrics"] and np.isfinite(r["metrics"][m]) else "-"
                for m in metrics]
        lines.append("\t".join([cfg, r["status"]] + vals))
    return "\n".join(lines) + "\n"
