"""Ablation grids over component toggles and hyperparameters."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .config import COMPONENTS, ExperimentConfig
from .train import train

logger = logging.getLogger(__name__)

# components switched on one at a time, in the order of the ablation table
COMPONENT_CHAIN = ("MDA", "SPM", "SBC", "ASM", "SCR")

ABLATION_COLUMNS = ("cell",) + COMPONENTS + ("zeta", "pool_h", "pool_w", "seed", "iterations", "L_all", "dH_F2", "score")


@dataclass
class AblationCell:
    name: str
    overrides: dict = field(default_factory=dict)


def component_chain() -> list[AblationCell]:
    cells = []
    for i in range(1, len(COMPONENT_CHAIN) + 1):
        on = set(COMPONENT_CHAIN[:i])
        toggles = {c: c in on for c in COMPONENTS}
        name = COMPONENT_CHAIN[0] if i == 1 else "+" + COMPONENT_CHAIN[i - 1]
        cells.append(AblationCell(name, {"components": toggles}))
    return cells


def parse_grid(grid: Any) -> list[AblationCell]:
    """Accepted shapes:

    * ``"chain"`` or ``{"preset": "chain"}``: the cumulative component chain.
    * ``{"sweep": {"key": dotted.key, "values": [...]}}``: one cell per value.
    * ``{"cells": [{"name": ..., "overrides": {...}}, ...]}`` or a bare list of such.
    """
    if isinstance(grid, str):
        grid = {"preset": grid}
    if isinstance(grid, list):
        grid = {"cells": grid}
    if not isinstance(grid, dict):
        raise TypeError(f"unsupported grid description: {type(grid).__name__}")
    cells: list[AblationCell] = []
    preset = grid.get("preset")
    if preset is not None:
        if preset != "chain":
            raise ValueError(f"unknown grid preset {preset!r}")
        cells += component_chain()
    sweep = grid.get("sweep")
    if sweep is not None:
        key = sweep["key"]
        for v in sweep["values"]:
            cells.append(AblationCell(f"{key}={v}", {key: v}))
    for i, c in enumerate(grid.get("cells", [])):
        cells.append(AblationCell(str(c.get("name", f"cell{i}")), dict(c.get("overrides", {}))))
    if not cells:
        raise ValueError("ablation grid has no cells")
    return cells


def load_grid(path: str | Path) -> list[AblationCell]:
    return parse_grid(yaml.safe_load(Path(path).read_text()))


def _row(cell: AblationCell, cfg: ExperimentConfig, history) -> dict:
    last = history[-1] if history else None
    row = {"cell": cell.name}
    row.update({c: int(getattr(cfg.components, c)) for c in COMPONENTS})
    row.update(
        zeta=cfg.labeling.zeta,
        pool_h=cfg.pooling.pool_size[0],
        pool_w=cfg.pooling.pool_size[1],
        seed=cfg.seed,
        iterations=cfg.training.iterations,
        L_all=last.losses.get("L_all") if last else None,
        dH_F2=last.dH_F2 if last else None,
        score=last.score if last else None,
    )
    return row


def _run_cell(args) -> dict:
    cell, cfg, out_dir = args
    result = train(cfg, out_dir)
    return _row(cell, cfg, result.history)


def run_ablation(
    base_config: ExperimentConfig,
    grid: Any,
    out_dir: str | Path | None = None,
    workers: int = 1,
) -> list[dict]:
    """Train and evaluate every cell; rows come back in grid order.

    All cell configs are validated before any training starts, so an invalid
    toggle combination fails fast.
    """
    cells = grid if isinstance(grid, list) and all(isinstance(c, AblationCell) for c in grid) else parse_grid(grid)
    configs = [base_config.with_overrides(c.overrides) for c in cells]
    root = Path(out_dir) if out_dir is not None else None
    jobs = [(c, cfg, root / f"{i:02d}_{_slug(c.name)}" if root else None) for i, (c, cfg) in enumerate(zip(cells, configs))]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = [_run_cell(j) for j in jobs]
    _log_trend(rows)
    if root is not None:
        write_ablation_csv(rows, root / "ablation.csv")
    return rows


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


def _log_trend(rows: list[dict]) -> None:
    scores = [r["score"] for r in rows if r["score"] is not None]
    monotone = all(b >= a for a, b in zip(scores, scores[1:]))
    logger.info("ablation scores %s (monotone: %s)", scores, monotone)


def write_ablation_csv(rows: list[dict], path: str | Path) -> None:
    def fmt(v):
        if v is None:
            return ""
        return repr(float(v)) if isinstance(v, float) else str(v)

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([fmt(r.get(c)) for c in ABLATION_COLUMNS])
