"""Merge per-run metrics CSVs and draw loss / divergence curves."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .train import CSV_COLUMNS, LOSS_COLUMNS

# no timestamps or version strings, so reruns give identical bytes
_PNG_METADATA = {"Software": None}


def read_metrics_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = tuple(reader.fieldnames or ())
        if header[-len(CSV_COLUMNS):] != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        return list(reader)


def _run_ids(paths: Sequence[Path]) -> list[str]:
    # parent directory names identify runs; fall back to the index on clashes
    ids = [p.parent.name or p.stem for p in paths]
    if len(set(ids)) != len(ids):
        ids = [f"{i}:{name}" for i, name in enumerate(ids)]
    return ids


def merge_metrics(paths: Sequence[str | Path], out_path: str | Path, run_ids: Sequence[str] | None = None) -> list[tuple[str, dict]]:
    paths = [Path(p) for p in paths]
    if not paths:
        raise ValueError("report needs at least one metrics file")
    ids = list(run_ids) if run_ids is not None else _run_ids(paths)
    merged = []
    for rid, p in zip(ids, paths):
        merged += [(rid, row) for row in read_metrics_csv(p)]
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if len(paths) == 1:
            w.writerow(CSV_COLUMNS)
            w.writerows([row[c] for c in CSV_COLUMNS] for _, row in merged)
        else:
            w.writerow(("run",) + CSV_COLUMNS)
            w.writerows([rid] + [row[c] for c in CSV_COLUMNS] for rid, row in merged)
    return merged


def _series(rows, column):
    xs, ys = [], []
    for row in rows:
        if row.get(column, "") != "":
            xs.append(int(row["iter"]))
            ys.append(float(row[column]))
    return xs, ys


def _plot(merged, columns, ylabel, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    runs = list(dict.fromkeys(rid for rid, _ in merged))
    for rid in runs:
        rows = [r for i, r in merged if i == rid]
        for col in columns:
            xs, ys = _series(rows, col)
            if xs:
                label = col if len(runs) == 1 else f"{rid} {col}"
                ax.plot(xs, ys, marker="o", markersize=3, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    if ax.lines:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_METADATA)
    plt.close(fig)


def report(csv_paths: Sequence[str | Path], out_dir: str | Path) -> dict[str, Path]:
    """Write ``metrics.csv``, ``losses.png`` and ``divergence.png`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"metrics": out / "metrics.csv", "losses": out / "losses.png", "divergence": out / "divergence.png"}
    merged = merge_metrics(csv_paths, files["metrics"])
    _plot(merged, LOSS_COLUMNS, "loss", files["losses"])
    _plot(merged, ("dH_F2",), "proxy divergence on F2", files["divergence"])
    return files
