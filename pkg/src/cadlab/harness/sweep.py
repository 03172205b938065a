"""Grids over K, alpha and missing rate, plus the named ablation rows; one CSV row per cell."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .config import TrainConfig
from .train import train, write_csv

K_GRID = (16, 32, 64, 128)
ALPHA_GRID = (0.1, 0.3, 0.5, 0.7)
RATE_GRID = (0.1, 0.2, 0.3, 0.4, 0.5)

ABLATIONS = {
    "full": {},
    "A1": {"cbdm": False},
    "A4": {"mdm": False},
    "A5": {"masking_mode": "multi"},
    "A6": {"dictionary_mode": "random"},
    "baseline": {"cbdm": False, "mdm": False},
}


@dataclass
class Cell:
    sweep: str
    value: object
    config: TrainConfig
    data: Callable[[], tuple[list, list]] | None = None


def grid_cells(kind: str, base: TrainConfig, values=None) -> list[Cell]:
    if kind == "K":
        return [Cell("K", k, base.with_overrides(K=k)) for k in (values or K_GRID)]
    if kind == "alpha":
        return [Cell("alpha", a, base.with_overrides(alpha=a)) for a in (values or ALPHA_GRID)]
    if kind == "ablation":
        names = values or list(ABLATIONS)
        return [Cell("ablation", n, base.with_overrides(**ABLATIONS[n])) for n in names]
    raise ValueError(f"unknown sweep {kind!r}; missing-rate grids need rate_cells()")


def rate_cells(base: TrainConfig, make_data: Callable[[float], tuple[list, list]], values=None) -> list[Cell]:
    """``make_data(rate)`` returns (train, test) masked at that missing rate."""
    return [Cell("missing_rate", r, base, (lambda r=r: make_data(r))) for r in (values or RATE_GRID)]


def run_cells(cells: list[Cell], train_samples=None, test_samples=None, out_csv=None, run_root=None) -> list[dict]:
    rows = []
    for i, cell in enumerate(cells):
        tr, te = cell.data() if cell.data is not None else (train_samples, test_samples)
        run_dir = None if run_root is None else Path(run_root) / f"{cell.sweep}_{i:02d}_{cell.value}"
        result = train(cell.config, tr, te, out_dir=run_dir)
        row = {"sweep": cell.sweep, "value": cell.value, "seed": cell.config.seed}
        row.update(result.metrics.as_row())
        rows.append(row)
    if out_csv is not None:
        write_csv(out_csv, rows)
    return rows
