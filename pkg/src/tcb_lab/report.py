"""Shared statistics and tabular reporting: Pearson r, least squares, tables."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

Cell = float | int | str | None


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r_squared: float
    n: int


@dataclass
class ReportTable:
    """Rectangular table of cells; ``None`` means not-applicable."""

    columns: list[str]
    rows: list[list[Cell]] = field(default_factory=list)
    caption: str = ""

    def __post_init__(self):
        for row in self.rows:
            self._check_row(row)

    def _check_row(self, row) -> None:
        if len(row) != len(self.columns):
            raise ValueError(
                f"row has {len(row)} cells, table has {len(self.columns)} columns"
            )

    def add_row(self, row: list[Cell]) -> None:
        self._check_row(row)
        self.rows.append(list(row))


def pearson(x, y) -> float:
    """Sample Pearson correlation, in [-1, 1]; constant inputs are undefined."""
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.ndim != 1 or ya.ndim != 1 or xa.size != ya.size:
        raise ValueError("pearson needs two equal-length 1-D sequences")
    if xa.size < 2:
        raise ValueError("pearson needs at least two samples")
    xc = xa - xa.mean()
    yc = ya - ya.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("correlation undefined for constant input")
    r = float(xc @ yc) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def linear_fit(x, y) -> LinearFit:
    """Ordinary least squares y ~ slope*x + intercept, with R^2.

    Mean-centered normal equations keep the solve well conditioned.  A
    constant y gives slope 0, intercept y, and R^2 = 0 by convention.
    """
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.ndim != 1 or ya.ndim != 1 or xa.size != ya.size:
        raise ValueError("linear_fit needs two equal-length 1-D sequences")
    n = xa.size
    if n < 2:
        raise ValueError("linear_fit needs at least two points")
    xc = xa - xa.mean()
    sxx = float(xc @ xc)
    if sxx == 0.0:
        raise ValueError("linear_fit undefined for constant x")
    yc = ya - ya.mean()
    slope = float(xc @ yc) / sxx
    intercept = float(ya.mean() - slope * xa.mean())
    syy = float(yc @ yc)
    r2 = 0.0 if syy == 0.0 else pearson(xa, ya) ** 2
    return LinearFit(slope=slope, intercept=intercept, r_squared=r2, n=n)


def _format_float(value: float) -> str:
    return f"{value:.6g}"


def _cell_csv(cell: Cell) -> str:
    if cell is None:
        return ""
    if isinstance(cell, bool):
        return "true" if cell else "false"
    if isinstance(cell, float):
        return _format_float(cell)
    return str(cell)


def _cell_json(cell: Cell):
    if isinstance(cell, float):
        if not math.isfinite(cell):
            return repr(cell).strip("'")  # "inf" / "-inf" / "nan" as strings
        return float(_format_float(cell))
    return cell


def _cell_markdown(cell: Cell) -> str:
    return "n/a" if cell is None else _cell_csv(cell)


def render_table(table: ReportTable, fmt: str) -> str:
    """Deterministic serialization; floats carry 6 significant digits."""
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(table.columns)
        for row in table.rows:
            writer.writerow([_cell_csv(c) for c in row])
        return buf.getvalue()
    if fmt == "json":
        doc = {
            "caption": table.caption,
            "columns": table.columns,
            "rows": [[_cell_json(c) for c in row] for row in table.rows],
        }
        return json.dumps(doc, indent=2) + "\n"
    if fmt == "markdown":
        lines = []
        if table.caption:
            lines.append(f"**{table.caption}**")
            lines.append("")
        lines.append("| " + " | ".join(table.columns) + " |")
        lines.append("| " + " | ".join("---" for _ in table.columns) + " |")
        for row in table.rows:
            lines.append("| " + " | ".join(_cell_markdown(c) for c in row) + " |")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown table format {fmt!r}")


def emit_table(table: ReportTable, fmt: str, path) -> None:
    Path(path).write_text(render_table(table, fmt), newline="")
