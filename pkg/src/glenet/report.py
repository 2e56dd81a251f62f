"""Metric tables and derived charts.

Tables are plain CSV with stable, documented headers (each writer states
its own).  Charts are self-contained SVG line plots rendered from the same
rows — derived artifacts only, never a data source.  All output is
deterministic text written atomically.
"""

from __future__ import annotations

import csv
import io
import math
import os
from typing import Optional, Sequence

from .dataio import atomic_write_text
from .errors import DataError

__all__ = ["write_csv", "read_csv", "svg_line_chart", "build_report"]


def write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    """CSV with a fixed header row; floats keep full repr precision."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    atomic_write_text(path, buf.getvalue())


def read_csv(path: str) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


def svg_line_chart(
    path: str,
    series: dict[str, list[tuple[float, float]]],
    title: str,
    x_label: str,
    y_label: str,
    log_y: bool = False,
) -> None:
    """A minimal self-contained SVG line plot of one or more (x, y) series."""
    width, height = 640, 400
    left, right, top, bottom = 64, 16, 36, 48
    plot_w, plot_h = width - left - right, height - top - bottom
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]

    points = [(x, y) for pts in series.values() for x, y in pts if math.isfinite(y)]
    if not points:
        raise DataError("nothing to plot: every series is empty or non-finite")
    ys = [math.log10(y) for _, y in points if y > 0] if log_y else [y for _, y in points]
    if log_y and not ys:
        raise DataError("log-scale chart needs at least one positive value")
    xs = [x for x, _ in points]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def px(x: float) -> float:
        return left + (x - x0) / (x1 - x0) * plot_w

    def py(y: float) -> float:
        return top + (1.0 - (y - y0) / (y1 - y0)) * plot_h

    def fmt(v: float) -> str:
        return f"{v:.6g}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<rect x="{left}" y="{top}" width="{plot_w}" height="{plot_h}" '
        f'fill="none" stroke="#444"/>',
    ]
    for tx in _ticks(x0, x1):
        parts.append(
            f'<text x="{px(tx):.1f}" y="{height - bottom + 16}" text-anchor="middle">'
            f"{fmt(tx)}</text>")
    for ty in _ticks(y0, y1):
        shown = 10.0 ** ty if log_y else ty
        parts.append(
            f'<text x="{left - 6}" y="{py(ty):.1f}" text-anchor="end" '
            f'dominant-baseline="middle">{fmt(shown)}</text>')
    parts.append(
        f'<text x="{left + plot_w / 2:.1f}" y="{height - 10}" text-anchor="middle">'
        f"{x_label}</text>")
    parts.append(
        f'<text x="16" y="{top + plot_h / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {top + plot_h / 2:.1f})">{y_label}</text>')
    for k, (name, pts) in enumerate(sorted(series.items())):
        drawable = [(x, y) for x, y in pts
                    if math.isfinite(y) and (not log_y or y > 0)]
        if not drawable:
            continue
        color = palette[k % len(palette)]
        coords = " ".join(
            f"{px(x):.2f},{py(math.log10(y) if log_y else y):.2f}" for x, y in drawable)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        parts.append(f'<text x="{left + 8}" y="{top + 16 + 16 * k}" fill="{color}">'
                     f"{name}</text>")
    parts.append("</svg>")
    atomic_write_text(path, "\n".join(parts) + "\n")


# Tables the report step looks for in a run directory, with the columns the
# chart renderer expects of each.
_KNOWN_TABLES = {
    "train_loss.csv": {"x": "epoch", "ys": ["l_rec", "l_kl"], "log_y": False},
    "nll.csv": {"x": "epoch", "ys": ["nll"], "log_y": False},
    "probdet_history.csv": {"x": "epoch", "ys": ["loss"], "log_y": False},
    "probdet_metrics.csv": None,  # categorical; no chart
}


def build_report(run_dir: str, out_dir: str) -> list[str]:
    """Collect the known tables of a run into one report directory.

    Copies each table found in ``run_dir``, renders a line chart for the
    numeric ones, and writes ``summary.csv`` (columns: ``table, rows,
    chart``) listing everything emitted.  Returns the emitted file names;
    a run with none of the known tables is an error.
    """
    os.makedirs(out_dir, exist_ok=True)
    emitted: list[str] = []
    summary_rows = []
    for name, spec in _KNOWN_TABLES.items():
        src = os.path.join(run_dir, name)
        if not os.path.exists(src):
            continue
        header, rows = read_csv(src)
        write_csv(os.path.join(out_dir, name), header, rows)
        emitted.append(name)
        chart = ""
        if spec is not None and rows:
            xi = header.index(spec["x"])
            series = {}
            for y_name in spec["ys"]:
                if y_name not in header:
                    continue
                yi = header.index(y_name)
                series[y_name] = [(float(r[xi]), float(r[yi])) for r in rows]
            if series:
                chart = name.replace(".csv", ".svg")
                svg_line_chart(os.path.join(out_dir, chart), series,
                               title=name.replace(".csv", ""),
                               x_label=spec["x"], y_label="value",
                               log_y=spec["log_y"])
                emitted.append(chart)
        summary_rows.append([name, len(rows), chart])
    if not summary_rows:
        raise DataError(f"no known tables found in {run_dir}; expected any of "
                        f"{sorted(_KNOWN_TABLES)}")
    write_csv(os.path.join(out_dir, "summary.csv"),
              ["table", "rows", "chart"], summary_rows)
    emitted.append("summary.csv")
    return emitted
