"""Table and figure emitters that read metrics CSVs and pipeline logs.

Figures are written as plain SVG with a companion CSV holding exactly the
plotted numbers; every mark also carries its value in a ``data-value``
attribute so the two can be checked against each other.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .evaluate import LEDGER_COMPONENTS, read_metrics_rows
from .model import POLICIES, SuiteCategory

POLICY_LABELS = {
    "random": "Random",
    "greedy": "Greedy",
    "ml_only": "ML-Only",
    "quantum_enhanced": "Quantum-Enhanced",
}

FIGURES = ("fig1", "fig2", "fig3", "fig4", "fig5")

_FIGURE_COLUMNS = {
    "fig1": ("policy", "apfd"),
    "fig3": ("policy", "n", "tet"),
    "fig4": ("policy", *(f"overhead_{c}" for c in LEDGER_COMPONENTS)),
    "fig5": ("policy", "category", "apfd"),
}


class ReportError(ValueError):
    pass


class MissingColumn(ReportError):
    def __init__(self, column: str, figure: str) -> None:
        super().__init__(f"{figure}: missing column {column!r}")
        self.column = column
        self.figure = figure


class ReportWarning(UserWarning):
    pass


class MissingPolicy(ReportWarning):
    pass


def _rows(metrics: str | Path | Sequence[Mapping]) -> list[dict]:
    if isinstance(metrics, Path):
        return read_metrics_rows(metrics)
    if isinstance(metrics, str):
        return read_metrics_rows(Path(metrics))
    return [dict(r) for r in metrics]


def _num(value: float) -> str:
    """One decimal, trailing zeros dropped: 113.0 -> 113, 0.50 -> 0.5."""
    text = f"{value:.1f}"
    if text.endswith(".0"):
        text = text[:-2]
    return "0" if text == "-0" else text


def _csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return out.getvalue()


# --------------------------------------------------------------------- table

@dataclass(frozen=True)
class Table1:
    rows: tuple[tuple[str, str, str, str], ...]  # label, APFD %, TET, overhead

    @property
    def header(self) -> tuple[str, str, str, str]:
        return ("Model", "APFD (%)", "TET (s)", "Overhead (s)")

    def values(self) -> list[tuple[float, float, float]]:
        return [(float(a), float(t), float(o)) for _, a, t, o in self.rows]

    def to_text(self) -> str:
        table = [self.header, *self.rows]
        widths = [max(len(r[k]) for r in table) for k in range(4)]
        lines = []
        for r in table:
            cells = [r[0].ljust(widths[0])] + [r[k].rjust(widths[k]) for k in range(1, 4)]
            lines.append("  ".join(cells).rstrip())
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        return _csv(self.header, self.rows)


def emit_table1(metrics: str | Path | Sequence[Mapping]) -> Table1:
    """Per-policy means of APFD (as a percentage), TET and total overhead."""
    rows = _rows(metrics)
    if not rows:
        warnings.warn("no metrics rows; table is empty", MissingPolicy, stacklevel=2)
        return Table1(())
    for column in ("policy", "apfd", "tet", "overhead_total"):
        if column not in rows[0]:
            raise MissingColumn(column, "table1")
    out = []
    for policy in POLICIES:
        picked = [r for r in rows if r["policy"] == policy]
        if not picked:
            warnings.warn(f"no rows for policy {policy}; row omitted", MissingPolicy, stacklevel=2)
            continue
        out.append(
            (
                POLICY_LABELS[policy],
                f"{100.0 * math.fsum(float(r['apfd']) for r in picked) / len(picked):.1f}",
                _num(math.fsum(float(r["tet"]) for r in picked) / len(picked)),
                _num(math.fsum(float(r["overhead_total"]) for r in picked) / len(picked)),
            )
        )
    return Table1(tuple(out))


# ----------------------------------------------------------------------- SVG

WIDTH, HEIGHT = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 20, 40, 60
PALETTE = ("#8c8c8c", "#4c72b0", "#55a868", "#c44e52", "#8172b2", "#ccb974")


def _f(x: float) -> str:
    return f"{x:.2f}"


class _Svg:
    def __init__(self, title: str, width: int = WIDTH, height: int = HEIGHT) -> None:
        self.width, self.height = width, height
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">',
            f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        ]
        self.text(width / 2, 22, title, size=15, anchor="middle")

    def text(self, x, y, s, size=11, anchor="start", rotate=None) -> None:
        transform = f' transform="rotate({rotate} {_f(x)} {_f(y)})"' if rotate is not None else ""
        self.parts.append(
            f'<text x="{_f(x)}" y="{_f(y)}" font-family="sans-serif" font-size="{size}" '
            f'text-anchor="{anchor}"{transform}>{escape(str(s))}</text>'
        )

    def rect(self, x, y, w, h, fill, value=None, label=None) -> None:
        attrs = f' data-value="{value!r}"' if value is not None else ""
        if label is not None:
            attrs += f' data-label="{escape(label)}"'
        self.parts.append(
            f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(w)}" height="{_f(h)}" fill="{fill}"{attrs}/>'
        )

    def line(self, x1, y1, x2, y2, stroke="black", width=1.0) -> None:
        self.parts.append(
            f'<line x1="{_f(x1)}" y1="{_f(y1)}" x2="{_f(x2)}" y2="{_f(y2)}" '
            f'stroke="{stroke}" stroke-width="{width}"/>'
        )

    def circle(self, x, y, r, fill, value=None, label=None) -> None:
        attrs = f' data-value="{value!r}"' if value is not None else ""
        if label is not None:
            attrs += f' data-label="{escape(label)}"'
        self.parts.append(f'<circle cx="{_f(x)}" cy="{_f(y)}" r="{_f(r)}" fill="{fill}"{attrs}/>')

    def polyline(self, points, stroke) -> None:
        pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in points)
        self.parts.append(f'<polyline points="{pts}" fill="none" stroke="{stroke}" stroke-width="2"/>')

    def axes(self, y_lo: float, y_hi: float, y_label: str, ticks: int = 5) -> None:
        x0, y0, y1 = LEFT, self.height - BOTTOM, TOP
        self.line(x0, y0, self.width - RIGHT, y0)
        self.line(x0, y0, x0, y1)
        for k in range(ticks + 1):
            v = y_lo + (y_hi - y_lo) * k / ticks
            y = y0 - (y0 - y1) * k / ticks
            self.line(x0 - 4, y, x0, y)
            self.text(x0 - 6, y + 4, f"{v:.3g}", size=10, anchor="end")
        self.text(18, (y0 + y1) / 2, y_label, anchor="middle", rotate=-90)

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _scale(lo: float, hi: float):
    if hi <= lo:
        hi = lo + 1.0
    top, bottom = TOP, HEIGHT - BOTTOM
    return lambda v: bottom - (v - lo) / (hi - lo) * (bottom - top)


def _y_range(values: Sequence[float], zero: bool = True) -> tuple[float, float]:
    lo = min(0.0, min(values)) if zero else min(values)
    hi = max(values)
    pad = 0.05 * (hi - lo) if hi > lo else 1.0
    return (lo if zero else lo - pad), hi + pad


@dataclass(frozen=True)
class Figure:
    name: str
    svg: str
    csv: str

    def write(self, out_dir: Path) -> tuple[Path, Path]:
        svg_path, csv_path = out_dir / f"{self.name}.svg", out_dir / f"{self.name}.csv"
        svg_path.write_text(self.svg)
        csv_path.write_text(self.csv)
        return svg_path, csv_path


def _require(rows: Sequence[Mapping], figure: str) -> None:
    for column in _FIGURE_COLUMNS[figure]:
        if not rows or column not in rows[0]:
            raise MissingColumn(column, figure)


def _policies_present(rows: Sequence[Mapping]) -> list[str]:
    seen = {r["policy"] for r in rows}
    return [p for p in POLICIES if p in seen] + sorted(seen - set(POLICIES))


def _label(policy: str) -> str:
    return POLICY_LABELS.get(policy, policy)


def _mean(values: Iterable[float]) -> float:
    values = [float(v) for v in values]
    return math.fsum(values) / len(values)


def _bars(title: str, y_label: str, names: Sequence[str], values: Sequence[float]) -> str:
    svg = _Svg(title)
    lo, hi = _y_range(values)
    y = _scale(lo, hi)
    svg.axes(lo, hi, y_label)
    slot = (WIDTH - LEFT - RIGHT) / max(1, len(values))
    for k, (name, v) in enumerate(zip(names, values)):
        x = LEFT + k * slot + 0.15 * slot
        top = y(max(v, 0.0))
        svg.rect(x, top, 0.7 * slot, y(min(v, 0.0)) - top, PALETTE[k % len(PALETTE)], v, name)
        svg.text(x + 0.35 * slot, HEIGHT - BOTTOM + 16, name, size=10, anchor="middle")
    return svg.render()


def fig1(rows: Sequence[Mapping]) -> Figure:
    """Mean APFD per policy."""
    _require(rows, "fig1")
    policies = _policies_present(rows)
    values = [_mean(r["apfd"] for r in rows if r["policy"] == p) for p in policies]
    labels = [_label(p) for p in policies]
    svg = _bars("APFD Comparison Across Models", "mean APFD", labels, values)
    return Figure("fig1", svg, _csv(("policy", "apfd_mean"), [(p, repr(v)) for p, v in zip(policies, values)]))


def fig2(log_entries: Sequence[Mapping]) -> Figure:
    """Detected faults per class per build, from the pipeline log."""
    if not log_entries:
        raise MissingColumn("fault_classes", "fig2")
    for column in ("build_number", "fault_classes"):
        if column not in log_entries[0]:
            raise MissingColumn(column, "fig2")
    builds = [int(e["build_number"]) for e in log_entries]
    classes = sorted({c for e in log_entries for c in e["fault_classes"]})
    grid = [[int(e["fault_classes"].get(c, 0)) for e in log_entries] for c in classes]
    peak = max([v for row in grid for v in row] + [1])

    width = LEFT + 40 + 18 * len(builds) + RIGHT
    height = TOP + 18 * len(classes) + BOTTOM
    svg = _Svg("Defect Density by Class and Build", width=max(width, 320), height=height)
    for i, cls in enumerate(classes):
        svg.text(LEFT + 36, TOP + 18 * i + 13, cls, size=10, anchor="end")
        for j, v in enumerate(grid[i]):
            shade = int(round(255 * (1.0 - v / peak)))
            svg.rect(LEFT + 40 + 18 * j, TOP + 18 * i, 17, 17, f"rgb(255,{shade},{shade})", v, f"{cls}@{builds[j]}")
    for j, b in enumerate(builds):
        svg.text(LEFT + 48 + 18 * j, TOP + 18 * len(classes) + 14, b, size=9, anchor="middle")
    svg.text(LEFT + 40 + 9 * len(builds), height - 12, "build", anchor="middle")
    rows = [(cls, *grid[i]) for i, cls in enumerate(classes)]
    return Figure("fig2", svg.render(), _csv(("class", *(str(b) for b in builds)), rows))


def fig3(rows: Sequence[Mapping]) -> Figure:
    """Mean TET against suite size, one line per policy."""
    _require(rows, "fig3")
    policies = _policies_present(rows)
    sizes = sorted({int(r["n"]) for r in rows})
    series = {
        p: [(n, _mean(r["tet"] for r in rows if r["policy"] == p and int(r["n"]) == n))
            for n in sizes if any(r["policy"] == p and int(r["n"]) == n for r in rows)]
        for p in policies
    }
    values = [v for pts in series.values() for _, v in pts]
    svg = _Svg("Test Execution Time vs. Test Suite Size")
    lo, hi = _y_range(values)
    y = _scale(lo, hi)
    svg.axes(lo, hi, "mean TET (s)")
    x_lo, x_hi = sizes[0], sizes[-1]
    span = (WIDTH - LEFT - RIGHT - 40)

    def x(n: int) -> float:
        return LEFT + 20 + (span * (n - x_lo) / (x_hi - x_lo) if x_hi > x_lo else span / 2)

    for n in sizes:
        svg.text(x(n), HEIGHT - BOTTOM + 16, n, size=10, anchor="middle")
    svg.text((LEFT + WIDTH - RIGHT) / 2, HEIGHT - 14, "suite size (tests)", anchor="middle")
    for k, p in enumerate(policies):
        colour = PALETTE[k % len(PALETTE)]
        svg.polyline([(x(n), y(v)) for n, v in series[p]], colour)
        for n, v in series[p]:
            svg.circle(x(n), y(v), 3, colour, v, f"{_label(p)}@{n}")
        svg.text(WIDTH - RIGHT - 110, TOP + 14 * k, _label(p), size=10)
    csv_rows = [(p, n, repr(v)) for p in policies for n, v in series[p]]
    return Figure("fig3", svg.render(), _csv(("policy", "n", "tet_mean"), csv_rows))


def fig4(rows: Sequence[Mapping]) -> Figure:
    """Mean overhead per ledger component for the QUBO-enhanced policy (or all rows)."""
    _require(rows, "fig4")
    picked = [r for r in rows if r["policy"] == "quantum_enhanced"] or list(rows)
    names = list(LEDGER_COMPONENTS)
    values = [_mean(float(r[f"overhead_{c}"] or 0.0) for r in picked) for c in names]
    svg = _bars("Breakdown of CI/CD Overhead", "mean seconds", names, values)
    csv_rows = [(c, repr(v)) for c, v in zip(names, values)] + [("total", repr(math.fsum(values)))]
    return Figure("fig4", svg, _csv(("component", "seconds"), csv_rows))


@dataclass(frozen=True)
class BoxStats:
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: tuple[float, ...]


def box_stats(values: Sequence[float]) -> BoxStats:
    """Linear-interpolation quartiles; whiskers reach the furthest points within 1.5 IQR."""
    data = np.sort(np.asarray(values, dtype=float))
    if data.size == 0:
        raise ReportError("no values for a box")
    q1, median, q3 = (float(v) for v in np.percentile(data, [25, 50, 75], method="linear"))
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = data[(data >= lo_fence) & (data <= hi_fence)]
    outliers = tuple(float(v) for v in data[(data < lo_fence) | (data > hi_fence)])
    return BoxStats(median, q1, q3, float(inside.min()), float(inside.max()), outliers)


def fig5(rows: Sequence[Mapping]) -> Figure:
    """APFD boxplots per policy, grouped by suite-size category."""
    _require(rows, "fig5")
    policies = _policies_present(rows)
    categories = [c.value for c in SuiteCategory if any(r["category"] == c.value for r in rows)]
    boxes = []
    for c in categories:
        for p in policies:
            vals = [float(r["apfd"]) for r in rows if r["category"] == c and r["policy"] == p]
            if vals:
                boxes.append((c, p, box_stats(vals)))
    values = [v for _, _, b in boxes for v in (b.whisker_low, b.whisker_high, *b.outliers)]
    svg = _Svg("APFD Variability Across Test Suite Size Categories")
    lo, hi = _y_range(values, zero=False)
    y = _scale(lo, hi)
    svg.axes(lo, hi, "APFD")
    slot = (WIDTH - LEFT - RIGHT) / max(1, len(boxes))
    for k, (c, p, b) in enumerate(boxes):
        colour = PALETTE[policies.index(p) % len(PALETTE)]
        cx = LEFT + (k + 0.5) * slot
        w = 0.6 * slot
        tag = f"{_label(p)}@{c}"
        svg.line(cx, y(b.whisker_low), cx, y(b.q1))
        svg.line(cx, y(b.q3), cx, y(b.whisker_high))
        svg.rect(cx - w / 2, y(b.q3), w, y(b.q1) - y(b.q3), colour, b.q3 - b.q1, tag)
        svg.line(cx - w / 2, y(b.median), cx + w / 2, y(b.median), width=2)
        for v in b.outliers:
            svg.circle(cx, y(v), 2.5, "black", v, tag)
        svg.text(cx, HEIGHT - BOTTOM + 14, _label(p)[:8], size=8, anchor="middle")
    for c in categories:
        members = [k for k, box in enumerate(boxes) if box[0] == c]
        svg.text(LEFT + (sum(members) / len(members) + 0.5) * slot, HEIGHT - BOTTOM + 32, c, anchor="middle")
    header = ("category", "policy", "median", "q1", "q3", "whisker_low", "whisker_high", "outliers")
    csv_rows = [
        (c, p, repr(b.median), repr(b.q1), repr(b.q3), repr(b.whisker_low), repr(b.whisker_high),
         ";".join(repr(v) for v in b.outliers))
        for c, p, b in boxes
    ]
    return Figure("fig5", svg.render(), _csv(header, csv_rows))


def emit_figures(
    metrics: str | Path | Sequence[Mapping],
    log_entries: Sequence[Mapping] | None,
    out_dir: str | Path,
    figures: Sequence[str] = FIGURES,
) -> dict[str, tuple[Path, Path]]:
    """Write the requested figures; fig2 needs a pipeline log and is skipped without one."""
    rows = _rows(metrics)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    makers = {"fig1": fig1, "fig3": fig3, "fig4": fig4, "fig5": fig5}
    written = {}
    for name in figures:
        if name == "fig2":
            if log_entries is None:
                warnings.warn("no pipeline log; fig2 skipped", ReportWarning, stacklevel=2)
                continue
            figure = fig2(log_entries)
        elif name in makers:
            figure = makers[name](rows)
        else:
            raise ReportError(f"unknown figure {name!r}")
        written[name] = figure.write(out)
    return written
