"""Deterministic SVG line charts of metrics CSV columns."""

from __future__ import annotations

import csv
import math

from .terrain import ConfigError

WIDTH, HEIGHT = 640, 400
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 20, 30, 50
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")
N_TICKS = 5


def read_columns(path, columns):
    """Return (x values, {column: values}); x is the ``update`` column when
    present, else the row index."""
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ConfigError(f"{path}: empty CSV")
    header, body = rows[0], rows[1:]
    for c in columns:
        if c not in header:
            raise ConfigError(f"{path}: missing column {c!r}")
    def col(name):
        i = header.index(name)
        try:
            return [float(r[i]) for r in body]
        except ValueError as exc:
            raise ConfigError(f"{path}: column {name!r} is not numeric") from exc
    xs = col("update") if "update" in header else [float(i) for i in range(len(body))]
    return xs, {c: col(c) for c in columns}


def _range(values):
    finite = [v for v in values if math.isfinite(v)]
    if not finite:
        return -1.0, 1.0
    lo, hi = min(finite), max(finite)
    if lo == hi:
        # constant data sits at mid-axis
        return lo - 1.0, hi + 1.0
    return lo, hi


def _num(v: float) -> str:
    return f"{v:.6g}"


def _coord(v: float) -> str:
    return f"{v:.3f}"


def render_svg(xs, series: dict, title: str = "") -> str:
    x0, x1 = _range(xs)
    y0, y1 = _range([v for vals in series.values() for v in vals])
    pw = WIDTH - MARGIN_L - MARGIN_R
    ph = HEIGHT - MARGIN_T - MARGIN_B

    def sx(x):
        return MARGIN_L + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return MARGIN_T + (y1 - y) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>']
    if title:
        out.append(f'<text x="{WIDTH / 2:.1f}" y="18" text-anchor="middle" font-size="13">{_esc(title)}</text>')
    bottom, right = MARGIN_T + ph, MARGIN_L + pw
    out.append(f'<line class="axis" x1="{MARGIN_L}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>')
    out.append(f'<line class="axis" x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{bottom}" stroke="black"/>')
    for i in range(N_TICKS):
        fx = x0 + (x1 - x0) * i / (N_TICKS - 1)
        fy = y0 + (y1 - y0) * i / (N_TICKS - 1)
        px, py = sx(fx), sy(fy)
        out.append(f'<text class="xtick" x="{_coord(px)}" y="{bottom + 16}" text-anchor="middle">{_num(fx)}</text>')
        out.append(f'<text class="ytick" x="{MARGIN_L - 6}" y="{_coord(py + 4)}" text-anchor="end">{_num(fy)}</text>')
    out.append(f'<text x="{MARGIN_L + pw / 2:.1f}" y="{HEIGHT - 10}" text-anchor="middle">update</text>')
    out.append(f'<text x="16" y="{MARGIN_T + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {MARGIN_T + ph / 2:.1f})">value</text>')
    for k, (name, vals) in enumerate(series.items()):
        color = COLORS[k % len(COLORS)]
        pts = " ".join(f"{_coord(sx(x))},{_coord(sy(y))}" for x, y in zip(xs, vals) if math.isfinite(y))
        out.append(f'<polyline data-column="{_esc(name)}" fill="none" stroke="{color}" stroke-width="1.5" '
                   f'points="{pts}"/>')
        ly = MARGIN_T + 12 + 14 * k
        out.append(f'<text class="legend" x="{right - 4}" y="{ly}" text-anchor="end" fill="{color}">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def emit_plot(metrics_csv, columns, out_path) -> None:
    """Write an SVG with one polyline per requested column."""
    if not columns:
        raise ConfigError("no columns requested")
    xs, series = read_columns(metrics_csv, columns)
    svg = render_svg(xs, series, title=", ".join(columns))
    with open(out_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(svg)
