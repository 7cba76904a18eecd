"""A small deterministic SVG emitter for line, heatmap and scatter plots.

Output depends only on the input values: coordinates are printed with a fixed
number of decimals and element order follows the input order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 480
MARGIN = dict(left=70, right=150, top=40, bottom=55)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")
KINDS = ("line", "heatmap", "scatter")


class PlotDataError(ValueError):
    pass


@dataclass
class Series:
    label: str
    x: list
    y: list


@dataclass
class PlotSpec:
    kind: str
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    series: list = field(default_factory=list)  # line/scatter data, heatmap overlays
    grid: np.ndarray | None = None  # heatmap values, rows follow y ascending
    x_range: tuple | None = None  # heatmap extent
    y_range: tuple | None = None


def _fmt(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


def _tick(v: float) -> str:
    return f"{v:.4g}"


def _extent(values, pad: float = 0.0):
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    span = hi - lo
    return lo - pad * span, hi + pad * span


class _Frame:
    def __init__(self, xr, yr):
        self.xr, self.yr = xr, yr
        self.x0, self.x1 = MARGIN["left"], WIDTH - MARGIN["right"]
        self.y0, self.y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]

    def px(self, x):
        return self.x0 + (x - self.xr[0]) / (self.xr[1] - self.xr[0]) * (self.x1 - self.x0)

    def py(self, y):
        return self.y0 + (y - self.yr[0]) / (self.yr[1] - self.yr[0]) * (self.y1 - self.y0)


def _color_ramp(t: float) -> str:
    # dark blue -> yellow, linear in RGB
    lo, hi = (13, 8, 135), (240, 249, 33)
    r, g, b = (int(round(a + t * (c - a))) for a, c in zip(lo, hi))
    return f"#{r:02x}{g:02x}{b:02x}"


def _axes(out, f: _Frame, spec: PlotSpec):
    out.append(f'<rect x="{f.x0}" y="{f.y1}" width="{f.x1 - f.x0}" height="{f.y0 - f.y1}" '
               'fill="none" stroke="#000000"/>')
    for i in range(5):
        xv = f.xr[0] + i * (f.xr[1] - f.xr[0]) / 4
        yv = f.yr[0] + i * (f.yr[1] - f.yr[0]) / 4
        X, Y = _fmt(f.px(xv)), _fmt(f.py(yv))
        out.append(f'<line x1="{X}" y1="{f.y0}" x2="{X}" y2="{f.y0 + 5}" stroke="#000000"/>')
        out.append(f'<text x="{X}" y="{f.y0 + 18}" text-anchor="middle">{_tick(xv)}</text>')
        out.append(f'<line x1="{f.x0 - 5}" y1="{Y}" x2="{f.x0}" y2="{Y}" stroke="#000000"/>')
        out.append(f'<text x="{f.x0 - 8}" y="{Y}" text-anchor="end" dominant-baseline="middle">{_tick(yv)}</text>')
    cx = (f.x0 + f.x1) / 2
    cy = (f.y0 + f.y1) / 2
    out.append(f'<text x="{_fmt(cx)}" y="{HEIGHT - 15}" text-anchor="middle">{escape(spec.xlabel)}</text>')
    out.append(f'<text x="18" y="{_fmt(cy)}" text-anchor="middle" '
               f'transform="rotate(-90 18 {_fmt(cy)})">{escape(spec.ylabel)}</text>')
    out.append(f'<text x="{_fmt(cx)}" y="24" text-anchor="middle" font-size="15">{escape(spec.title)}</text>')


def _legend(out, labels):
    x = WIDTH - MARGIN["right"] + 12
    for i, label in enumerate(labels):
        y = MARGIN["top"] + 10 + 18 * i
        color = PALETTE[i % len(PALETTE)]
        out.append(f'<rect x="{x}" y="{y - 6}" width="12" height="12" fill="{color}"/>')
        out.append(f'<text x="{x + 18}" y="{y}" dominant-baseline="middle">{escape(label)}</text>')


def _check_series(series):
    if not series:
        raise PlotDataError("no series to plot")
    for s in series:
        if len(s.x) == 0 or len(s.x) != len(s.y):
            raise PlotDataError(f"series {s.label!r} is empty or has mismatched x/y")
        if not (np.all(np.isfinite(s.x)) and np.all(np.isfinite(s.y))):
            raise PlotDataError(f"series {s.label!r} has non-finite values")


def emit_svg(spec: PlotSpec) -> str:
    """Render ``spec`` to standalone SVG text."""
    if spec.kind not in KINDS:
        raise PlotDataError(f"unknown plot kind {spec.kind!r}")
    out = []
    if spec.kind == "heatmap":
        grid = np.asarray(spec.grid if spec.grid is not None else [], dtype=float)
        if grid.ndim != 2 or grid.size == 0:
            raise PlotDataError("heatmap needs a non-empty 2-D grid")
        if spec.series:
            _check_series(spec.series)
        ny, nx = grid.shape
        xr = spec.x_range or (0.0, float(nx))
        yr = spec.y_range or (0.0, float(ny))
        f = _Frame(xr, yr)
        lo, hi = _extent(grid[np.isfinite(grid)] if np.isfinite(grid).any() else [0.0])
        cw = (f.x1 - f.x0) / nx
        ch = (f.y0 - f.y1) / ny
        out.append('<g shape-rendering="crispEdges">')
        for i in range(ny):
            y = f.y0 - (i + 1) * ch
            for j in range(nx):
                v = grid[i, j]
                color = _color_ramp((v - lo) / (hi - lo)) if np.isfinite(v) else "#ffffff"
                out.append(f'<rect class="cell" x="{_fmt(f.x0 + j * cw)}" y="{_fmt(y)}" '
                           f'width="{_fmt(cw)}" height="{_fmt(ch)}" fill="{color}"/>')
        out.append("</g>")
        for k, s in enumerate(spec.series):
            color = PALETTE[k % len(PALETTE)]
            pts = " ".join(f"{_fmt(f.px(a))},{_fmt(f.py(b))}" for a, b in zip(s.x, s.y))
            if len(s.x) > 1:
                out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
            a, b = s.x[-1], s.y[-1]
            out.append(f'<circle cx="{_fmt(f.px(a))}" cy="{_fmt(f.py(b))}" r="4" fill="{color}" stroke="#ffffff"/>')
    else:
        _check_series(spec.series)
        xs = np.concatenate([np.asarray(s.x, dtype=float) for s in spec.series])
        ys = np.concatenate([np.asarray(s.y, dtype=float) for s in spec.series])
        f = _Frame(_extent(xs, 0.02), _extent(ys, 0.05))
        for k, s in enumerate(spec.series):
            color = PALETTE[k % len(PALETTE)]
            if spec.kind == "line":
                pts = " ".join(f"{_fmt(f.px(a))},{_fmt(f.py(b))}" for a, b in zip(s.x, s.y))
                out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
            else:
                for a, b in zip(s.x, s.y):
                    out.append(f'<circle cx="{_fmt(f.px(a))}" cy="{_fmt(f.py(b))}" r="4" fill="{color}"/>')
    _axes(out, f, spec)
    _legend(out, [s.label for s in spec.series])
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">')
    return "\n".join(['<?xml version="1.0" encoding="UTF-8"?>', head,
                      '<rect width="100%" height="100%" fill="#ffffff"/>', *out, "</svg>", ""])


def write_svg(path, spec: PlotSpec) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(emit_svg(spec))
