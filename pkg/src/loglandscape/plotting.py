"""Minimal deterministic SVG charts (paths and text only).

Output depends only on the inputs: coordinates are written with a fixed
number of decimals and no timestamps or ids are embedded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import InputError

KINDS = ("loglog-scatter", "histogram", "line")
WIDTH, HEIGHT = 640, 440
MARGIN = {"left": 72, "right": 24, "top": 36, "bottom": 56}
COLORS = ("#1f4e79", "#b5473a", "#3d7a3d", "#7a4f9a", "#9a7a1f")


@dataclass
class Series:
    x: np.ndarray
    y: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).ravel()
        self.y = np.asarray(self.y, dtype=float).ravel()
        if len(self.x) != len(self.y):
            raise InputError("series x and y must have equal length")


@dataclass
class ReferenceLine:
    """Dashed guide ``y = y0 * (x / x0)^slope`` on log axes, ``y = y0 + slope (x - x0)`` otherwise."""

    slope: float
    x0: float
    y0: float
    label: str = ""


@dataclass
class Chart:
    kind: str
    series: list
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    reference: ReferenceLine | None = None
    bin_edges: np.ndarray | None = field(default=None)


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float, log: bool) -> str:
    if log:
        return f"1e{int(round(v))}"
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-3:
        return f"{v:.1e}"
    return f"{v:.4g}"


def _ticks(lo: float, hi: float, log: bool) -> list[float]:
    if log:
        a, b = math.floor(lo), math.ceil(hi)
        step = max(1, (b - a) // 6)
        return [float(t) for t in range(a, b + 1, step) if lo <= t <= hi]
    span = hi - lo
    raw = span / 5
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step) * step
    out = []
    t = start
    while t <= hi + 1e-12 * span:
        out.append(round(t, 12))
        t += step
    return out


def _limits(values: np.ndarray) -> tuple[float, float]:
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi == lo:
        pad = abs(lo) * 0.1 or 1.0
        return lo - pad, hi + pad
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def render(chart: Chart) -> str:
    """SVG document text for ``chart``."""
    if chart.kind not in KINDS:
        raise InputError(f"unknown plot kind {chart.kind!r}; expected one of {KINDS}")
    if not chart.series or all(len(s.x) == 0 for s in chart.series):
        raise InputError("nothing to plot: empty series")
    log = chart.kind == "loglog-scatter"
    xs = np.concatenate([s.x for s in chart.series])
    ys = np.concatenate([s.y for s in chart.series])
    if chart.kind == "histogram" and chart.bin_edges is not None:
        xs = np.concatenate([xs, np.asarray(chart.bin_edges, dtype=float)])
        ys = np.concatenate([ys, [0.0]])
    if log:
        if np.any(xs <= 0) or np.any(ys <= 0):
            raise InputError("log-log plots need positive data")
        xs, ys = np.log10(xs), np.log10(ys)
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
        raise InputError("plot data must be finite")
    x0, x1 = _limits(xs)
    y0, y1 = _limits(ys)
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(v):
        return MARGIN["left"] + (v - x0) / (x1 - x0) * pw

    def py(v):
        return MARGIN["top"] + (1.0 - (v - y0) / (y1 - y0)) * ph

    tx = (lambda v: math.log10(v)) if log else (lambda v: v)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<path d="M0 0 H{WIDTH} V{HEIGHT} H0 Z" fill="white"/>',
        f'<clipPath id="plot-area"><path d="M{MARGIN["left"]} {MARGIN["top"]} h{pw} v{ph} h{-pw} Z"/>'
        f'</clipPath>',
        f'<path class="frame" d="M{_fmt(px(x0))} {_fmt(py(y0))} H{_fmt(px(x1))} '
        f'M{_fmt(px(x0))} {_fmt(py(y0))} V{_fmt(py(y1))}" stroke="black" fill="none"/>',
    ]
    for t in _ticks(x0, x1, log):
        out.append(f'<path class="tick" d="M{_fmt(px(t))} {_fmt(py(y0))} v5" stroke="black"/>')
        out.append(f'<text x="{_fmt(px(t))}" y="{_fmt(py(y0) + 18)}" text-anchor="middle">'
                   f'{_tick_label(t, log)}</text>')
    for t in _ticks(y0, y1, log):
        out.append(f'<path class="tick" d="M{_fmt(px(x0))} {_fmt(py(t))} h-5" stroke="black"/>')
        out.append(f'<text x="{_fmt(px(x0) - 8)}" y="{_fmt(py(t) + 4)}" text-anchor="end">'
                   f'{_tick_label(t, log)}</text>')
    if chart.title:
        out.append(f'<text x="{WIDTH / 2:.2f}" y="20" text-anchor="middle" font-size="14">'
                   f'{escape(chart.title)}</text>')
    if chart.xlabel:
        out.append(f'<text x="{MARGIN["left"] + pw / 2:.2f}" y="{HEIGHT - 14}" '
                   f'text-anchor="middle">{escape(chart.xlabel)}</text>')
    if chart.ylabel:
        cy = MARGIN["top"] + ph / 2
        out.append(f'<text x="16" y="{cy:.2f}" text-anchor="middle" '
                   f'transform="rotate(-90 16 {cy:.2f})">{escape(chart.ylabel)}</text>')

    for i, s in enumerate(chart.series):
        color = COLORS[i % len(COLORS)]
        if chart.kind == "loglog-scatter":
            for a, b in zip(np.log10(s.x), np.log10(s.y)):
                out.append(f'<path class="marker" d="M{_fmt(px(a) - 3.5)} {_fmt(py(b))} '
                           f'a3.5 3.5 0 1 0 7 0 a3.5 3.5 0 1 0 -7 0" fill="{color}"/>')
        elif chart.kind == "line":
            order = np.argsort(s.x, kind="stable")
            pts = " L".join(f"{_fmt(px(a))} {_fmt(py(b))}" for a, b in zip(s.x[order], s.y[order]))
            out.append(f'<path class="series" d="M{pts}" stroke="{color}" fill="none" stroke-width="1.5"/>')
        else:
            edges = chart.bin_edges
            if edges is None:
                raise InputError("histogram charts need bin_edges")
            edges = np.asarray(edges, dtype=float)
            if len(edges) != len(s.y) + 1:
                raise InputError("histogram needs len(bin_edges) == len(counts) + 1")
            d = [f"M{_fmt(px(edges[0]))} {_fmt(py(0.0))}"]
            for lo, hi, h in zip(edges[:-1], edges[1:], s.y):
                d.append(f"L{_fmt(px(lo))} {_fmt(py(h))} L{_fmt(px(hi))} {_fmt(py(h))}")
            d.append(f"L{_fmt(px(edges[-1]))} {_fmt(py(0.0))}")
            out.append(f'<path class="series" d="{" ".join(d)}" stroke="{color}" fill="none"/>')
        if s.label:
            out.append(f'<text x="{WIDTH - MARGIN["right"] - 4}" y="{MARGIN["top"] + 14 * (i + 1)}" '
                       f'text-anchor="end" fill="{color}">{escape(s.label)}</text>')

    ref = chart.reference
    if ref is not None:
        a0, a1 = x0, x1
        b = tx(ref.y0) + ref.slope * (np.array([a0, a1]) - tx(ref.x0))
        out.append(f'<path class="reference" d="M{_fmt(px(a0))} {_fmt(py(b[0]))} L{_fmt(px(a1))} '
                   f'{_fmt(py(b[1]))}" stroke="#555555" stroke-dasharray="6 4" fill="none" '
                   f'clip-path="url(#plot-area)"/>')
        if ref.label:
            out.append(f'<text x="{MARGIN["left"] + 6}" y="{MARGIN["top"] + 14}" fill="#555555">'
                       f'{escape(ref.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot(series, kind: str, out_path, **options) -> Path:
    """Write an SVG chart of ``series`` (a Series or a list of them) to ``out_path``."""
    if isinstance(series, Series):
        series = [series]
    chart = Chart(kind=kind, series=list(series), **options)
    path = Path(out_path)
    path.write_text(render(chart))
    return path
