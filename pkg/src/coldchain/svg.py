"""Minimal SVG charts: line charts and grouped bar charts.

Only what the report needs. Output is plain text, so identical inputs give
identical files.
"""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")
WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=150, top=40, bottom=60)


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-2:
        return f"{v:.1e}"
    return f"{v:.3g}"


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.floor(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 12))
        t += step
    return ticks


class _Axis:
    def __init__(self, lo: float, hi: float, log: bool, pixel_lo: float, pixel_hi: float,
                 include_zero: bool = True):
        self.log = log
        if log:
            lo = max(lo, 1e-12)
            hi = max(hi, lo * 10)
            self.ticks = [10.0 ** k for k in range(math.floor(math.log10(lo)), math.ceil(math.log10(hi)) + 1)]
            self.lo, self.hi = math.log10(self.ticks[0]), math.log10(self.ticks[-1])
        else:
            self.ticks = _nice_ticks(min(lo, 0.0) if include_zero else lo, hi)
            self.lo, self.hi = self.ticks[0], self.ticks[-1]
        self.p0, self.p1 = pixel_lo, pixel_hi

    def __call__(self, v: float) -> float:
        if self.log:
            v = math.log10(max(v, 10.0 ** self.lo))
        span = self.hi - self.lo or 1.0
        return self.p0 + (v - self.lo) / span * (self.p1 - self.p0)


def _frame(title: str, xlabel: str, ylabel: str, yaxis: _Axis, x0: float, x1: float) -> list[str]:
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'font-family="sans-serif" font-size="12">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2:.0f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>']
    for t in yaxis.ticks:
        y = yaxis(t)
        out.append(f'<line x1="{_fmt(x0)}" y1="{_fmt(y)}" x2="{_fmt(x1)}" y2="{_fmt(y)}" stroke="#ddd"/>')
        out.append(f'<text x="{_fmt(x0 - 6)}" y="{_fmt(y + 4)}" text-anchor="end">{_tick_label(t)}</text>')
    yb, yt = yaxis.p0, yaxis.p1
    out.append(f'<line x1="{_fmt(x0)}" y1="{_fmt(yb)}" x2="{_fmt(x1)}" y2="{_fmt(yb)}" stroke="black"/>')
    out.append(f'<line x1="{_fmt(x0)}" y1="{_fmt(yb)}" x2="{_fmt(x0)}" y2="{_fmt(yt)}" stroke="black"/>')
    out.append(f'<text x="{_fmt((x0 + x1) / 2)}" y="{HEIGHT - 15}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="18" y="{_fmt((yb + yt) / 2)}" text-anchor="middle" '
               f'transform="rotate(-90 18 {_fmt((yb + yt) / 2)})">{escape(ylabel)}</text>')
    return out


def _legend(names: list[str], x: float) -> list[str]:
    out = []
    for k, name in enumerate(names):
        y = MARGIN["top"] + 10 + 18 * k
        out.append(f'<rect x="{_fmt(x)}" y="{y - 9}" width="12" height="12" fill="{PALETTE[k % len(PALETTE)]}"/>')
        out.append(f'<text x="{_fmt(x + 18)}" y="{y + 1}">{escape(name)}</text>')
    return out


def line_chart(series: dict[str, tuple[list[float], list[float]]], title: str = "", xlabel: str = "",
               ylabel: str = "", log_y: bool = False) -> str:
    """One polyline with markers per named (x, y) series."""
    xs = [x for xv, _ in series.values() for x in xv]
    ys = [y for _, yv in series.values() for y in yv]
    if not xs:
        raise ValueError("line chart needs at least one point")
    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    yaxis = _Axis(min(ys), max(ys), log_y, HEIGHT - MARGIN["bottom"], MARGIN["top"])
    xaxis = _Axis(min(xs), max(xs), False, x0, x1, include_zero=False)
    out = _frame(title, xlabel, ylabel, yaxis, x0, x1)
    for t in xaxis.ticks:
        out.append(f'<text x="{_fmt(xaxis(t))}" y="{HEIGHT - MARGIN["bottom"] + 16}" '
                   f'text-anchor="middle">{_tick_label(t)}</text>')
    for k, (name, (xv, yv)) in enumerate(series.items()):
        col = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{_fmt(xaxis(x))},{_fmt(yaxis(y))}" for x, y in zip(xv, yv))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{col}" stroke-width="2"/>')
        for x, y in zip(xv, yv):
            out.append(f'<circle cx="{_fmt(xaxis(x))}" cy="{_fmt(yaxis(y))}" r="3" fill="{col}"/>')
    out += _legend(list(series), x1 + 15)
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bar_chart(groups: list[str], series: dict[str, list[float]], title: str = "", xlabel: str = "",
              ylabel: str = "", log_y: bool = False) -> str:
    """Grouped bars: one group per label, one bar per series inside each group."""
    if not groups or not series:
        raise ValueError("bar chart needs groups and series")
    ys = [y for yv in series.values() for y in yv]
    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    yaxis = _Axis(min(ys) if log_y else 0.0, max(ys), log_y, HEIGHT - MARGIN["bottom"], MARGIN["top"])
    out = _frame(title, xlabel, ylabel, yaxis, x0, x1)
    gw = (x1 - x0) / len(groups)
    bw = 0.8 * gw / len(series)
    base = yaxis.p0
    for g, label in enumerate(groups):
        gx = x0 + g * gw + 0.1 * gw
        out.append(f'<text x="{_fmt(x0 + (g + 0.5) * gw)}" y="{HEIGHT - MARGIN["bottom"] + 16}" '
                   f'text-anchor="middle">{escape(label)}</text>')
        for k, (name, yv) in enumerate(series.items()):
            y = yaxis(yv[g])
            out.append(f'<rect x="{_fmt(gx + k * bw)}" y="{_fmt(min(y, base))}" width="{_fmt(bw)}" '
                       f'height="{_fmt(abs(base - y))}" fill="{PALETTE[k % len(PALETTE)]}"/>')
    out += _legend(list(series), x1 + 15)
    out.append("</svg>")
    return "\n".join(out) + "\n"


def save(text: str, path: str | Path) -> None:
    Path(path).write_text(text)
