"""Tiny deterministic SVG charts: grouped bars and polylines with markers.

Only rect, line, polyline, circle and text elements are emitted.
"""

from __future__ import annotations

import math
from html import escape
from typing import Sequence

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")

WIDTH, HEIGHT = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 64, 170, 36, 52


def _n(v: float) -> str:
    s = f"{v:.2f}".rstrip("0").rstrip(".")
    return "0" if s == "-0" else s


def nice_ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if not (math.isfinite(lo) and math.isfinite(hi)):
        return [0.0]
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    start = math.floor(lo / step) * step
    ticks = []
    v = start
    while v <= hi + 1e-9 * step:
        ticks.append(round(v, 10))
        v += step
    return ticks


def _tick_label(v: float) -> str:
    if v == int(v) and abs(v) < 1e6:
        return str(int(v))
    return f"{v:.3g}"


class Canvas:
    def __init__(self, width: int = WIDTH, height: int = HEIGHT):
        self.width, self.height = width, height
        self.parts: list[str] = []

    def rect(self, x, y, w, h, fill, stroke="none"):
        self.parts.append(f'<rect x="{_n(x)}" y="{_n(y)}" width="{_n(w)}" height="{_n(h)}" fill="{fill}" stroke="{stroke}"/>')

    def line(self, x1, y1, x2, y2, stroke="#000", width=1.0):
        self.parts.append(f'<line x1="{_n(x1)}" y1="{_n(y1)}" x2="{_n(x2)}" y2="{_n(y2)}" stroke="{stroke}" stroke-width="{_n(width)}"/>')

    def polyline(self, pts, stroke, width=2.0):
        coords = " ".join(f"{_n(x)},{_n(y)}" for x, y in pts)
        self.parts.append(f'<polyline points="{coords}" fill="none" stroke="{stroke}" stroke-width="{_n(width)}"/>')

    def circle(self, x, y, r, fill):
        self.parts.append(f'<circle cx="{_n(x)}" cy="{_n(y)}" r="{_n(r)}" fill="{fill}"/>')

    def text(self, x, y, s, size=12, anchor="start", rotate=None):
        rot = f' transform="rotate({_n(rotate)} {_n(x)} {_n(y)})"' if rotate is not None else ""
        self.parts.append(
            f'<text x="{_n(x)}" y="{_n(y)}" font-family="sans-serif" font-size="{size}" '
            f'text-anchor="{anchor}"{rot}>{escape(str(s))}</text>'
        )

    def render(self) -> str:
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
                f'viewBox="0 0 {self.width} {self.height}">')
        return "\n".join([head, f'<rect x="0" y="0" width="{self.width}" height="{self.height}" fill="#fff"/>',
                          *self.parts, "</svg>"]) + "\n"


class _Frame:
    def __init__(self, c: Canvas, x_lo, x_hi, y_lo, y_hi):
        self.c = c
        self.x_lo, self.x_hi, self.y_lo, self.y_hi = x_lo, x_hi, y_lo, y_hi
        self.x0, self.x1 = LEFT, c.width - RIGHT
        self.y0, self.y1 = c.height - BOTTOM, TOP

    def px(self, x):
        return self.x0 + (x - self.x_lo) / (self.x_hi - self.x_lo) * (self.x1 - self.x0)

    def py(self, y):
        return self.y0 - (y - self.y_lo) / (self.y_hi - self.y_lo) * (self.y0 - self.y1)

    def axes(self, title, xlabel, ylabel, yticks, xticks=None, xtick_labels=None):
        c = self.c
        c.text(c.width / 2, 22, title, size=14, anchor="middle")
        c.line(self.x0, self.y0, self.x1, self.y0)
        c.line(self.x0, self.y0, self.x0, self.y1)
        for v in yticks:
            y = self.py(v)
            c.line(self.x0 - 4, y, self.x0, y)
            c.text(self.x0 - 7, y + 4, _tick_label(v), size=10, anchor="end")
        for i, v in enumerate(xticks or []):
            x = self.px(v)
            c.line(x, self.y0, x, self.y0 + 4)
            label = xtick_labels[i] if xtick_labels else _tick_label(v)
            c.text(x, self.y0 + 16, label, size=10, anchor="middle")
        c.text((self.x0 + self.x1) / 2, c.height - 12, xlabel, anchor="middle")
        c.text(16, (self.y0 + self.y1) / 2, ylabel, anchor="middle", rotate=-90)

    def legend(self, names):
        c = self.c
        x = self.x1 + 14
        for i, name in enumerate(names):
            y = self.y1 + 8 + 18 * i
            c.rect(x, y - 9, 10, 10, PALETTE[i % len(PALETTE)])
            c.text(x + 16, y, name, size=11)


def bar_chart(title: str, xlabel: str, ylabel: str, categories: Sequence[str],
              series: Sequence[tuple[str, Sequence[float]]]) -> str:
    """Grouped bars, one group per category and one bar per series."""
    c = Canvas()
    top = max([v for _, vals in series for v in vals if math.isfinite(v)] + [1e-12])
    ticks = nice_ticks(0.0, top)
    f = _Frame(c, -0.5, len(categories) - 0.5, 0.0, max(ticks[-1], top))
    f.axes(title, xlabel, ylabel, ticks, list(range(len(categories))), list(categories))
    group_w = (f.x1 - f.x0) / len(categories) * 0.8
    bar_w = group_w / max(1, len(series))
    for si, (_, vals) in enumerate(series):
        color = PALETTE[si % len(PALETTE)]
        for ci, v in enumerate(vals):
            if not math.isfinite(v):
                continue
            x = f.px(ci) - group_w / 2 + si * bar_w
            c.rect(x, f.py(v), bar_w * 0.92, f.py(0.0) - f.py(v), color)
    f.legend([name for name, _ in series])
    return c.render()


def line_chart(title: str, xlabel: str, ylabel: str,
               series: Sequence[tuple[str, Sequence[float], Sequence[float]]]) -> str:
    """One polyline with circle markers per series; NaN points are skipped."""
    c = Canvas()
    xs = [x for _, sx, sy in series for x, y in zip(sx, sy) if math.isfinite(x) and math.isfinite(y)]
    ys = [y for _, sx, sy in series for x, y in zip(sx, sy) if math.isfinite(x) and math.isfinite(y)]
    if not xs:
        xs, ys = [0.0, 1.0], [0.0, 1.0]
    xt = nice_ticks(min(xs), max(xs))
    yt = nice_ticks(min(ys), max(ys))
    f = _Frame(c, xt[0], max(xt[-1], xt[0] + 1e-9), yt[0], max(yt[-1], yt[0] + 1e-9))
    f.axes(title, xlabel, ylabel, yt, xt)
    for si, (_, sx, sy) in enumerate(series):
        color = PALETTE[si % len(PALETTE)]
        pts = [(f.px(x), f.py(y)) for x, y in zip(sx, sy) if math.isfinite(x) and math.isfinite(y)]
        if len(pts) > 1:
            c.polyline(pts, color)
        for x, y in pts:
            c.circle(x, y, 3.5, color)
    f.legend([name for name, _, _ in series])
    return c.render()
