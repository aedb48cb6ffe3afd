"""Self-rendered SVG: line charts for ablation curves and k* heatmaps for grid traces.

Output is deterministic: fixed viewBox, fixed number formatting, series and
cells emitted in sorted order.
"""

from __future__ import annotations

import math
from html import escape

import numpy as np

WIDTH, HEIGHT = 640, 420
MARGIN = {"left": 70, "right": 150, "top": 40, "bottom": 55}
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def _f(x: float) -> str:
    return f"{x:.2f}"


def padded_range(values) -> tuple[float, float]:
    """Data range widened by 10% on each side; a degenerate range is widened around its value."""
    lo, hi = float(min(values)), float(max(values))
    span = hi - lo
    if span == 0:
        span = abs(lo) if lo != 0 else 1.0
        return lo - 0.1 * span, hi + 0.1 * span
    return lo - 0.1 * span, hi + 0.1 * span


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _header(title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" width="{WIDTH}" height="{HEIGHT}" '
        'font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]


def line_chart(series: dict[str, list[tuple[float, float]]], title: str = "", xlabel: str = "step",
               ylabel: str = "success rate") -> str:
    points = [p for pts in series.values() for p in pts]
    if not points:
        raise ValueError("nothing to plot")
    x0, x1 = padded_range([p[0] for p in points])
    y0, y1 = padded_range([p[1] for p in points])
    L, R, T, B = MARGIN["left"], WIDTH - MARGIN["right"], MARGIN["top"], HEIGHT - MARGIN["bottom"]

    def sx(x):
        return L + (x - x0) / (x1 - x0) * (R - L)

    def sy(y):
        return B - (y - y0) / (y1 - y0) * (B - T)

    out = _header(title)
    out.append(f'<rect x="{L}" y="{T}" width="{R - L}" height="{B - T}" fill="none" stroke="black"/>')
    for t in _ticks(x0, x1):
        out.append(f'<text x="{_f(sx(t))}" y="{B + 16}" text-anchor="middle">{t:.4g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text x="{L - 6}" y="{_f(sy(t) + 4)}" text-anchor="end">{t:.3g}</text>')
    out.append(f'<text x="{(L + R) / 2:.0f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{(T + B) / 2:.0f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {(T + B) / 2:.0f})">{escape(ylabel)}</text>')
    for i, name in enumerate(sorted(series)):
        color = PALETTE[i % len(PALETTE)]
        pts = sorted(series[name])
        if len(pts) > 1:
            path = " ".join(f"{_f(sx(x))},{_f(sy(y))}" for x, y in pts)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in pts:
            out.append(f'<circle cx="{_f(sx(x))}" cy="{_f(sy(y))}" r="3" fill="{color}"/>')
        ly = T + 14 + 18 * i
        out.append(f'<rect x="{R + 12}" y="{ly - 9}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{R + 28}" y="{ly}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def kstar_heatmap(grid: np.ndarray, title: str = "mean k*", k_max: float | None = None) -> str:
    """Cells shaded by value (white = low, dark blue = high); NaN cells are hatched grey.

    Row 0 of ``grid`` is drawn at the bottom so y grows upward.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 2 or grid.size == 0:
        raise ValueError("heatmap needs a non-empty 2-D grid")
    finite = grid[np.isfinite(grid)]
    if finite.size == 0:
        raise ValueError("heatmap has no finite cells")
    vmin = 0.0
    vmax = float(k_max) if k_max is not None else max(float(finite.max()), 1.0)
    H, W = grid.shape
    L, R, T, B = MARGIN["left"], WIDTH - MARGIN["right"], MARGIN["top"], HEIGHT - MARGIN["bottom"]
    cell = min((R - L) / W, (B - T) / H)
    out = _header(title)
    for y in range(H):
        for x in range(W):
            v = grid[y, x]
            px, py = L + x * cell, T + (H - 1 - y) * cell
            if math.isfinite(v):
                t = min(max((v - vmin) / (vmax - vmin), 0.0), 1.0)
                r, g, b = (int(round(255 - t * (255 - c))) for c in (8, 48, 107))
                fill = f"#{r:02x}{g:02x}{b:02x}"
                label = f"{v:.2f}"
            else:
                fill, label = "#dddddd", "-"
            out.append(f'<rect x="{_f(px)}" y="{_f(py)}" width="{_f(cell)}" height="{_f(cell)}" fill="{fill}" '
                       'stroke="black" stroke-width="0.5"/>')
            color = "white" if math.isfinite(v) and (v - vmin) / (vmax - vmin) > 0.55 else "black"
            out.append(f'<text x="{_f(px + cell / 2)}" y="{_f(py + cell / 2 + 4)}" text-anchor="middle" '
                       f'fill="{color}">{label}</text>')
    out.append(f'<text x="{R + 12}" y="{T + 14}">scale 0 to {vmax:g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def curves_from_rows(rows: list[dict], metric: str = "success_rate") -> dict[str, list[tuple[float, float]]]:
    """Per-arm mean of ``metric`` at each step, over seeds."""
    acc: dict[str, dict[float, list[float]]] = {}
    for r in rows:
        if r.get("status", "ok") != "ok" or r.get(metric) in (None, ""):
            continue
        acc.setdefault(str(r["arm"]), {}).setdefault(float(r["step"]), []).append(float(r[metric]))
    return {arm: [(x, sum(v) / len(v)) for x, v in sorted(d.items())] for arm, d in acc.items()}


def kstar_grid(trace: list[tuple], width: int, height: int) -> np.ndarray:
    """Mean selected k* per grid cell from (state, k*) pairs with state = y * width + x."""
    total = np.zeros((height, width))
    count = np.zeros((height, width))
    for s, k in trace:
        y, x = divmod(int(s), width)
        total[y, x] += k
        count[y, x] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)


def emit_plot(rows, kind: str, **kw) -> str:
    """``kind='curve'``: ablation rows to a line chart. ``kind='kstar'``: (state, k*) pairs to a heatmap."""
    if not rows:
        raise ValueError("empty table")
    if kind == "curve":
        metric = kw.pop("metric", "success_rate")
        series = curves_from_rows(rows, metric)
        if not series:
            raise ValueError(f"no rows carry a {metric!r} value")
        return line_chart(series, kw.get("title", metric), kw.get("xlabel", "step"), kw.get("ylabel", metric))
    if kind == "kstar":
        grid = kstar_grid(rows, kw["width"], kw["height"])
        return kstar_heatmap(grid, kw.get("title", "mean k*"), kw.get("k_max"))
    raise ValueError(f"unknown plot kind {kind!r}")
