"""Minimal SVG writers for heatmaps and line charts (no plotting dependency)."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np


def _color(v, lo, hi):
    """Diverging blue-white-red ramp."""
    t = 0.5 if hi == lo else (float(v) - lo) / (hi - lo)
    t = min(max(t, 0.0), 1.0)
    if t < 0.5:
        k = t / 0.5
        r, g, b = int(59 + 196 * k), int(76 + 179 * k), 255
    else:
        k = (t - 0.5) / 0.5
        r, g, b = 255, int(255 - 179 * k), int(255 - 196 * k)
    return f"rgb({r},{g},{b})"


def heatmap_svg(grid, row_labels=None, title="", lo=-1.0, hi=1.0, cell=18, highlight=None) -> str:
    grid = np.asarray(grid, dtype=float)
    rows, cols = grid.shape
    left, top = 48, 28 if title else 8
    width, height = left + cols * cell + 8, top + rows * cell + 20
    labels = row_labels or [str(i) for i in range(rows)]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">']
    if title:
        out.append(f'<text x="{left}" y="16" font-size="12">{escape(title)}</text>')
    for i in range(rows):
        y = top + i * cell
        out.append(f'<text x="{left - 4}" y="{y + cell * 0.7:.1f}" text-anchor="end">{escape(labels[i])}</text>')
        for j in range(cols):
            x = left + j * cell
            out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{_color(grid[i, j], lo, hi)}">'
                       f"<title>{grid[i, j]:.4f}</title></rect>")
    for j in range(cols):
        out.append(f'<text x="{left + j * cell + cell / 2:.1f}" y="{top + rows * cell + 12}" text-anchor="middle">{j}</text>')
    if highlight is not None:
        i, j = highlight
        out.append(f'<rect x="{left + j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" fill="none" '
                   'stroke="red" stroke-width="2" stroke-dasharray="3,2"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def line_chart_svg(series: dict, title="", xlabel="layer", ylabel="", width=360, height=220) -> str:
    """One polyline per named series; x values are 1..n."""
    left, right, top, bottom = 44, 90, 24, 30
    all_y = np.concatenate([np.asarray(v, dtype=float) for v in series.values()]) if series else np.zeros(1)
    lo, hi = float(np.nanmin(all_y)), float(np.nanmax(all_y))
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    n = max((len(v) for v in series.values()), default=1)
    pw, ph = width - left - right, height - top - bottom

    def xy(i, v):
        x = left + (pw * i / (n - 1) if n > 1 else pw / 2)
        return x, top + ph * (1 - (v - lo) / (hi - lo))

    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">',
           f'<text x="{left}" y="14" font-size="12">{escape(title)}</text>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>',
           f'<text x="{left - 4}" y="{top + 4}" text-anchor="end">{hi:.3g}</text>',
           f'<text x="{left - 4}" y="{top + ph}" text-anchor="end">{lo:.3g}</text>',
           f'<text x="{left + pw / 2}" y="{height - 6}" text-anchor="middle">{escape(xlabel)}</text>']
    if ylabel:
        out.append(f'<text x="10" y="{top + ph / 2}" transform="rotate(-90 10 {top + ph / 2})" '
                   f'text-anchor="middle">{escape(ylabel)}</text>')
    for k, (name, values) in enumerate(series.items()):
        color = palette[k % len(palette)]
        pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in (xy(i, float(v)) for i, v in enumerate(values)))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{left + pw + 6}" y="{top + 12 * (k + 1)}" fill="{color}">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
