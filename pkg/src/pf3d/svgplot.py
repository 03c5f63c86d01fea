"""Dependency-free SVG line and bar charts for metrics logs and reports."""

from __future__ import annotations

import numpy as np

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]

_W, _H = 640, 400
_ML, _MR, _MT, _MB = 64, 16, 36, 48


def _esc(s: str) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _frame(title: str, xlabel: str, ylabel: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="12">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="14">{_esc(title)}</text>',
        f'<text x="{_W / 2}" y="{_H - 10}" text-anchor="middle">{_esc(xlabel)}</text>',
        f'<text x="16" y="{_H / 2}" text-anchor="middle" '
        f'transform="rotate(-90 16 {_H / 2})">{_esc(ylabel)}</text>',
        f'<rect x="{_ML}" y="{_MT}" width="{_W - _ML - _MR}" '
        f'height="{_H - _MT - _MB}" fill="none" stroke="#999"/>',
    ]


def _scales(x_range, y_range):
    x0, x1 = x_range
    y0, y1 = y_range
    if x1 <= x0:
        x1 = x0 + 1.0
    if y1 <= y0:
        y1 = y0 + 1.0
    px = lambda x: _ML + (x - x0) / (x1 - x0) * (_W - _ML - _MR)
    py = lambda y: _H - _MB - (y - y0) / (y1 - y0) * (_H - _MT - _MB)
    return px, py, (x0, x1, y0, y1)


def _y_ticks(parts, py, y0, y1):
    for v in np.linspace(y0, y1, 5):
        parts.append(
            f'<text x="{_ML - 6}" y="{py(v) + 4}" text-anchor="end">{v:.3g}</text>'
        )
        parts.append(
            f'<line x1="{_ML}" y1="{py(v)}" x2="{_W - _MR}" y2="{py(v)}" '
            f'stroke="#eee"/>'
        )


def line_chart(series: dict, path, title: str = "", xlabel: str = "", ylabel: str = ""):
    """series: {name: (xs, ys)}; writes an SVG file."""
    xs_all = np.concatenate([np.asarray(x, float) for x, _ in series.values()])
    ys_all = np.concatenate([np.asarray(y, float) for _, y in series.values()])
    px, py, (x0, x1, y0, y1) = _scales(
        (xs_all.min(), xs_all.max()), (ys_all.min(), ys_all.max())
    )
    parts = _frame(title, xlabel, ylabel)
    _y_ticks(parts, py, y0, y1)
    for v in np.linspace(x0, x1, 5):
        parts.append(
            f'<text x="{px(v)}" y="{_H - _MB + 16}" text-anchor="middle">{v:.3g}</text>'
        )
    for k, (name, (xs, ys)) in enumerate(series.items()):
        color = _PALETTE[k % len(_PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{_W - _MR - 8}" y="{_MT + 16 + 16 * k}" text-anchor="end" '
            f'fill="{color}">{_esc(name)}</text>'
        )
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts))


def bar_chart(labels, values, path, errors=None, title: str = "", ylabel: str = ""):
    values = np.asarray(values, float)
    errors = np.zeros_like(values) if errors is None else np.asarray(errors, float)
    top = float((values + errors).max()) if len(values) else 1.0
    px, py, (_, _, y0, y1) = _scales((0, max(len(values), 1)), (0.0, top * 1.1 or 1.0))
    parts = _frame(title, "", ylabel)
    _y_ticks(parts, py, y0, y1)
    span = _W - _ML - _MR
    bw = span / max(len(values), 1)
    for i, (label, v, e) in enumerate(zip(labels, values, errors)):
        x = _ML + i * bw + 0.15 * bw
        color = _PALETTE[i % len(_PALETTE)]
        parts.append(
            f'<rect x="{x:.2f}" y="{py(v):.2f}" width="{0.7 * bw:.2f}" '
            f'height="{_H - _MB - py(v):.2f}" fill="{color}" opacity="0.8"/>'
        )
        if e > 0:
            cx = x + 0.35 * bw
            parts.append(
                f'<line x1="{cx:.2f}" y1="{py(v - e):.2f}" x2="{cx:.2f}" '
                f'y2="{py(v + e):.2f}" stroke="#333" stroke-width="2"/>'
            )
        parts.append(
            f'<text x="{x + 0.35 * bw:.2f}" y="{_H - _MB + 16}" '
            f'text-anchor="middle">{_esc(label)}</text>'
        )
        parts.append(
            f'<text x="{x + 0.35 * bw:.2f}" y="{py(v) - 6:.2f}" '
            f'text-anchor="middle">{v:.3f}</text>'
        )
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts))
