"""Result tables and charts: CSV via the stdlib, hand-assembled SVG.

Charts are built from sorted inputs with fixed float formatting, so the same
metrics always produce byte-identical files.
"""

from __future__ import annotations

import csv
import io

import numpy as np

from .evaluate import OUTCOMES, PolicyEvalResult

_COLORS = {"passed": "#4c9f70", "collision": "#c0504d", "stuck": "#8064a2"}
_W, _H = 640, 360
_MARGIN_L, _MARGIN_B, _MARGIN_T = 60, 48, 28


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def outcome_rows(results: dict[str, PolicyEvalResult]) -> list[list]:
    rows = [["regime", "n", *OUTCOMES, *[f"{k}_rate" for k in OUTCOMES]]]
    for name in sorted(results):
        r = results[name]
        rows.append([name, r.n, *[r.counts[k] for k in OUTCOMES],
                     *[_fmt(r.rate(k)) for k in OUTCOMES]])
    return rows


def write_outcome_csv(results: dict[str, PolicyEvalResult], path) -> None:
    rows = outcome_rows(results)
    if hasattr(path, "write"):
        csv.writer(path, lineterminator="\n").writerows(rows)
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def _svg_header(title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W // 2}" y="18" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
    ]


def outcome_chart_svg(results: dict[str, PolicyEvalResult], title: str) -> str:
    """Grouped bar chart of outcome rates per regime."""
    names = sorted(results)
    parts = _svg_header(title)
    plot_w = _W - _MARGIN_L - 20
    plot_h = _H - _MARGIN_T - _MARGIN_B
    base_y = _MARGIN_T + plot_h
    # y axis with 0..1 gridlines
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = base_y - frac * plot_h
        parts.append(f'<line x1="{_MARGIN_L}" y1="{_fmt(y)}" x2="{_W - 20}" '
                     f'y2="{_fmt(y)}" stroke="#dddddd"/>')
        parts.append(f'<text x="{_MARGIN_L - 8}" y="{_fmt(y + 4)}" '
                     f'text-anchor="end" font-family="sans-serif" '
                     f'font-size="11">{_fmt(frac)}</text>')
    if names:
        group_w = plot_w / len(names)
        bar_w = group_w / (len(OUTCOMES) + 1)
        for gi, name in enumerate(names):
            r = results[name]
            gx = _MARGIN_L + gi * group_w
            for oi, outcome in enumerate(OUTCOMES):
                h = r.rate(outcome) * plot_h
                x = gx + (oi + 0.5) * bar_w
                parts.append(
                    f'<rect x="{_fmt(x)}" y="{_fmt(base_y - h)}" '
                    f'width="{_fmt(bar_w * 0.9)}" height="{_fmt(h)}" '
                    f'fill="{_COLORS[outcome]}"/>'
                )
            parts.append(
                f'<text x="{_fmt(gx + group_w / 2)}" y="{base_y + 16}" '
                f'text-anchor="middle" font-family="sans-serif" '
                f'font-size="12">{name}</text>'
            )
    # legend
    lx = _MARGIN_L
    for outcome in OUTCOMES:
        parts.append(f'<rect x="{lx}" y="{_H - 18}" width="10" height="10" '
                     f'fill="{_COLORS[outcome]}"/>')
        parts.append(f'<text x="{lx + 14}" y="{_H - 9}" '
                     f'font-family="sans-serif" font-size="11">{outcome}</text>')
        lx += 110
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_outcome_chart(results: dict[str, PolicyEvalResult], title: str, path) -> None:
    svg = outcome_chart_svg(results, title)
    if hasattr(path, "write"):
        path.write(svg)
        return
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(svg)


def density_snapshot_svg(samples, realized, tail_prob: float, title: str) -> str:
    """Scatter of predicted future positions with the realized position.

    Coordinates are auto-scaled to the sample cloud; the realized point is
    drawn as a cross so an out-of-distribution position is visible at a
    glance.
    """
    pts = np.asarray(samples, dtype=float)
    rx, ry = float(realized[0]), float(realized[1])
    xs = np.append(pts[:, 0], rx)
    ys = np.append(pts[:, 1], ry)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    pad_x = 0.1 * (x1 - x0) + 0.5
    pad_y = 0.1 * (y1 - y0) + 0.5
    x0, x1 = x0 - pad_x, x1 + pad_x
    y0, y1 = y0 - pad_y, y1 + pad_y

    def sx(v):
        return _MARGIN_L + (v - x0) / (x1 - x0) * (_W - _MARGIN_L - 20)

    def sy(v):
        return (_H - _MARGIN_B) - (v - y0) / (y1 - y0) * (_H - _MARGIN_T - _MARGIN_B)

    parts = _svg_header(title)
    for px, py in pts:
        parts.append(f'<circle cx="{_fmt(sx(px))}" cy="{_fmt(sy(py))}" r="1.5" '
                     f'fill="#4c72b0" fill-opacity="0.35"/>')
    cx, cy = sx(rx), sy(ry)
    parts.append(f'<line x1="{_fmt(cx - 6)}" y1="{_fmt(cy)}" x2="{_fmt(cx + 6)}" '
                 f'y2="{_fmt(cy)}" stroke="#c0504d" stroke-width="2"/>')
    parts.append(f'<line x1="{_fmt(cx)}" y1="{_fmt(cy - 6)}" x2="{_fmt(cx)}" '
                 f'y2="{_fmt(cy + 6)}" stroke="#c0504d" stroke-width="2"/>')
    parts.append(f'<text x="{_MARGIN_L}" y="{_H - 6}" font-family="sans-serif" '
                 f'font-size="11">tail probability {_fmt(tail_prob)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def csv_bytes(results: dict[str, PolicyEvalResult]) -> bytes:
    buf = io.StringIO()
    write_outcome_csv(results, buf)
    return buf.getvalue().encode("utf-8")
