"""Tiny deterministic SVG line plots (no plotting dependency)."""

from __future__ import annotations

from .errors import ContractViolation

_WIDTH, _HEIGHT = 640, 440
_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 70, 20, 40, 50
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def write_line_plot(path: str, series: list[tuple[str, list[float], list[float]]],
                    xlabel: str, ylabel: str, title: str) -> None:
    """Render labelled (x, y) polylines with axes and a legend."""
    if not series or any(len(xs) != len(ys) or not xs for _, xs, ys in series):
        raise ContractViolation("write_line_plot: each series needs matching x/y data")
    all_x = [x for _, xs, _ in series for x in xs]
    all_y = [y for _, _, ys in series for y in ys]
    x_lo, x_hi = min(all_x), max(all_x)
    y_lo, y_hi = min(all_y), max(all_y)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    pad = 0.05 * (y_hi - y_lo) if y_hi > y_lo else 0.05
    y_lo, y_hi = y_lo - pad, y_hi + pad

    plot_w = _WIDTH - _MARGIN_L - _MARGIN_R
    plot_h = _HEIGHT - _MARGIN_T - _MARGIN_B

    def sx(x: float) -> float:
        return _MARGIN_L + (x - x_lo) / (x_hi - x_lo) * plot_w

    def sy(y: float) -> float:
        return _MARGIN_T + (1.0 - (y - y_lo) / (y_hi - y_lo)) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{_HEIGHT}">',
        f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>',
        f'<text x="{_WIDTH // 2}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="15">{title}</text>',
    ]
    axis_y, axis_x0, axis_x1 = _HEIGHT - _MARGIN_B, _MARGIN_L, _WIDTH - _MARGIN_R
    parts.append(f'<line x1="{axis_x0}" y1="{axis_y}" x2="{axis_x1}" y2="{axis_y}" '
                 'stroke="black"/>')
    parts.append(f'<line x1="{axis_x0}" y1="{_MARGIN_T}" x2="{axis_x0}" y2="{axis_y}" '
                 'stroke="black"/>')
    for i in range(5):
        fx = x_lo + (x_hi - x_lo) * i / 4
        fy = y_lo + (y_hi - y_lo) * i / 4
        parts.append(f'<text x="{_fmt(sx(fx))}" y="{axis_y + 18}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="11">{fx:.2g}</text>')
        parts.append(f'<text x="{axis_x0 - 8}" y="{_fmt(sy(fy) + 4)}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11">{fy:.3g}</text>')
    parts.append(f'<text x="{_WIDTH // 2}" y="{_HEIGHT - 12}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="13">{xlabel}</text>')
    parts.append(f'<text x="18" y="{_HEIGHT // 2}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="13" '
                 f'transform="rotate(-90 18 {_HEIGHT // 2})">{ylabel}</text>')

    for idx, (label, xs, ys) in enumerate(series):
        color = _COLORS[idx % len(_COLORS)]
        points = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{points}" fill="none" stroke="{color}" '
                     'stroke-width="2"/>')
        ly = _MARGIN_T + 16 * idx
        parts.append(f'<line x1="{axis_x1 - 130}" y1="{ly}" x2="{axis_x1 - 105}" '
                     f'y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{axis_x1 - 100}" y="{ly + 4}" font-family="sans-serif" '
                     f'font-size="11">{label}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")
