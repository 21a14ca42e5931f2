from html import escape

import numpy as np

from .svgd import TrajectoryRecord

PANEL_WIDTH = 640
PANEL_HEIGHT = 240
MARGIN = 48


def _polyline(xs: np.ndarray, ys: np.ndarray, top: float) -> str:
    keep = np.isfinite(xs) & np.isfinite(ys)
    xs, ys = xs[keep], ys[keep]
    if len(xs) == 0:
        return ""
    x_lo, x_hi = float(xs.min()), float(xs.max())
    y_lo, y_hi = float(ys.min()), float(ys.max())
    x_span = x_hi - x_lo or 1.0
    y_span = y_hi - y_lo or 1.0
    width = PANEL_WIDTH - 2 * MARGIN
    height = PANEL_HEIGHT - 2 * MARGIN
    px = MARGIN + (xs - x_lo) / x_span * width
    py = top + MARGIN + (1.0 - (ys - y_lo) / y_span) * height
    points = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(px, py))
    return f"<polyline fill='none' stroke='#1f77b4' stroke-width='1.5' points='{points}'/>"


def _panel(index: int, label: str, xs: np.ndarray, ys: np.ndarray, x_label: str) -> str:
    top = index * PANEL_HEIGHT
    finite = ys[np.isfinite(ys)]
    y_range = f"{finite.min():.4g} .. {finite.max():.4g}" if len(finite) else "n/a"
    x_range = f"{np.nanmin(xs):.4g} .. {np.nanmax(xs):.4g}" if len(xs) else "n/a"
    return (
        f"<g class='panel'>"
        f"<rect x='{MARGIN}' y='{top + MARGIN}' width='{PANEL_WIDTH - 2 * MARGIN}' "
        f"height='{PANEL_HEIGHT - 2 * MARGIN}' fill='none' stroke='#888'/>"
        f"<text x='{MARGIN}' y='{top + MARGIN - 10}' font-size='14'>{escape(label)} ({escape(y_range)})</text>"
        f"<text x='{MARGIN}' y='{top + PANEL_HEIGHT - 14}' font-size='12'>{escape(x_label)} ({escape(x_range)})</text>"
        f"{_polyline(xs, ys, top)}"
        f"</g>"
    )


def get_svg_content(record: TrajectoryRecord, title: str = "steinflow") -> str:
    """
    Static line charts of KSD (and tracked KL when recorded) against iteration or time.
    Each panel is scaled to its own data range.
    """
    xs = record.times if record.time_based else record.steps.astype(float)
    x_label = "time" if record.time_based else "iteration"
    panels = [("KSD", record.ksd)]
    if record.has_kl:
        panels.append(("KL (relative)" if record.kl_relative else "KL", record.kl))
    body = "".join(_panel(i, label, xs, ys, x_label) for i, (label, ys) in enumerate(panels))
    height = PANEL_HEIGHT * len(panels) + 24

    return f"""<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{PANEL_WIDTH}" height="{height}" viewBox="0 0 {PANEL_WIDTH} {height}">
<style>text {{ font-family: sans-serif; fill: #333; }}</style>
<rect width="100%" height="100%" fill="white"/>
<text x="{MARGIN}" y="{height - 6}" font-size="12">{escape(title)}</text>
{body}
</svg>
"""
