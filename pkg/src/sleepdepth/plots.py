"""Dependency-free SVG rendering of annotated nights: a hypnogram panel, the
SDI curve with arousal shading, and a summary metrics box.

Output is deterministic text so plots can be diffed and tested byte-for-byte.
"""
from __future__ import annotations

import os

import numpy as np

from .annotate import SdiNight
from .biomarkers import ap, night_metrics, sleep_mask

WIDTH = 960
PANEL_HEIGHT = 180
MARGIN_LEFT = 70
MARGIN_RIGHT = 30
MARGIN_TOP = 40
PANEL_GAP = 50

# hypnogram rows top-to-bottom: W, R, N1, N2, N3 (conventional display order)
HYPNO_ORDER = {0: 0, 4: 1, 1: 2, 2: 3, 3: 4}
HYPNO_NAMES = ("W", "R", "N1", "N2", "N3")


def _fmt(x: float) -> str:
    return f"{x:.3f}".rstrip("0").rstrip(".")


def _polyline(points, stroke, width=1.5) -> str:
    path = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in points)
    return (f'<polyline fill="none" stroke="{stroke}" '
            f'stroke-width="{width}" points="{path}" />')


def _text(x, y, s, size=13, anchor="start", bold=False) -> str:
    weight = ' font-weight="bold"' if bold else ""
    return (f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-family="sans-serif" '
            f'font-size="{size}" text-anchor="{anchor}"{weight}>{s}</text>')


def night_svg(night: SdiNight, title: str = "") -> str:
    """Whole-night summary: hypnogram (when staged), SDI curve with
    per-epoch gray arousal shading, and a TST/SE/AUC/AP metrics box."""
    n = night.n_epochs
    if n < 2:
        raise ValueError("plot needs at least 2 epochs")
    plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    x_of = lambda i: MARGIN_LEFT + plot_w * i / (n - 1)
    panels = []
    y0 = MARGIN_TOP

    parts = []
    if title:
        parts.append(_text(MARGIN_LEFT, 24, title, size=16, bold=True))

    # hypnogram panel
    if night.stages is not None:
        step = PANEL_HEIGHT / 4
        y_of = lambda s: y0 + HYPNO_ORDER[int(s)] * step
        pts = []
        for i, s in enumerate(night.stages):
            pts.append((x_of(i), y_of(s)))
            if i + 1 < n:
                pts.append((x_of(i + 1), y_of(s)))
        parts.append(f'<rect x="{MARGIN_LEFT}" y="{y0}" width="{plot_w}" '
                     f'height="{PANEL_HEIGHT}" fill="none" stroke="#888" />')
        for k, name in enumerate(HYPNO_NAMES):
            parts.append(_text(MARGIN_LEFT - 8, y0 + k * step + 4, name,
                               anchor="end"))
        parts.append(_polyline(pts, "#1f4e9c"))
        parts.append(_text(MARGIN_LEFT, y0 - 8, "Hypnogram", bold=True))
        panels.append("hypnogram")
        y0 += PANEL_HEIGHT + PANEL_GAP

    # SDI panel with arousal shading
    sdi_y = lambda v: y0 + PANEL_HEIGHT * (1.0 - v)
    if night.arousal_prop is not None:
        bar_w = plot_w / (n - 1)
        for i, prop in enumerate(night.arousal_prop):
            if prop <= 0:
                continue
            # darker gray for larger within-epoch arousal proportion
            level = int(round(235 - 150 * min(1.0, float(prop))))
            color = f"rgb({level},{level},{level})"
            x = MARGIN_LEFT + plot_w * max(0.0, i - 0.5) / (n - 1)
            w = bar_w if 0 < i < n - 1 else bar_w / 2
            parts.append(f'<rect x="{_fmt(x)}" y="{y0}" width="{_fmt(w)}" '
                         f'height="{PANEL_HEIGHT}" fill="{color}" />')
    parts.append(f'<rect x="{MARGIN_LEFT}" y="{y0}" width="{plot_w}" '
                 f'height="{PANEL_HEIGHT}" fill="none" stroke="#888" />')
    for v in (0.0, 0.5, 1.0):
        parts.append(_text(MARGIN_LEFT - 8, sdi_y(v) + 4, _fmt(v), anchor="end"))
    parts.append(_polyline([(x_of(i), sdi_y(float(night.sdi[i])))
                            for i in range(n)], "#b02318"))
    parts.append(_text(MARGIN_LEFT, y0 - 8, "Sleep depth index", bold=True))
    parts.append(_text(MARGIN_LEFT + plot_w / 2, y0 + PANEL_HEIGHT + 28,
                       "Epoch (30 s)", anchor="middle"))
    panels.append("sdi")

    # metrics box
    metrics = night_metrics(night)
    tst_epochs = int(sleep_mask(night).sum())
    ap_value = ap(night.sdi, tst_epochs) if tst_epochs else float("nan")
    box_x = WIDTH - MARGIN_RIGHT - 190
    box_y = y0 + 10
    parts.append(f'<rect x="{box_x}" y="{box_y}" width="180" height="86" '
                 f'fill="white" fill-opacity="0.85" stroke="#444" />')
    lines = (
        f"TST: {_fmt(metrics.TST)} min",
        f"SE: {_fmt(metrics.SE)}",
        f"AUC: {_fmt(metrics.AUC)}",
        f"AP: {_fmt(ap_value)}",
    )
    for k, line in enumerate(lines):
        parts.append(_text(box_x + 10, box_y + 20 + 18 * k, line))

    height = y0 + PANEL_HEIGHT + 50
    body = "\n".join(parts)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
            f'height="{height}" viewBox="0 0 {WIDTH} {height}">\n'
            f'<rect width="{WIDTH}" height="{height}" fill="white" />\n'
            f"{body}\n</svg>\n")


def binned_correlation_svg(binned, title: str = "") -> str:
    """Scatter of per-bin mean arousal proportion against mean depth
    decrease, with CI whiskers and the fitted line."""
    good = np.flatnonzero(binned.nonempty())
    if len(good) < 2:
        raise ValueError("plot needs at least 2 nonempty bins")
    plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    y0 = MARGIN_TOP
    h = 2 * PANEL_HEIGHT
    x_max = float(np.nanmax(binned.decrease_means[good])) or 1.0
    y_max = max(float(np.nanmax(binned.ci_high[good])), 1e-9)
    x_of = lambda v: MARGIN_LEFT + plot_w * v / x_max
    y_of = lambda v: y0 + h * (1.0 - v / y_max)
    parts = []
    if title:
        parts.append(_text(MARGIN_LEFT, 24, title, size=16, bold=True))
    parts.append(f'<rect x="{MARGIN_LEFT}" y="{y0}" width="{plot_w}" '
                 f'height="{h}" fill="none" stroke="#888" />')
    x_line = np.array([0.0, x_max])
    y_line = binned.intercept + binned.slope * x_line
    parts.append(_polyline([(x_of(x), y_of(max(0.0, min(y, y_max))))
                            for x, y in zip(x_line, y_line)], "#777", 1.0))
    for b in good:
        cx = x_of(float(binned.decrease_means[b]))
        parts.append(_polyline([(cx, y_of(float(binned.ci_low[b]))),
                                (cx, y_of(float(binned.ci_high[b])))], "#b02318", 1.0))
        cy = y_of(float(binned.arousal_means[b]))
        parts.append(f'<circle cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="4" '
                     f'fill="#1f4e9c" />')
    parts.append(_text(MARGIN_LEFT + plot_w / 2, y0 + h + 34,
                       "Mean depth decrease (per bin)", anchor="middle"))
    parts.append(_text(MARGIN_LEFT, y0 - 8,
                       f"r = {_fmt(binned.pearson_r)}, slope = {_fmt(binned.slope)}",
                       bold=True))
    height = y0 + h + 50
    body = "\n".join(parts)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
            f'height="{height}" viewBox="0 0 {WIDTH} {height}">\n'
            f'<rect width="{WIDTH}" height="{height}" fill="white" />\n'
            f"{body}\n</svg>\n")


def write_svg(svg: str, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(svg)
    os.replace(tmp, path)
