from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence, Tuple

from PIL import Image, ImageDraw, ImageFont

logger = logging.getLogger(__name__)

WIDTH, HEIGHT = 640, 480
MARGIN = 60
_AXIS = (0, 0, 0)
_SERIES = [(31, 119, 180), (214, 39, 40), (44, 160, 44), (148, 103, 189)]


def _load_font(size: int):
    try:
        return ImageFont.truetype("/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf", size)
    except OSError:
        return ImageFont.load_default()


def _frame(title: str, xlabel: str, ylabel: str) -> Tuple[Image.Image, ImageDraw.ImageDraw]:
    img = Image.new("RGB", (WIDTH, HEIGHT), "white")
    draw = ImageDraw.Draw(img)
    font = _load_font(14)
    draw.text((MARGIN, 15), title, fill=_AXIS, font=font)
    draw.line([(MARGIN, HEIGHT - MARGIN), (WIDTH - MARGIN, HEIGHT - MARGIN)], fill=_AXIS, width=1)
    draw.line([(MARGIN, MARGIN), (MARGIN, HEIGHT - MARGIN)], fill=_AXIS, width=1)
    draw.text((WIDTH // 2 - 40, HEIGHT - MARGIN + 25), xlabel, fill=_AXIS, font=font)
    draw.text((5, MARGIN - 25), ylabel, fill=_AXIS, font=font)
    return img, draw


def _to_px(x: float, y: float, xr: Tuple[float, float], yr: Tuple[float, float]) -> Tuple[float, float]:
    sx = (x - xr[0]) / ((xr[1] - xr[0]) or 1.0)
    sy = (y - yr[0]) / ((yr[1] - yr[0]) or 1.0)
    return MARGIN + sx * (WIDTH - 2 * MARGIN), HEIGHT - MARGIN - sy * (HEIGHT - 2 * MARGIN)


def _ticks(draw: ImageDraw.ImageDraw, xr, yr) -> None:
    font = _load_font(11)
    for i in range(5):
        fx = xr[0] + (xr[1] - xr[0]) * i / 4
        fy = yr[0] + (yr[1] - yr[0]) * i / 4
        px, _ = _to_px(fx, yr[0], xr, yr)
        _, py = _to_px(xr[0], fy, xr, yr)
        draw.text((px - 10, HEIGHT - MARGIN + 5), f"{fx:.2g}", fill=_AXIS, font=font)
        draw.text((10, py - 6), f"{fy:.2g}", fill=_AXIS, font=font)


def _save(img: Image.Image, path: str) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_suffix(".tmp.png")
    img.save(tmp, format="PNG")
    tmp.replace(p)


def line_plot(
    path: str,
    series: Sequence[Tuple[str, Sequence[float], Sequence[float]]],
    title: str,
    xlabel: str,
    ylabel: str,
    yrange: Tuple[float, float] = (0.0, 1.0),
) -> None:
    """One PNG with a line per (name, xs, ys) series."""
    xs_all = [x for _, xs, _ in series for x in xs]
    if not xs_all:
        logger.info("nothing to plot for %s", path)
        return
    xr = (min(xs_all), max(xs_all))
    img, draw = _frame(title, xlabel, ylabel)
    _ticks(draw, xr, yrange)
    font = _load_font(12)
    for i, (name, xs, ys) in enumerate(series):
        color = _SERIES[i % len(_SERIES)]
        pts = [_to_px(x, y, xr, yrange) for x, y in zip(xs, ys)]
        if len(pts) > 1:
            draw.line(pts, fill=color, width=2)
        draw.text((WIDTH - MARGIN - 150, MARGIN + 18 * i), name, fill=color, font=font)
    _save(img, path)


def histogram_plot(path: str, edges: Sequence[float], mass: Sequence[float], title: str, xlabel: str) -> None:
    if not len(mass):
        logger.info("nothing to plot for %s", path)
        return
    xr = (float(edges[0]), float(edges[-1]))
    yr = (0.0, max(float(max(mass)), 1e-12))
    img, draw = _frame(title, xlabel, "fraction")
    _ticks(draw, xr, yr)
    for lo, hi, m in zip(edges[:-1], edges[1:], mass):
        x0, y0 = _to_px(lo, m, xr, yr)
        x1, y1 = _to_px(hi, 0.0, xr, yr)
        draw.rectangle([x0, y0, x1, y1], outline=_AXIS, fill=_SERIES[0])
    _save(img, path)
