"""PNG output: image grids and simple line charts drawn with Pillow."""
from __future__ import annotations

import numpy as np


def to_uint8(image: np.ndarray, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """[C, H, W] or [H, W] float -> [H, W] uint8 (channel mean), min-max scaled unless bounds are given."""
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 3:
        a = a.mean(axis=0)
    lo = a.min() if lo is None else lo
    hi = a.max() if hi is None else hi
    span = hi - lo
    scaled = (a - lo) / span if span > 0 else np.zeros_like(a)
    return np.round(np.clip(scaled, 0, 1) * 255).astype(np.uint8)


def save_image_grid(path, rows: list[list[np.ndarray]], scale: int = 4, pad: int = 2) -> None:
    """Tile equally sized [H, W] uint8 tiles row by row, upscaled by ``scale``."""
    from PIL import Image

    h, w = rows[0][0].shape
    n_cols = max(len(r) for r in rows)
    th, tw = h * scale, w * scale
    canvas = np.full((len(rows) * (th + pad) + pad, n_cols * (tw + pad) + pad), 255, np.uint8)
    for i, row in enumerate(rows):
        for j, tile in enumerate(row):
            big = np.kron(tile, np.ones((scale, scale), np.uint8))
            y, x = pad + i * (th + pad), pad + j * (tw + pad)
            canvas[y:y + th, x:x + tw] = big
    Image.fromarray(canvas).save(path)


def save_line_chart(path, series: dict[str, list[float]], size=(480, 320), title: str = "") -> None:
    """Polyline per series on shared axes; legend text in the top-left corner."""
    from PIL import Image, ImageDraw

    w, h = size
    margin = 36
    img = Image.new("RGB", size, "white")
    draw = ImageDraw.Draw(img)
    values = [v for s in series.values() for v in s if v is not None and np.isfinite(v)]
    if not values:
        img.save(path)
        return
    lo, hi = min(values), max(values)
    if hi == lo:
        hi = lo + 1.0
    longest = max(len(s) for s in series.values())
    draw.rectangle([margin, margin, w - margin, h - margin], outline="black")
    colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]

    def xy(i, v):
        x = margin + (w - 2 * margin) * (i / max(longest - 1, 1))
        y = h - margin - (h - 2 * margin) * ((v - lo) / (hi - lo))
        return x, y

    for k, (name, s) in enumerate(series.items()):
        pts = [xy(i, v) for i, v in enumerate(s) if v is not None and np.isfinite(v)]
        colour = colours[k % len(colours)]
        if len(pts) > 1:
            draw.line(pts, fill=colour, width=2)
        draw.text((margin + 4, margin + 4 + 12 * k), name, fill=colour)
    draw.text((margin, 8), title, fill="black")
    draw.text((4, margin - 4), f"{hi:.3g}", fill="black")
    draw.text((4, h - margin - 8), f"{lo:.3g}", fill="black")
    img.save(path)
