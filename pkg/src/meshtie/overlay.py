"""Side-by-side match visualizations, in the style of photogrammetric QA plots."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from meshtie.propagate import RefinedCorrespondence

__all__ = ["export_overlay"]

_PALETTE = [
    (230, 80, 60), (60, 160, 230), (80, 200, 110), (240, 180, 50),
    (180, 100, 220), (70, 210, 200), (240, 120, 180), (150, 150, 60),
]


def export_overlay(
    ground_image: np.ndarray,
    aerial_image: np.ndarray,
    correspondences: list[RefinedCorrespondence],
    out_path: str | Path,
    insets: bool = False,
    inset_half: int = 24,
) -> Path:
    """Compose ground | aerial with correspondence lines; optionally paste
    2x enlarged insets of the first few matches along the bottom."""
    g = Image.fromarray(np.asarray(ground_image)).convert("RGB")
    a = Image.fromarray(np.asarray(aerial_image)).convert("RGB")
    height = max(g.height, a.height)
    canvas = Image.new("RGB", (g.width + a.width, height), (0, 0, 0))
    canvas.paste(g, (0, 0))
    canvas.paste(a, (g.width, 0))
    draw = ImageDraw.Draw(canvas)
    for k, c in enumerate(correspondences):
        color = _PALETTE[k % len(_PALETTE)]
        gx, gy = float(c.ground_px[0]), float(c.ground_px[1])
        ax, ay = float(c.aerial_px[0]) + g.width, float(c.aerial_px[1])
        draw.line([(gx, gy), (ax, ay)], fill=color, width=1)
        for x, y in ((gx, gy), (ax, ay)):
            draw.ellipse([x - 2, y - 2, x + 2, y + 2], outline=color)

    if insets and correspondences:
        strip = []
        for c in correspondences[:4]:
            gx, gy = int(c.ground_px[0]), int(c.ground_px[1])
            box = (max(gx - inset_half, 0), max(gy - inset_half, 0),
                   min(gx + inset_half, g.width), min(gy + inset_half, g.height))
            crop = g.crop(box).resize((4 * inset_half, 4 * inset_half), Image.NEAREST)
            strip.append(crop)
        if strip:
            total_w = sum(s.width for s in strip)
            extended = Image.new("RGB", (canvas.width, canvas.height + strip[0].height))
            extended.paste(canvas, (0, 0))
            x = (canvas.width - total_w) // 2
            for s in strip:
                extended.paste(s, (x, canvas.height))
                x += s.width
            canvas = extended

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(out_path)
    return out_path
