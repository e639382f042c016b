"""Deterministic PNG rendering of confidence maps with detection overlays.

Rendering is pure pixel manipulation (Pillow, no font or display stack), so
output bytes are a function of the inputs alone.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .evalsuite import Detection

# black -> deep purple -> red-orange -> yellow, inferno-like anchors
_ANCHORS = np.array(
    [
        [0.0, 0, 0, 4],
        [0.25, 87, 16, 110],
        [0.5, 188, 55, 84],
        [0.75, 249, 142, 9],
        [1.0, 252, 255, 164],
    ],
    dtype=np.float64,
)


def colorize(values: np.ndarray) -> np.ndarray:
    """Map an array of [0,1] confidences to uint8 RGB."""
    v = np.clip(values, 0.0, 1.0)
    rgb = np.stack(
        [np.interp(v, _ANCHORS[:, 0], _ANCHORS[:, 1 + c]) for c in range(3)], axis=-1
    )
    return rgb.astype(np.uint8)


def render_frame(
    confmaps: np.ndarray,
    detections: Sequence[Detection],
    class_names: Sequence[str],
    scale: int = 4,
    gap: int = 2,
) -> Image.Image:
    """One image per frame: a horizontal strip of per-class heatmaps.

    Detections are drawn as green crosses on their class's panel; rows are
    range bins (top = bin 0), columns azimuth bins.
    """
    num_classes, h, w = confmaps.shape
    panel_w = w * scale
    canvas = Image.new(
        "RGB", (num_classes * panel_w + (num_classes - 1) * gap, h * scale), (30, 30, 30)
    )
    for c in range(num_classes):
        panel = Image.fromarray(colorize(confmaps[c]), mode="RGB").resize(
            (panel_w, h * scale), resample=Image.NEAREST
        )
        canvas.paste(panel, (c * (panel_w + gap), 0))
    draw = ImageDraw.Draw(canvas)
    arm = max(2, scale)
    for det in detections:
        if det.class_id >= num_classes:
            continue
        x = det.class_id * (panel_w + gap) + det.azimuth_bin * scale + scale // 2
        y = det.range_bin * scale + scale // 2
        draw.line([(x - arm, y), (x + arm, y)], fill=(0, 255, 70), width=1)
        draw.line([(x, y - arm), (x, y + arm)], fill=(0, 255, 70), width=1)
    return canvas


def save_frame_png(
    path: str | Path,
    confmaps: np.ndarray,
    detections: Sequence[Detection],
    class_names: Sequence[str],
    scale: int = 4,
):
    img = render_frame(confmaps, detections, class_names, scale=scale)
    img.save(Path(path), format="PNG")
