"""Convert heatmaps and detections to binary localization masks."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ._validation import check_threshold
from .geometry import fill_box


def threshold_heatmap(heatmap, t: float) -> np.ndarray:
    """``mask = heatmap >= t``; accepts a :class:`~supbench.cam.Heatmap` or an array."""
    t = check_threshold(t)
    values = getattr(heatmap, "values", heatmap)
    return np.asarray(values) >= t


def detections_to_mask(detections: Sequence, t: float, size: int | tuple[int, int] = 200) -> np.ndarray:
    """Union of the pixel extents of all boxes scoring at least ``t``."""
    shape = (size, size) if isinstance(size, int) else tuple(size)
    mask = np.zeros(shape, dtype=bool)
    for det in detections:
        if det.score >= t:
            fill_box(mask, det.box)
    return mask
