"""Input validation helpers for the estimator API."""
from __future__ import annotations

import numpy as np


def check_tiles(X, size: int | None = None) -> np.ndarray:
    """Validate a stack of RGB tiles shaped ``(n, H, W, 3)``."""
    X = np.asarray(X)
    if X.ndim == 3 and X.shape[-1] == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected tiles shaped (n, H, W, 3), got {X.shape}")
    if X.shape[1] != X.shape[2]:
        raise ValueError(f"tiles must be square, got {X.shape[1]}x{X.shape[2]}")
    if size is not None and X.shape[1] != size:
        raise ValueError(f"expected {size}x{size} tiles, got {X.shape[1]}x{X.shape[2]}")
    if X.dtype != np.uint8:
        if not np.issubdtype(X.dtype, np.number) or not np.isfinite(X).all():
            raise ValueError("tiles must be finite numeric arrays")
        X = np.clip(np.rint(X), 0, 255).astype(np.uint8)
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    return y.astype(bool)


def check_boxes(boxes, n: int, size: int) -> list[np.ndarray]:
    if len(boxes) != n:
        raise ValueError(f"expected box lists for {n} tiles, got {len(boxes)}")
    out = []
    for b in boxes:
        b = np.asarray(b, dtype=np.float32).reshape(-1, 4)
        if len(b) and ((b[:, 2] <= b[:, 0]).any() or (b[:, 3] <= b[:, 1]).any()):
            raise ValueError("boxes must satisfy x1 < x2 and y1 < y2")
        if len(b) and ((b < 0).any() or (b > size).any()):
            raise ValueError(f"boxes must lie within [0, {size}]")
        out.append(b)
    return out


def check_threshold(t: float, name: str = "threshold") -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {t}")
    return t


def check_same_length(*arrays) -> None:
    lengths = {len(a) for a in arrays}
    if len(lengths) > 1:
        raise ValueError(f"length mismatch: {[len(a) for a in arrays]}")
