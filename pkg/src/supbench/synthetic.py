"""Desk-scale synthetic overhead scenes with panel-like objects and distractors.

Panels are dark blue rectangles with a light grid; distractors mimic the
false positives seen on real imagery (bright pools, thin beams, dark
rectangular shadows). Only panels are annotated.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .dataset import TILE_SIZE, PolygonAnnotation, SceneRecord

DISTRACTOR_KINDS = ("pool", "beam", "shadow")
CITIES = ("fresno", "stockton", "modesto", "oxnard")
MAX_PLACEMENT_TRIES = 200


@dataclass
class SyntheticSpec:
    n_scenes: int = 4
    scene_size: int = 1000
    panel_density: float = 10.0
    distractor_mix: dict[str, float] = field(default_factory=lambda: {"pool": 1.0, "beam": 1.0, "shadow": 1.0})
    distractor_density: float = 6.0
    panel_size: tuple[int, int] = (10, 30)
    rng_seed: int = 0
    tile_size: int = TILE_SIZE

    def validate(self) -> None:
        if self.n_scenes < 0:
            raise ValueError("n_scenes must be >= 0")
        if self.scene_size <= 0 or self.scene_size % self.tile_size:
            raise ValueError(f"scene_size {self.scene_size} must be a positive multiple of tile size {self.tile_size}")
        if self.panel_density < 0 or self.distractor_density < 0:
            raise ValueError("densities must be >= 0")
        unknown = set(self.distractor_mix) - set(DISTRACTOR_KINDS)
        if unknown:
            raise ValueError(f"unknown distractor kinds {sorted(unknown)}; expected {DISTRACTOR_KINDS}")
        if any(w < 0 for w in self.distractor_mix.values()):
            raise ValueError("distractor weights must be >= 0")
        lo, hi = self.panel_size
        if not 2 <= lo <= hi:
            raise ValueError("panel_size must satisfy 2 <= min <= max")


def _smooth_noise(rng: np.random.Generator, size: int, cell: int) -> np.ndarray:
    coarse = rng.random((size // cell + 2, size // cell + 2))
    idx = np.arange(size) / cell
    i0 = idx.astype(int)
    frac = idx - i0
    rows = coarse[i0] * (1 - frac)[:, None] + coarse[i0 + 1] * frac[:, None]
    return rows[:, i0] * (1 - frac)[None, :] + rows[:, i0 + 1] * frac[None, :]


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    low = _smooth_noise(rng, size, 50)
    mid = _smooth_noise(rng, size, 12)
    base = np.array([118.0, 112.0, 88.0])
    tint = np.array([-20.0, 18.0, -10.0])
    img = base + (low[..., None] - 0.5) * 40 + (mid[..., None] - 0.5) * 18 + low[..., None] * tint
    img += rng.normal(0, 4, size=img.shape)
    # roofs
    for _ in range(int(rng.poisson(size * size / 20000))):
        w, h = rng.integers(20, 70, size=2)
        x, y = rng.integers(0, size - w), rng.integers(0, size - h)
        grey = rng.uniform(120, 185)
        img[y:y + h, x:x + w] = grey + rng.normal(0, 3, size=(h, w, 1))
    return img


class _Occupancy:
    def __init__(self, size: int, margin: int = 2):
        self.taken = np.zeros((size, size), dtype=bool)
        self.margin = margin

    def try_claim(self, x: int, y: int, w: int, h: int) -> bool:
        m = self.margin
        region = self.taken[max(0, y - m):y + h + m, max(0, x - m):x + w + m]
        if region.any():
            return False
        self.taken[y:y + h, x:x + w] = True
        return True


def _place(rng, occ: _Occupancy, size: int, w: int, h: int, what: str) -> tuple[int, int]:
    for _ in range(MAX_PLACEMENT_TRIES):
        x = int(rng.integers(0, size - w + 1))
        y = int(rng.integers(0, size - h + 1))
        if occ.try_claim(x, y, w, h):
            return x, y
    raise RuntimeError(f"could not place {what} of size {w}x{h} after {MAX_PLACEMENT_TRIES} tries; density too high")


def _paint_panel(img: np.ndarray, rng, x: int, y: int, w: int, h: int) -> None:
    fill = np.array([28.0, 38.0, 72.0]) + rng.normal(0, 3, size=3)
    patch = np.broadcast_to(fill, (h, w, 3)).copy()
    patch += rng.normal(0, 3, size=patch.shape)
    step = int(rng.integers(4, 6))
    line = np.array([135.0, 145.0, 175.0])
    patch[::step, :] = line
    patch[:, ::step] = line
    img[y:y + h, x:x + w] = patch


def _paint_distractor(img: np.ndarray, rng, kind: str, occ: _Occupancy, size: int) -> None:
    if kind == "pool":
        w, h = (int(v) for v in rng.integers(10, 28, size=2))
        x, y = _place(rng, occ, size, w, h, kind)
        img[y:y + h, x:x + w] = np.array([70.0, 160.0, 225.0]) + rng.normal(0, 4, size=(h, w, 3))
    elif kind == "beam":
        length, thick = int(rng.integers(30, 90)), int(rng.integers(2, 4))
        w, h = (length, thick) if rng.random() < 0.5 else (thick, length)
        x, y = _place(rng, occ, size, w, h, kind)
        img[y:y + h, x:x + w] = np.array([200.0, 200.0, 205.0]) + rng.normal(0, 4, size=(h, w, 3))
    elif kind == "shadow":
        w, h = (int(v) for v in rng.integers(10, 30, size=2))
        x, y = _place(rng, occ, size, w, h, kind)
        img[y:y + h, x:x + w] = np.array([38.0, 38.0, 40.0]) + rng.normal(0, 3, size=(h, w, 3))
    else:  # pragma: no cover - validated upstream
        raise ValueError(kind)


def _generate_scene(spec: SyntheticSpec, index: int, seed_seq: np.random.SeedSequence) -> SceneRecord:
    rng = np.random.default_rng(seed_seq)
    size = spec.scene_size
    img = _background(rng, size)
    occ = _Occupancy(size)
    scene_id = f"synth{index:04d}"
    polygons = []
    lo, hi = spec.panel_size
    for k in range(int(rng.poisson(spec.panel_density))):
        w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        x, y = _place(rng, occ, size, w, h, "panel")
        _paint_panel(img, rng, x, y, w, h)
        polygons.append(PolygonAnnotation(((x, y), (x + w, y), (x + w, y + h), (x, y + h)), f"{scene_id}_p{k:03d}"))
    weights = np.array([spec.distractor_mix.get(k, 0.0) for k in DISTRACTOR_KINDS], dtype=float)
    if weights.sum() > 0:
        probs = weights / weights.sum()
        for _ in range(int(rng.poisson(spec.distractor_density))):
            kind = DISTRACTOR_KINDS[int(rng.choice(len(DISTRACTOR_KINDS), p=probs))]
            _paint_distractor(img, rng, kind, occ, size)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return SceneRecord(scene_id, image, polygons, CITIES[index % len(CITIES)])


def generate_synthetic_dataset(spec: SyntheticSpec) -> tuple[list[SceneRecord], dict[str, list[PolygonAnnotation]]]:
    """Generate scenes and their panel polygons (the ground truth)."""
    spec.validate()
    seqs = np.random.SeedSequence(spec.rng_seed).spawn(spec.n_scenes)
    scenes = [_generate_scene(spec, i, s) for i, s in enumerate(seqs)]
    return scenes, {s.scene_id: list(s.polygons) for s in scenes}


def panel_mask(scene: SceneRecord) -> np.ndarray:
    h, w = scene.shape
    mask = np.zeros((h, w), dtype=bool)
    for p in scene.polygons:
        geometry.rasterize_polygon(p.vertices, h, w, out=mask)
    return mask
