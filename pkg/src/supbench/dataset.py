"""Scene ingestion, tiling, polygon cleaning and train/val/test splits."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from . import geometry

logger = logging.getLogger(__name__)

TILE_SIZE = 200
MIN_AREA_PX = 5
MIN_SIDE_PX = 2
SPLIT_RATIOS = (8, 1, 1)
IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".jpg", ".jpeg", ".ppm", ".bmp")


@dataclass(frozen=True)
class PolygonAnnotation:
    vertices: tuple[tuple, ...]
    polygon_id: str

    def __post_init__(self):
        if len(self.vertices) < 3:
            raise ValueError(f"polygon {self.polygon_id!r} needs at least 3 vertices")
        object.__setattr__(self, "vertices", tuple((geometry.as_exact(x), geometry.as_exact(y)) for x, y in self.vertices))

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return tuple(float(v) for v in geometry.polygon_bounds(self.vertices))


@dataclass
class SceneRecord:
    scene_id: str
    image: np.ndarray
    polygons: list[PolygonAnnotation] = field(default_factory=list)
    city: str = "unknown"

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]


@dataclass
class TileRecord:
    """A tile with its clipped polygons; boxes and presence are derived."""

    tile_id: str
    scene_id: str
    grid_row: int
    grid_col: int
    image: np.ndarray | None
    polygons: tuple[PolygonAnnotation, ...] = ()

    @property
    def presence(self) -> bool:
        return len(self.polygons) > 0

    @property
    def boxes(self) -> list[tuple[float, float, float, float]]:
        return [p.bounds for p in self.polygons]

    @property
    def size(self) -> int:
        return TILE_SIZE if self.image is None else self.image.shape[0]


@dataclass(frozen=True)
class SplitManifest:
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]
    vae_train: tuple[str, ...]
    seed: int

    def split_of(self) -> dict[str, str]:
        out = {t: "train" for t in self.train}
        out.update({t: "validation" for t in self.validation})
        out.update({t: "test" for t in self.test})
        return out


# ---------------------------------------------------------------- ingestion


def parse_vertices(text: str) -> list[tuple]:
    pts = []
    for token in text.split():
        x, y = token.split(",")
        pts.append((geometry.as_exact(x), geometry.as_exact(y)))
    return pts


def format_vertices(vertices: Iterable[tuple]) -> str:
    return " ".join(f"{_fmt_num(x)},{_fmt_num(y)}" for x, y in vertices)


def _fmt_num(v) -> str:
    v = Fraction(v)
    return str(v.numerator) if v.denominator == 1 else f"{v.numerator}/{v.denominator}"


def read_annotation_file(path: str | Path) -> tuple[dict[str, str], dict[str, list[PolygonAnnotation]]]:
    """Parse an annotation file.

    Lines are tab separated. ``@scene <scene_id> <city>`` declares a scene;
    ``<scene_id> <polygon_id> <x,y x,y ...>`` attaches a polygon. ``#`` starts
    a comment line.
    """
    cities: dict[str, str] = {}
    polygons: dict[str, list[PolygonAnnotation]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if fields[0] == "@scene":
            cities[fields[1]] = fields[2] if len(fields) > 2 else "unknown"
            continue
        if len(fields) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
        scene_id, polygon_id, verts = fields
        polygons.setdefault(scene_id, []).append(PolygonAnnotation(tuple(parse_vertices(verts)), polygon_id))
    return cities, polygons


def _find_images(root: Path) -> dict[str, Path]:
    found = {}
    for p in sorted(root.iterdir()):
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
            found.setdefault(p.stem, p)
    return found


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def ingest_scenes(root_path: str | Path, annotation_file: str | Path | None = None) -> list[SceneRecord]:
    root = Path(root_path)
    images = _find_images(root) if root.exists() else {}
    cities, polygons = ({}, {}) if annotation_file is None else read_annotation_file(annotation_file)
    if cities:
        for scene_id in polygons:
            if scene_id not in cities:
                raise ValueError(f"polygon references unknown scene {scene_id!r}")
    for scene_id in sorted(set(cities) | set(polygons)):
        if scene_id not in images:
            raise FileNotFoundError(f"no image file for annotated scene {scene_id!r} under {root}")
    scenes = []
    for scene_id in sorted(images):
        image = load_image(images[scene_id])
        scene_polys = polygons.get(scene_id, [])
        h, w = image.shape[:2]
        for poly in scene_polys:
            x0, y0, x1, y1 = poly.bounds
            if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
                raise ValueError(f"polygon {poly.polygon_id!r} lies outside scene {scene_id!r} ({w}x{h})")
        scenes.append(SceneRecord(scene_id, image, list(scene_polys), cities.get(scene_id, "unknown")))
    return scenes


def clean_empty_scenes(scenes: Sequence[SceneRecord]) -> list[SceneRecord]:
    return [s for s in scenes if s.polygons]


# ------------------------------------------------------------------- tiling


def tile_id_for(scene_id: str, row: int, col: int) -> str:
    return f"{scene_id}_r{row:03d}_c{col:03d}"


def tile_scene(scene: SceneRecord, tile_size: int = TILE_SIZE) -> list[TileRecord]:
    """Cut a scene into non-overlapping tiles in row-major order.

    Bottom/right remainders that do not fill a full tile are cropped away.
    """
    if tile_size <= 0:
        raise ValueError(f"tile_size must be positive, got {tile_size}")
    h, w = scene.shape
    n_rows, n_cols = h // tile_size, w // tile_size
    clipped: dict[tuple[int, int], list[PolygonAnnotation]] = {}
    for poly in scene.polygons:
        x0, y0, x1, y1 = poly.bounds
        r_lo, r_hi = max(0, math.floor(y0 / tile_size)), min(n_rows - 1, math.floor(y1 / tile_size))
        c_lo, c_hi = max(0, math.floor(x0 / tile_size)), min(n_cols - 1, math.floor(x1 / tile_size))
        for r in range(r_lo, r_hi + 1):
            for c in range(c_lo, c_hi + 1):
                ox, oy = c * tile_size, r * tile_size
                piece = geometry.clip_polygon(poly.vertices, ox, oy, ox + tile_size, oy + tile_size)
                if not piece:
                    continue
                local = tuple((x - ox, y - oy) for x, y in piece)
                clipped.setdefault((r, c), []).append(PolygonAnnotation(local, poly.polygon_id))
    tiles = []
    for r in range(n_rows):
        for c in range(n_cols):
            img = scene.image[r * tile_size:(r + 1) * tile_size, c * tile_size:(c + 1) * tile_size]
            tiles.append(TileRecord(
                tile_id=tile_id_for(scene.scene_id, r, c),
                scene_id=scene.scene_id,
                grid_row=r,
                grid_col=c,
                image=np.ascontiguousarray(img),
                polygons=tuple(clipped.get((r, c), ())),
            ))
    return tiles


def keep_polygon(poly: PolygonAnnotation, tile_size: int = TILE_SIZE) -> bool:
    x0, y0, x1, y1 = geometry.polygon_bounds(poly.vertices)
    if x1 - x0 < MIN_SIDE_PX or y1 - y0 < MIN_SIDE_PX:
        return False
    return geometry.pixel_count(poly.vertices, tile_size, tile_size) >= MIN_AREA_PX


def filter_small_polygons(tiles: Sequence[TileRecord]) -> list[TileRecord]:
    out = []
    for tile in tiles:
        kept = tuple(p for p in tile.polygons if keep_polygon(p, tile.size))
        out.append(tile if len(kept) == len(tile.polygons) else replace(tile, polygons=kept))
    return out


def rasterize_ground_truth(tile: TileRecord, mode: str = "polygons") -> np.ndarray:
    size = tile.size
    mask = np.zeros((size, size), dtype=bool)
    if mode == "polygons":
        for poly in tile.polygons:
            geometry.rasterize_polygon(poly.vertices, size, size, out=mask)
    elif mode == "boxes":
        for box in tile.boxes:
            geometry.fill_box(mask, box)
    else:
        raise ValueError(f"unknown ground-truth mode {mode!r}; expected 'polygons' or 'boxes'")
    return mask


# ------------------------------------------------------------------- splits


def build_splits(tiles: Sequence[TileRecord], seed: int) -> SplitManifest:
    if not tiles:
        raise ValueError("cannot split an empty tile list")
    ids = np.array([t.tile_id for t in tiles])
    order = np.random.default_rng(seed).permutation(len(ids))
    n = len(ids)
    total = sum(SPLIT_RATIOS)
    n_train = n * SPLIT_RATIOS[0] // total
    n_val = n * SPLIT_RATIOS[1] // total
    train = tuple(ids[order[:n_train]].tolist())
    val = tuple(ids[order[n_train:n_train + n_val]].tolist())
    test = tuple(ids[order[n_train + n_val:]].tolist())
    positive = {t.tile_id for t in tiles if t.presence}
    vae_train = tuple(t for t in train if t not in positive)
    return SplitManifest(train, val, test, vae_train, seed)


def subsample_ids(ids: Sequence[str], fraction: float, seed: int) -> list[str]:
    """Deterministic nested subset of ``ids`` keeping the original order.

    For a fixed seed, the subset for a smaller fraction is contained in the
    subset for any larger one; ``fraction == 1`` returns ``ids`` unchanged.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    ids = list(ids)
    if fraction == 1:
        return ids
    k = math.ceil(fraction * len(ids) - 1e-9)
    rank = np.random.default_rng(seed).permutation(len(ids))
    chosen = set(rank[:k].tolist())
    return [t for i, t in enumerate(ids) if i in chosen]


def write_splits(path: str | Path, manifest: SplitManifest) -> None:
    vae = set(manifest.vae_train)
    lines = [
        f"# seed\t{manifest.seed}",
        "# stratification\ttile-level uniform (not stratified by scene or city)",
        "tile_id\tsplit\tvae_train",
    ]
    for split, ids in (("train", manifest.train), ("validation", manifest.validation), ("test", manifest.test)):
        lines += [f"{t}\t{split}\t{int(t in vae)}" for t in ids]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_splits(path: str | Path) -> SplitManifest:
    seed = 0
    parts: dict[str, list[str]] = {"train": [], "validation": [], "test": []}
    vae = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("# seed"):
            seed = int(line.split("\t")[1])
        if not line or line.startswith("#") or line.startswith("tile_id\t"):
            continue
        tile_id, split, in_vae = line.split("\t")
        parts[split].append(tile_id)
        if split == "train" and in_vae == "1":
            vae.append(tile_id)
    return SplitManifest(tuple(parts["train"]), tuple(parts["validation"]), tuple(parts["test"]), tuple(vae), seed)


# -------------------------------------------------------------- persistence


def _format_box(box) -> str:
    return ",".join(repr(float(v)) for v in box)


def write_tiles(directory: str | Path, tiles: Sequence[TileRecord]) -> None:
    """Write tile images plus ``manifest.tsv`` and ``annotations.tsv``."""
    directory = Path(directory)
    (directory / "tiles").mkdir(parents=True, exist_ok=True)
    manifest = ["tile_id\tscene_id\trow\tcol\tpresence\tboxes"]
    annotations = ["tile_id\tpolygon_id\tvertices"]
    for t in tiles:
        if t.image is not None:
            Image.fromarray(t.image).save(directory / "tiles" / f"{t.tile_id}.png", optimize=False)
        boxes = ";".join(_format_box(b) for b in t.boxes)
        manifest.append(f"{t.tile_id}\t{t.scene_id}\t{t.grid_row}\t{t.grid_col}\t{int(t.presence)}\t{boxes}")
        annotations += [f"{t.tile_id}\t{p.polygon_id}\t{format_vertices(p.vertices)}" for p in t.polygons]
    (directory / "manifest.tsv").write_text("\n".join(manifest) + "\n", encoding="utf-8")
    (directory / "annotations.tsv").write_text("\n".join(annotations) + "\n", encoding="utf-8")


def read_tiles(directory: str | Path, load_images: bool = True) -> list[TileRecord]:
    directory = Path(directory)
    polys: dict[str, list[PolygonAnnotation]] = {}
    for line in (directory / "annotations.tsv").read_text(encoding="utf-8").splitlines()[1:]:
        if line:
            tile_id, pid, verts = line.split("\t")
            polys.setdefault(tile_id, []).append(PolygonAnnotation(tuple(parse_vertices(verts)), pid))
    tiles = []
    for line in (directory / "manifest.tsv").read_text(encoding="utf-8").splitlines()[1:]:
        if not line:
            continue
        tile_id, scene_id, row, col, _presence, _boxes = line.split("\t")
        image = load_image(directory / "tiles" / f"{tile_id}.png") if load_images else None
        tiles.append(TileRecord(tile_id, scene_id, int(row), int(col), image, tuple(polys.get(tile_id, ()))))
    return tiles


def prepare_tiles(scenes: Sequence[SceneRecord], tile_size: int = TILE_SIZE, clean: bool = True) -> list[TileRecord]:
    """Clean, tile and size-filter a list of scenes."""
    if clean:
        before = len(scenes)
        scenes = clean_empty_scenes(scenes)
        logger.info("removed %d scenes without polygons", before - len(scenes))
    tiles: list[TileRecord] = []
    for scene in scenes:
        tiles.extend(tile_scene(scene, tile_size))
    return filter_small_polygons(tiles)
