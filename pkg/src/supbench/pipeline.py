"""Glue between tiles on disk, the estimators and the experiment drivers."""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import SplitManifest, TileRecord, rasterize_ground_truth, read_splits, read_tiles, subsample_ids, \
    write_splits, write_tiles
from .experiments import PredictionRecord, TileTruth
from .models import TileClassifier, TileDetector, VAEAnomalyDetector
from .models.base import DEFAULT_CONFIGS, TrainConfig, derive_seed, git_describe, write_train_log
from .models.detector import Detection

logger = logging.getLogger(__name__)

ESTIMATOR_CLASSES = {"detector": TileDetector, "classifier": TileClassifier, "vae": VAEAnomalyDetector}

# CPU-sized defaults for the reduced backbone; the full-size defaults stay in DEFAULT_CONFIGS
REDUCED_CONFIGS = {
    "detector": TrainConfig(epochs=3, batch_size=8, optimizer="adam", learning_rate=1e-3, positive_class_weight=20.0),
    "classifier": TrainConfig(epochs=8, batch_size=14, optimizer="adam", learning_rate=1e-3, positive_class_weight=20.0),
    "vae": TrainConfig(epochs=3, batch_size=8, optimizer="adam", learning_rate=1e-3, reconstruction_weight=0.9,
                       latent_dims=128),
}


class DegenerateSubset(ValueError):
    """The training subset cannot train this method (e.g. no positive tiles)."""


def default_config(method: str, backbone: str = "reduced") -> TrainConfig:
    table = DEFAULT_CONFIGS if backbone == "resnet50" else REDUCED_CONFIGS
    return replace(table[method])


def run_seed(base_seed: int, run: int) -> int:
    return derive_seed(base_seed, "run", run)


@dataclass
class TileDataset:
    tiles: dict[str, TileRecord]
    splits: SplitManifest

    @classmethod
    def from_tiles(cls, tiles: Sequence[TileRecord], splits: SplitManifest) -> "TileDataset":
        return cls({t.tile_id: t for t in tiles}, splits)

    @classmethod
    def load(cls, directory: str | Path) -> "TileDataset":
        directory = Path(directory)
        if not (directory / "manifest.tsv").exists():
            raise FileNotFoundError(f"no prepared tiles in {directory} (missing manifest.tsv)")
        return cls.from_tiles(read_tiles(directory), read_splits(directory / "splits.tsv"))

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        write_tiles(directory, list(self.tiles.values()))
        write_splits(directory / "splits.tsv", self.splits)

    @property
    def tile_size(self) -> int:
        return next(iter(self.tiles.values())).size

    def images(self, ids: Sequence[str]) -> np.ndarray:
        if not ids:
            return np.zeros((0, self.tile_size, self.tile_size, 3), dtype=np.uint8)
        return np.stack([self.tiles[i].image for i in ids])

    def labels(self, ids: Sequence[str]) -> np.ndarray:
        return np.array([self.tiles[i].presence for i in ids], dtype=bool)

    def boxes(self, ids: Sequence[str]) -> list[np.ndarray]:
        return [np.array(self.tiles[i].boxes, dtype=np.float32).reshape(-1, 4) for i in ids]

    def truth(self, ids: Iterable[str]) -> dict[str, TileTruth]:
        """Labels for every tile; masks only for positives, the only tiles ever localized."""
        out = {}
        for i in ids:
            t = self.tiles[i]
            if t.presence:
                out[i] = TileTruth(True, rasterize_ground_truth(t, "polygons"), rasterize_ground_truth(t, "boxes"))
            else:
                out[i] = TileTruth(False)
        return out


def make_estimator(method: str, config: TrainConfig, backbone: str = "reduced", tile_size: int = 200):
    cls = ESTIMATOR_CLASSES[method]
    extra = {"tile_size": tile_size} if "tile_size" in cls._get_param_names() else {}
    return cls.from_config(config.validate(), backbone=backbone, **extra)


def training_ids(method: str, data: TileDataset, config: TrainConfig) -> list[str]:
    pool = data.splits.vae_train if method == "vae" else data.splits.train
    # subset seed ignores the fraction so smaller subsets nest inside larger ones
    ids = subsample_ids(pool, config.data_fraction, derive_seed(config.rng_seed, "subset"))
    if not ids:
        raise DegenerateSubset(f"{method}: training subset is empty at fraction {config.data_fraction}")
    if method != "vae" and not data.labels(ids).any():
        raise DegenerateSubset(f"{method}: training subset has no positive tiles at fraction {config.data_fraction}")
    return ids


def train_method(method: str, data: TileDataset, config: TrainConfig, backbone: str = "reduced"):
    ids = training_ids(method, data, config)
    est = make_estimator(method, config, backbone, data.tile_size)
    X = data.images(ids)
    if method == "detector":
        est.fit(X, data.boxes(ids))
    elif method == "classifier":
        est.fit(X, data.labels(ids))
    else:
        est.fit(X)
        est.calibrate(data.images(list(data.splits.validation)))
    return est


def predict_method(est, method: str, data: TileDataset, ids: Sequence[str] | None = None,
                   run_id: int = 0, cam_method: str = "gradcam", batch: int = 64) -> list[PredictionRecord]:
    ids = list(data.splits.test if ids is None else ids)
    records = []
    for lo in range(0, len(ids), batch):
        chunk = ids[lo:lo + batch]
        X = data.images(chunk)
        if method == "detector":
            for tid, dets in zip(chunk, est.predict_detections(X)):
                score = max((d.score for d in dets), default=0.0)
                records.append(PredictionRecord(tid, method, run_id, score, detections=dets))
        else:
            scores = est.presence_scores(X)
            maps = est.heatmaps(X, cam_method)
            for tid, s, h in zip(chunk, scores, maps):
                # stored maps are quantized so in-memory and on-disk evaluation agree bit for bit
                records.append(PredictionRecord(tid, method, run_id, float(s), heatmap=quantize_heatmap(h)))
    return records


# -------------------------------------------------------------- persistence

PGM_MAXVAL = 65535


def write_pgm(path: str | Path, values: np.ndarray) -> None:
    """16-bit binary PGM of a map in [0, 1]."""
    q = np.round(np.clip(values, 0.0, 1.0) * PGM_MAXVAL).astype(">u2")
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n{PGM_MAXVAL}\n".encode() + q.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(raw[m.end(): m.end() + w * h * np.dtype(dtype).itemsize], dtype=dtype)
    return data.reshape(h, w).astype(float) / maxval


def write_pbm(path: str | Path, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    Path(path).write_bytes(f"P4\n{w} {h}\n".encode() + np.packbits(mask, axis=1).tobytes())


def read_pbm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P4\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PBM")
    w, h = (int(g) for g in m.groups())
    packed = np.frombuffer(raw[m.end(): m.end() + h * ((w + 7) // 8)], dtype=np.uint8)
    bits = np.unpackbits(packed.reshape(h, -1), axis=1)
    return bits[:, :w].astype(bool)


def quantize_heatmap(values: np.ndarray) -> np.ndarray:
    """The exact values a heatmap takes after a PGM round trip."""
    return np.round(np.clip(values, 0.0, 1.0) * PGM_MAXVAL) / PGM_MAXVAL


def _fmt(v: float) -> str:
    return repr(float(v))


def write_predictions(run_dir: str | Path, records: Sequence[PredictionRecord], cam_method: str = "gradcam") -> Path:
    """``predictions.tsv`` plus one heatmap PGM per tile for the CAM-based methods."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    lines = ["tile_id\tmethod\trun\tpresence_score\tdetections\theatmap"]
    for r in records:
        dets = ";".join(",".join(_fmt(v) for v in (*d.box, d.score)) for d in r.detections or ())
        hm = ""
        if r.heatmap is not None:
            rel = Path("heatmaps") / cam_method / f"{r.tile_id}.pgm"
            (run_dir / rel.parent).mkdir(parents=True, exist_ok=True)
            write_pgm(run_dir / rel, r.heatmap)
            hm = rel.as_posix()
        lines.append(f"{r.tile_id}\t{r.method}\t{r.run_id}\t{_fmt(r.presence_score)}\t{dets}\t{hm}")
    path = run_dir / "predictions.tsv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_predictions(path: str | Path) -> list[PredictionRecord]:
    path = Path(path)
    records = []
    for line in path.read_text(encoding="utf-8").splitlines()[1:]:
        if not line:
            continue
        tid, method, run, score, dets, hm = line.split("\t")
        detections = None
        heatmap = None
        if method == "detector":
            detections = []
            for d in filter(None, dets.split(";")):
                x1, y1, x2, y2, s = map(float, d.split(","))
                detections.append(Detection((x1, y1, x2, y2), s))
        if hm:
            heatmap = read_pgm(path.parent / hm)
        records.append(PredictionRecord(tid, method, int(run), float(score), detections, heatmap))
    return records


def run_dir(results: str | Path, experiment: str, method: str, run: int) -> Path:
    return Path(results) / experiment / method / f"run{run}"


def write_run_manifest(directory: str | Path, **fields) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = {"git_describe": git_describe(), **fields}
    (directory / "run_manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def train_and_save(method: str, data: TileDataset, config: TrainConfig, backbone: str, directory: Path):
    est = train_method(method, data, config, backbone)
    directory.mkdir(parents=True, exist_ok=True)
    est.save(directory / "model.pt")
    write_train_log(directory / "train_log.tsv", est.history_)
    return est
