"""Experiment drivers: threshold sweeps, CAM comparison, symmetry, ablation,
hyperparameter search, timing and decision fusion.

Everything here works on predictions and ground truth already in memory;
training and inference live in :mod:`supbench.pipeline`.
"""
from __future__ import annotations

import itertools
import math
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .localization import detections_to_mask, threshold_heatmap
from .metrics import RunAggregate, no_overlap_rate, overlap_scores, presence_f1, summarize_runs

METHODS = ("detector", "classifier", "vae")
DETECTOR_THRESHOLDS = (0.0, 0.1, 0.2, 0.3, 0.35, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.999)
CLASSIFIER_THRESHOLDS = (0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.999)
DEFAULT_THRESHOLDS = {"detector": DETECTOR_THRESHOLDS, "classifier": CLASSIFIER_THRESHOLDS, "vae": DETECTOR_THRESHOLDS}

# operating points used by the ablation and symmetry experiments
ABLATION_THRESHOLDS = {
    "detector": {"detect": 0.35, "localize": 0.35},
    "classifier": {"detect": 0.95, "localize": 0.7},
    "vae": {"detect": 0.6, "localize": 0.6},
}
SYMMETRY_THRESHOLDS = {"detector": 0.35, "classifier": 0.975, "vae": 0.6}
ABLATION_FRACTIONS = (0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)

METRIC_COLUMNS = ("f1", "precision", "recall", "dice_poly", "iou_poly", "dice_box", "iou_box", "no_overlap")

SEARCH_SPACE = {
    "epochs": [1, 3, 5, 8, 10, 20],
    "batch_size": list(range(1, 25)),
    "optimizer": ["adam", "adamw", "adagrad", "rmsprop", "asgd"],
    "learning_rate": [0.1, 0.01, 0.005, 0.001, 0.0005, 0.0001, 0.00005, 0.00001, 0.000005, 0.000001],
    "positive_class_weight": [1, 5, 10, 20, 30, 50, 100],
    "reconstruction_weight": [round(0.1 * i, 1) for i in range(11)],
    "latent_dims": [2 ** k for k in range(5, 15)],
}
SEARCH_KEYS = {
    "detector": ("epochs", "batch_size", "optimizer", "learning_rate", "positive_class_weight"),
    "classifier": ("epochs", "batch_size", "optimizer", "learning_rate", "positive_class_weight"),
    "vae": ("epochs", "batch_size", "optimizer", "learning_rate", "reconstruction_weight", "latent_dims"),
}


# -------------------------------------------------------------------- types


@dataclass
class PredictionRecord:
    tile_id: str
    method: str
    run_id: int
    presence_score: float
    detections: list | None = None
    heatmap: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 <= self.presence_score <= 1.0:
            raise ValueError(f"presence score {self.presence_score} outside [0, 1] for {self.tile_id}")

    def mask(self, t: float, size: int = 200) -> np.ndarray:
        if self.detections is not None:
            return detections_to_mask(self.detections, t, size)
        if self.heatmap is None:
            raise ValueError(f"record for {self.tile_id} carries neither detections nor a heatmap")
        return threshold_heatmap(self.heatmap, t)


@dataclass
class TileTruth:
    label: bool
    polygons_mask: np.ndarray | None = None
    boxes_mask: np.ndarray | None = None


@dataclass
class SweepSpec:
    method: str
    thresholds: tuple[float, ...] = ()
    gt_modes: tuple[str, ...] = ("polygons", "boxes")
    runs: int = 3

    def __post_init__(self):
        if not self.thresholds:
            self.thresholds = DEFAULT_THRESHOLDS.get(self.method, DETECTOR_THRESHOLDS)
        self.thresholds = tuple(float(t) for t in self.thresholds)
        if list(self.thresholds) != sorted(self.thresholds) or not all(0 <= t <= 1 for t in self.thresholds):
            raise ValueError("thresholds must be sorted ascending within [0, 1]")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")


@dataclass
class MetricsRow:
    threshold: float
    values: dict[str, RunAggregate]
    n_evaluated: int
    best_f1: bool = False
    best_dice: bool = False

    def __getattr__(self, name):
        values = self.__dict__.get("values", {})
        if name in values:
            return values[name]
        raise AttributeError(name)


@dataclass
class RunMetrics:
    """Metrics of a single run at a single threshold (NaN = absent)."""

    f1: float
    precision: float
    recall: float
    dice_poly: float
    iou_poly: float
    dice_box: float
    iou_box: float
    no_overlap: float
    n_evaluated: int


# ------------------------------------------------------------------- sweeps


def evaluate_run(records: Sequence[PredictionRecord], truth: Mapping[str, TileTruth], t: float,
                 t_localize: float | None = None) -> RunMetrics:
    """Presence F1 over all tiles plus TP-gated localization scores."""
    t_localize = t if t_localize is None else t_localize
    scores = np.array([r.presence_score for r in records])
    labels = np.array([truth[r.tile_id].label for r in records])
    f1, prec, rec = presence_f1(scores, labels, t)
    per_tile = []
    for r, s, lab in zip(records, scores, labels):
        if not (s >= t and lab):
            continue
        gt = truth[r.tile_id]
        mask = r.mask(t_localize, gt.polygons_mask.shape[0])
        per_tile.append(overlap_scores(mask, gt.polygons_mask) + overlap_scores(mask, gt.boxes_mask))
    if per_tile:
        arr = np.array(per_tile)
        dp, ip, db, ib = arr.mean(axis=0).tolist()
        nov = no_overlap_rate(arr[:, 0])
    else:
        dp = ip = db = ib = nov = math.nan
    return RunMetrics(f1, prec, rec, dp, ip, db, ib, nov, len(per_tile))


def _check_runs(spec_runs: int, predictions: Mapping[int, Sequence[PredictionRecord]]) -> list[int]:
    runs = sorted(predictions)
    if len(runs) != spec_runs:
        raise ValueError(f"expected predictions for {spec_runs} runs, got runs {runs}")
    tiles = None
    for k in runs:
        ids = [r.tile_id for r in predictions[k]]
        if tiles is None:
            tiles = ids
        elif ids != tiles:
            raise ValueError(f"run {k} covers different tiles than run {runs[0]}")
    return runs


def threshold_sweep(spec: SweepSpec, predictions: Mapping[int, Sequence[PredictionRecord]],
                    truth: Mapping[str, TileTruth]) -> list[MetricsRow]:
    runs = _check_runs(spec.runs, predictions)
    rows = []
    for t in spec.thresholds:
        per_run = [evaluate_run(predictions[k], truth, t) for k in runs]
        values = {c: summarize_runs([getattr(m, c) for m in per_run]) for c in METRIC_COLUMNS}
        rows.append(MetricsRow(t, values, sum(m.n_evaluated for m in per_run)))
    _flag_best(rows)
    return rows


def _argmax(values: list[float]) -> int | None:
    best, best_i = -math.inf, None
    for i, v in enumerate(values):
        if not math.isnan(v) and v > best:
            best, best_i = v, i
    return best_i


def _flag_best(rows: list[MetricsRow]) -> None:
    i = _argmax([r.values["f1"].mean for r in rows])
    if i is not None:
        rows[i].best_f1 = True
    j = _argmax([r.values["dice_poly"].mean for r in rows])
    if j is not None:
        rows[j].best_dice = True


def best_row(rows: Sequence[MetricsRow], key: str = "dice") -> MetricsRow | None:
    flag = "best_dice" if key == "dice" else "best_f1"
    return next((r for r in rows if getattr(r, flag)), None)


def cam_comparison(records_by_cam: Mapping[str, Mapping[int, Sequence[PredictionRecord]]],
                   truth: Mapping[str, TileTruth], thresholds: Sequence[float] = CLASSIFIER_THRESHOLDS,
                   runs: int | None = None) -> list[tuple[str, MetricsRow | None]]:
    """Per CAM method, the sweep row with the best polygon DICE."""
    out = []
    for cam, preds in records_by_cam.items():
        spec = SweepSpec("classifier", tuple(thresholds), runs=runs or len(preds))
        out.append((cam, best_row(threshold_sweep(spec, preds, truth), "dice")))
    return out


# ----------------------------------------------------------------- symmetry


@dataclass
class SymmetryMatrix:
    methods: tuple[str, ...]
    counts: dict[str, dict[str, int]]
    right_totals: dict[str, int]
    wrong_totals: dict[str, int]
    both_right: dict[tuple[str, str], int] = field(default_factory=dict)
    both_wrong: dict[tuple[str, str], int] = field(default_factory=dict)

    def pair_total(self, a: str, b: str) -> int:
        return self.counts[a][b] + self.counts[b][a] + self.both_right[(a, b)] + self.both_wrong[(a, b)]


def symmetry_matrix(predictions: Mapping[str, Mapping[str, bool]], labels: Mapping[str, bool]) -> SymmetryMatrix:
    """``counts[a][b]``: tiles that method ``a`` gets wrong and ``b`` gets right."""
    methods = tuple(predictions)
    tile_sets = {m: set(p) for m, p in predictions.items()}
    first = tile_sets[methods[0]] if methods else set()
    for m in methods:
        if tile_sets[m] != first:
            raise ValueError(f"method {m!r} was evaluated on a different tile set")
    tiles = sorted(first)
    correct = {m: np.array([bool(predictions[m][t]) == bool(labels[t]) for t in tiles]) for m in methods}
    counts = {a: {b: 0 for b in methods} for a in methods}
    both_right, both_wrong = {}, {}
    for a, b in itertools.product(methods, methods):
        if a != b:
            counts[a][b] = int(np.count_nonzero(~correct[a] & correct[b]))
        both_right[(a, b)] = int(np.count_nonzero(correct[a] & correct[b]))
        both_wrong[(a, b)] = int(np.count_nonzero(~correct[a] & ~correct[b]))
    right = {m: int(correct[m].sum()) for m in methods}
    wrong = {m: len(tiles) - right[m] for m in methods}
    return SymmetryMatrix(methods, counts, right, wrong, both_right, both_wrong)


# ------------------------------------------------------------------- fusion


FUSION_RULES = ("or", "and", "majority")


def fuse_presence(scores: Mapping[str, Sequence[float]], rule: str, thresholds: Mapping[str, float]) -> np.ndarray:
    """Binarize each method at its threshold and combine the votes."""
    if rule not in FUSION_RULES:
        raise ValueError(f"unknown fusion rule {rule!r}; expected one of {FUSION_RULES}")
    if not scores:
        raise ValueError("no methods to fuse")
    votes = np.stack([np.asarray(s, dtype=float) >= thresholds[m] for m, s in scores.items()])
    if rule == "or":
        return votes.any(axis=0)
    if rule == "and":
        return votes.all(axis=0)
    return 2 * votes.sum(axis=0) > len(votes)


# ----------------------------------------------------------------- ablation


@dataclass
class AblationSpec:
    fractions: tuple[float, ...] = ABLATION_FRACTIONS
    thresholds: dict[str, dict[str, float]] = field(default_factory=lambda: {k: dict(v) for k, v in ABLATION_THRESHOLDS.items()})
    methods: tuple[str, ...] = METHODS
    runs: int = 3

    def __post_init__(self):
        fr = list(self.fractions)
        if fr != sorted(fr) or not all(0 < f <= 1 for f in fr):
            raise ValueError("fractions must be ascending within (0, 1]")


@dataclass
class AblationPoint:
    method: str
    fraction: float
    f1: RunAggregate
    dice: RunAggregate
    degenerate: bool


def run_jobs(jobs: Mapping[str, Callable[[], object]], workers: int = 1) -> dict[str, object]:
    """Run independent jobs, returning results keyed (and ordered) by job id."""
    if workers <= 1:
        results = {k: fn() for k, fn in jobs.items()}
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {k: pool.submit(fn) for k, fn in jobs.items()}
            results = {k: f.result() for k, f in futures.items()}
    return {k: results[k] for k in sorted(results)}


def data_ablation(spec: AblationSpec, evaluate: Callable[[str, float, int], tuple[float, float] | None],
                  workers: int = 1) -> list[AblationPoint]:
    """``evaluate(method, fraction, run)`` trains on the subset and returns
    ``(f1, dice)`` at the fixed thresholds in ``spec``, or ``None`` when the
    subset is degenerate (e.g. contains no positive tiles)."""
    jobs = {}
    for m in spec.methods:
        for i, f in enumerate(spec.fractions):
            for k in range(spec.runs):
                jobs[f"{m}/{i:03d}/{k}"] = (lambda m=m, f=f, k=k: evaluate(m, f, k))
    results = run_jobs(jobs, workers)
    points = []
    for m in spec.methods:
        for i, f in enumerate(spec.fractions):
            vals = [results[f"{m}/{i:03d}/{k}"] for k in range(spec.runs)]
            degenerate = any(v is None for v in vals)
            ok = [v for v in vals if v is not None]
            points.append(AblationPoint(
                m, f,
                summarize_runs([v[0] for v in ok]),
                summarize_runs([v[1] for v in ok]),
                degenerate,
            ))
    return points


# ------------------------------------------------------------------- search


@dataclass
class Trial:
    index: int
    params: dict
    score: float


@dataclass
class SearchResult:
    best_params: dict
    best_score: float
    trials: list[Trial]


def search_space(method: str) -> dict[str, list]:
    return {k: SEARCH_SPACE[k] for k in SEARCH_KEYS[method]}


def hyperparam_search(space: Mapping[str, Sequence], defaults: Mapping[str, object],
                      evaluate: Callable[[dict], float], budget: int) -> SearchResult:
    """Coordinate-wise sweep around ``defaults``.

    The defaults are trial 0. Each hyperparameter in ``space`` order is swept
    with the others held at the current best; a candidate replaces the best
    only when it scores strictly higher, so earlier trials win ties.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    current = dict(defaults)
    best_score = float(evaluate(dict(current)))
    trials = [Trial(0, dict(current), best_score)]
    for name, values in space.items():
        chosen = current[name]
        for v in values:
            if len(trials) >= budget:
                return SearchResult(current, best_score, trials)
            if v == chosen:
                continue
            candidate = {**current, name: v}
            score = float(evaluate(dict(candidate)))
            trials.append(Trial(len(trials), candidate, score))
            if score > best_score:
                best_score, current = score, candidate
        # keep sweeping later coordinates from the best setting found so far
    return SearchResult(current, best_score, trials)


# ------------------------------------------------------------------- timing


@dataclass
class TimingResult:
    train_seconds: float
    epochs: int
    test_seconds: float
    hardware: dict

    @property
    def seconds_per_epoch(self) -> float:
        return self.train_seconds / self.epochs if self.epochs else 0.0


def hardware_descriptor() -> dict:
    import torch
    return {
        "platform": platform.platform(),
        "processor": platform.processor() or platform.machine(),
        "cpu_count": os.cpu_count(),
        "torch": torch.__version__,
        "torch_threads": torch.get_num_threads(),
    }


def timing_harness(train: Callable[[], object], evaluate: Callable[[], object], epochs: int) -> TimingResult:
    """Wall-clock training and full-test evaluation time. Informational only."""
    start = time.perf_counter()
    train()
    train_s = time.perf_counter() - start
    start = time.perf_counter()
    evaluate()
    test_s = time.perf_counter() - start
    return TimingResult(train_s, epochs, test_s, hardware_descriptor())
