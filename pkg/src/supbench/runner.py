"""On-disk experiment runner behind the command line.

Layout under the results root::

    main/{method}/run{k}/      model.pt, train_log.tsv, predictions.tsv, heatmaps/, metrics.tsv
    main/{method}/metrics.tsv  threshold sweep aggregated over runs
    cam/{cam}/run{k}/          CAM-specific classifier predictions
    cam/metrics.tsv, symmetry/metrics.tsv, fusion/metrics.tsv, ablation/metrics.tsv,
    search/{method}/metrics.tsv, timing/metrics.tsv
"""
from __future__ import annotations

import hashlib
import json
import logging
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .cam import CAM_METHODS
from .config import ExperimentConfig, serialize_config
from .experiments import (
    ABLATION_THRESHOLDS, DEFAULT_THRESHOLDS, FUSION_RULES, METHODS, METRIC_COLUMNS, SYMMETRY_THRESHOLDS,
    AblationSpec, MetricsRow, SweepSpec, best_row, data_ablation, evaluate_run, fuse_presence,
    hardware_descriptor, hyperparam_search, search_space, symmetry_matrix, threshold_sweep, timing_harness,
)
from .metrics import presence_f1
from .models import ESTIMATORS
from .pipeline import (
    DegenerateSubset, TileDataset, predict_method, read_predictions, run_dir, run_seed, train_and_save,
    train_method, write_pbm, write_predictions,
)
from .tables import read_table, write_table

logger = logging.getLogger(__name__)

MAIN = "main"


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dataset_checksum(directory: str | Path) -> str:
    """Digest over every file of a prepared dataset, by relative path."""
    directory = Path(directory)
    h = hashlib.sha256()
    for p in sorted(q for q in directory.rglob("*") if q.is_file()):
        h.update(p.relative_to(directory).as_posix().encode() + b"\0")
        h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def sweep_table(rows: Sequence[MetricsRow]):
    columns = ["threshold"] + [f"{c}_{s}" for c in METRIC_COLUMNS for s in ("mean", "std")]
    columns += ["n_evaluated", "best_f1", "best_dice"]
    body = []
    for r in rows:
        cells = [r.threshold]
        for c in METRIC_COLUMNS:
            cells += [r.values[c].mean, r.values[c].std]
        body.append(cells + [r.n_evaluated, r.best_f1, r.best_dice])
    aggregate = {}
    bf = best_row(rows, "f1")
    bd = best_row(rows, "dice")
    if bf is not None:
        aggregate["best_f1_threshold"] = bf.threshold
        aggregate["best_f1"] = bf.values["f1"].mean
    if bd is not None:
        aggregate["best_dice_threshold"] = bd.threshold
        aggregate["best_dice_poly"] = bd.values["dice_poly"].mean
    return columns, body, aggregate


class Runner:
    def __init__(self, results: str | Path, data_dir: str | Path, cfg: ExperimentConfig,
                 argv: Sequence[str] | None = None):
        self.results = Path(results)
        self.data_dir = Path(data_dir)
        self.cfg = cfg
        self.argv = list(sys.argv if argv is None else argv)
        self._data: TileDataset | None = None
        self._truth = None

    # ---------------------------------------------------------------- basics

    @property
    def data(self) -> TileDataset:
        if self._data is None:
            self._data = TileDataset.load(self.data_dir)
        return self._data

    @property
    def truth(self):
        if self._truth is None:
            d = self.data
            self._truth = d.truth(list(d.splits.test) + list(d.splits.validation))
        return self._truth

    @property
    def runs(self) -> range:
        return range(self.cfg.general.runs)

    def seeds(self) -> dict[int, int]:
        return {k: run_seed(self.cfg.general.seed, k) for k in self.runs}

    def config_for(self, method: str, run: int):
        return self.cfg.train_config(method, run_seed(self.cfg.general.seed, run))

    def write_manifest(self, experiment: str, outputs: Sequence[Path], started: float) -> None:
        directory = self.results / experiment
        directory.mkdir(parents=True, exist_ok=True)
        payload = {
            "command_line": self.argv,
            "config": serialize_config(self.cfg),
            "seeds": {"base": self.cfg.general.seed, "runs": self.seeds()},
            "data_dir": str(self.data_dir),
            "artifact_hashes": {str(Path(p).relative_to(self.results)): sha256_file(p) for p in outputs if Path(p).exists()},
            "hardware": hardware_descriptor(),
            "started": started,
            "finished": time.time(),
        }
        (directory / "run_manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    # ------------------------------------------------------------ main runs

    def _fingerprint(self, method: str, run: int) -> str:
        return json.dumps({
            "config": self.config_for(method, run).to_dict(),
            "backbone": self.cfg.general.backbone,
            "splits": (self.data_dir / "splits.tsv").read_text(encoding="utf-8"),
        }, sort_keys=True)

    def model(self, method: str, run: int, retrain: bool = False):
        d = run_dir(self.results, MAIN, method, run)
        fp_path = d / "fingerprint.json"
        fp = self._fingerprint(method, run)
        if not retrain and (d / "model.pt").exists() and fp_path.exists() and fp_path.read_text() == fp:
            return ESTIMATORS[method].load(d / "model.pt")
        if d.exists():
            shutil.rmtree(d)
        logger.info("training %s run %d", method, run)
        est = train_and_save(method, self.data, self.config_for(method, run), self.cfg.general.backbone, d)
        fp_path.write_text(fp)
        return est

    def train(self, method: str) -> list[Path]:
        started = time.time()
        outs = []
        for k in self.runs:
            self.model(method, k, retrain=True)
            d = run_dir(self.results, MAIN, method, k)
            outs += [d / "model.pt", d / "train_log.tsv"]
        self.write_manifest(MAIN, outs, started)
        return outs

    def predictions(self, method: str, run: int, cam: str | None = None, refresh: bool = False):
        cam = cam or self.cfg.general.cam_method
        if method == "classifier" and cam != self.cfg.general.cam_method:
            d = run_dir(self.results, "cam", cam, run)
        else:
            d = run_dir(self.results, MAIN, method, run)
        path = d / "predictions.tsv"
        fp = self._fingerprint(method, run) + cam
        fp_path = d / "predictions.fingerprint"
        if not refresh and path.exists() and fp_path.exists() and fp_path.read_text() == fp:
            return read_predictions(path)
        est = self.model(method, run)
        records = predict_method(est, method, self.data, run_id=run, cam_method=cam)
        if (d / "heatmaps").exists():
            shutil.rmtree(d / "heatmaps")
        write_predictions(d, records, cam)
        fp_path.write_text(fp)
        return records

    def predict(self, method: str) -> list[Path]:
        started = time.time()
        for k in self.runs:
            self.predictions(method, k, refresh=True)
        outs = [run_dir(self.results, MAIN, method, k) / "predictions.tsv" for k in self.runs]
        self.write_manifest(MAIN, outs, started)
        return outs

    def sweep(self, method: str, thresholds: Sequence[float] | None = None) -> list[MetricsRow]:
        started = time.time()
        preds = {k: self.predictions(method, k) for k in self.runs}
        spec = SweepSpec(method, tuple(thresholds or DEFAULT_THRESHOLDS[method]), runs=len(self.runs))
        rows = threshold_sweep(spec, preds, self.truth)
        meta = {"title": f"Threshold sweep: {method}", "method": method, "runs": len(self.runs),
                "std": "sample (n-1); shown only when >= 0.03"}
        if method != "detector":
            meta["cam_method"] = self.cfg.general.cam_method
        outs = [self._write_sweep(self.results / MAIN / method / "metrics.tsv", rows, meta)]
        for k in self.runs:
            run_rows = threshold_sweep(replace(spec, runs=1), {k: preds[k]}, self.truth)
            outs.append(self._write_sweep(run_dir(self.results, MAIN, method, k) / "metrics.tsv", run_rows,
                                          {**meta, "runs": 1, "run": k}))
            if self.cfg.general.save_masks:
                self._save_masks(method, k, preds[k], best_row(rows, "dice"))
        self.write_manifest(MAIN, outs, started)
        return rows

    def _write_sweep(self, path: Path, rows, meta) -> Path:
        columns, body, aggregate = sweep_table(rows)
        return write_table(path, columns, body, meta, aggregate)

    def _save_masks(self, method: str, run: int, records, row: MetricsRow | None) -> None:
        if row is None:
            return
        d = run_dir(self.results, MAIN, method, run) / "masks"
        d.mkdir(parents=True, exist_ok=True)
        for r in records:
            if r.presence_score >= row.threshold and self.truth[r.tile_id].label:
                write_pbm(d / f"{r.tile_id}.pbm", r.mask(row.threshold, self.data.tile_size))

    def best_thresholds(self, key: str = "f1") -> dict[str, float]:
        """Per-method best threshold from saved sweeps, running sweeps when missing."""
        out = {}
        for m in METHODS:
            path = self.results / MAIN / m / "metrics.tsv"
            if not path.exists():
                self.sweep(m)
            agg = read_table(path).aggregate
            name = "best_f1_threshold" if key == "f1" else "best_dice_threshold"
            out[m] = float(agg.get(name, SYMMETRY_THRESHOLDS[m]))
        return out

    # ------------------------------------------------------------ experiments

    def cam_compare(self, cams: Sequence[str] = CAM_METHODS) -> Path:
        started = time.time()
        thresholds = DEFAULT_THRESHOLDS["classifier"]
        rows_out = []
        for cam in cams:
            preds = {k: self.predictions("classifier", k, cam) for k in self.runs}
            rows = threshold_sweep(SweepSpec("classifier", thresholds, runs=len(self.runs)), preds, self.truth)
            self._write_sweep(self.results / "cam" / cam / "metrics.tsv", rows,
                              {"title": f"Threshold sweep: classifier + {cam}", "method": "classifier", "cam_method": cam})
            b = best_row(rows, "dice")
            cells = [cam, b.threshold if b else None]
            for c in ("dice_poly", "iou_poly", "dice_box", "iou_box", "no_overlap"):
                cells += [b.values[c].mean, b.values[c].std] if b else [None, None]
            rows_out.append(cells)
        columns = ["cam_method", "threshold"] + [f"{c}_{s}" for c in ("dice_poly", "iou_poly", "dice_box", "iou_box", "no_overlap") for s in ("mean", "std")]
        path = write_table(self.results / "cam" / "metrics.tsv", columns, rows_out,
                           {"title": "CAM method comparison at each method's best-DICE threshold", "runs": len(self.runs)})
        self.write_manifest("cam", [path], started)
        return path

    def _binary_predictions(self, thresholds: dict[str, float], run: int) -> dict[str, dict[str, bool]]:
        out = {}
        for m in METHODS:
            out[m] = {r.tile_id: r.presence_score >= thresholds[m] for r in self.predictions(m, run)}
        return out

    def symmetry(self) -> Path:
        started = time.time()
        thresholds = self.best_thresholds("f1")
        labels = {t: tr.label for t, tr in self.truth.items()}
        rows = []
        for k in self.runs:
            mat = symmetry_matrix(self._binary_predictions(thresholds, k), labels)
            for a in mat.methods:
                rows.append([k, a, *[mat.counts[a][b] for b in mat.methods], mat.right_totals[a], mat.wrong_totals[a]])
        columns = ["run", "wrong_method", *[f"right_{m}" for m in METHODS], "right_total", "wrong_total"]
        meta = {"title": "Symmetry: tiles the row method gets wrong and the column method gets right",
                **{f"threshold_{m}": t for m, t in thresholds.items()}}
        path = write_table(self.results / "symmetry" / "metrics.tsv", columns, rows, meta)
        self.write_manifest("symmetry", [path], started)
        return path

    def fuse(self, rules: Sequence[str] = FUSION_RULES) -> Path:
        started = time.time()
        thresholds = self.best_thresholds("f1")
        rows = []
        for k in self.runs:
            preds = {m: self.predictions(m, k) for m in METHODS}
            ids = [r.tile_id for r in preds["detector"]]
            labels = [self.truth[t].label for t in ids]
            scores = {m: [r.presence_score for r in preds[m]] for m in METHODS}
            for m in METHODS:
                rows.append([k, m, *presence_f1(scores[m], labels, thresholds[m])])
            for rule in rules:
                fused = fuse_presence(scores, rule, thresholds)
                rows.append([k, f"fused_{rule}", *presence_f1(fused.astype(float), labels, 0.5)])
        meta = {"title": "Presence fusion", **{f"threshold_{m}": t for m, t in thresholds.items()}}
        path = write_table(self.results / "fusion" / "metrics.tsv", ["run", "predictor", "f1", "precision", "recall"],
                           rows, meta)
        self.write_manifest("fusion", [path], started)
        return path

    def _ablation_point(self, method: str, fraction: float, run: int):
        cfg = replace(self.config_for(method, run), data_fraction=fraction)
        try:
            est = train_method(method, self.data, cfg, self.cfg.general.backbone)
        except DegenerateSubset as exc:
            logger.info("degenerate ablation point: %s", exc)
            return None
        records = predict_method(est, method, self.data, run_id=run, cam_method=self.cfg.general.cam_method)
        th = ABLATION_THRESHOLDS[method]
        m = evaluate_run(records, self.truth, th["detect"], th["localize"])
        return m.f1, m.dice_poly

    def ablate(self, fractions: Sequence[float] | None = None, methods: Sequence[str] | None = None) -> Path:
        started = time.time()
        spec = AblationSpec(tuple(fractions or self.cfg.ablation.fractions), methods=tuple(methods or self.cfg.ablation.methods),
                            runs=len(self.runs))
        points = data_ablation(spec, self._ablation_point, workers=self.cfg.general.workers)
        rows = [[p.method, p.fraction, p.f1.mean, p.f1.std, p.dice.mean, p.dice.std, p.degenerate] for p in points]
        meta = {"title": "Training-set size ablation", "runs": spec.runs,
                **{f"threshold_{m}": f"{t['detect']}/{t['localize']}" for m, t in spec.thresholds.items()}}
        path = write_table(self.results / "ablation" / "metrics.tsv",
                           ["method", "fraction", "f1_mean", "f1_std", "dice_mean", "dice_std", "degenerate"], rows, meta)
        self.write_manifest("ablation", [path], started)
        return path

    def search(self, method: str, budget: int | None = None) -> Path:
        started = time.time()
        budget = self.cfg.search.budget if budget is None else budget
        base = self.config_for(method, 0)
        space = search_space(method)
        val_ids = list(self.data.splits.validation)
        labels = self.data.labels(val_ids)

        def evaluate(params: dict) -> float:
            est = train_method(method, self.data, replace(base, **params), self.cfg.general.backbone)
            if method == "detector":
                scores = [max((d.score for d in dets), default=0.0) for dets in est.predict_detections(self.data.images(val_ids))]
            else:
                scores = est.presence_scores(self.data.images(val_ids))
            return max(presence_f1(scores, labels, t)[0] for t in DEFAULT_THRESHOLDS[method])

        defaults = {k: getattr(base, k) for k in space}
        result = hyperparam_search(space, defaults, evaluate, budget)
        keys = list(space)
        rows = [[t.index, *[t.params[k] for k in keys], t.score] for t in result.trials]
        path = write_table(self.results / "search" / method / "metrics.tsv", ["trial", *keys, "validation_f1"], rows,
                           {"title": f"Hyperparameter search: {method}", "budget": budget},
                           {**{f"best_{k}": v for k, v in result.best_params.items()}, "best_validation_f1": result.best_score})
        self.write_manifest("search", [path], started)
        return path

    def time(self, methods: Sequence[str] = METHODS) -> Path:
        started = time.time()
        rows = []
        hw = hardware_descriptor()
        for m in methods:
            cfg = self.config_for(m, 0)
            holder = {}

            def fit(m=m, cfg=cfg):
                holder["est"] = train_method(m, self.data, cfg, self.cfg.general.backbone)

            def evaluate(m=m):
                predict_method(holder["est"], m, self.data, run_id=0, cam_method=self.cfg.general.cam_method)

            res = timing_harness(fit, evaluate, cfg.epochs)
            rows.append([m, res.epochs, res.train_seconds, res.seconds_per_epoch, res.test_seconds,
                         len(self.data.splits.test)])
        path = write_table(self.results / "timing" / "metrics.tsv",
                           ["method", "epochs", "train_seconds", "seconds_per_epoch", "test_seconds", "test_tiles"], rows,
                           {"title": "Wall-clock timing (informational)", **{f"hw_{k}": v for k, v in hw.items()}})
        self.write_manifest("timing", [path], started)
        return path

