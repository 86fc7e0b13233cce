"""``supbench`` command line.

Exit status: 0 on success, 1 on a usage or validation error, 2 when a
pipeline step fails at run time.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .cam import CAM_METHODS
from .config import ConfigError, ExperimentConfig, parse_config, serialize_config
from .experiments import FUSION_RULES, METHODS
from .report import emit_report

logger = logging.getLogger("supbench")

RESULTS_ENV = "SUPBENCH_RESULTS_DIR"
COMMANDS = ("prepare-data", "synth", "train", "predict", "sweep", "cam-compare", "symmetry", "ablate", "search",
            "time", "fuse", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="INI-style experiment config")
    p.add_argument("--seed", type=int, help="base seed (default 0)")
    p.add_argument("--runs", type=int, help="independent training runs (default 3)")
    p.add_argument("--workers", type=int, help="parallel jobs for the ablation runner")
    p.add_argument("--save-masks", action="store_true", default=None, help="write localization masks as PBM")
    p.add_argument("--backbone", choices=("resnet50", "reduced"))
    p.add_argument("--data", choices=("real", "synth"), help="which prepared dataset to use")
    p.add_argument("--data-dir", type=Path, help="prepared dataset directory (default data/{real|synth})")
    p.add_argument("--results", type=Path, help=f"results root (default ${RESULTS_ENV} or ./results)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="supbench", description="Presence detection and localization benchmark")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("prepare-data", parents=[common], help="ingest, tile and split annotated scenes")
    p.add_argument("--images", type=Path, required=True, help="directory of scene images")
    p.add_argument("--annotations", type=Path, required=True, help="polygon annotation TSV")
    p.add_argument("--out", type=Path, help="output directory (default data/real)")
    p.add_argument("--tile-size", type=int, default=200)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", type=Path, help="output directory (default data/synth)")
    p.add_argument("--scenes", type=int)
    p.add_argument("--scene-size", type=int)
    p.add_argument("--density", type=float, help="mean panels per scene")

    for name, text in (("train", "train models"), ("predict", "predict the test split"),
                       ("sweep", "threshold sweep (predicts first when needed)"), ("search", "hyperparameter search"),
                       ("time", "wall-clock timing")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--method", choices=METHODS + ("all",), default="all")
        if name == "search":
            p.add_argument("--budget", type=int)

    p = sub.add_parser("cam-compare", parents=[common], help="compare CAM methods on the classifier")
    p.add_argument("--cams", nargs="+", choices=CAM_METHODS, default=list(CAM_METHODS))
    sub.add_parser("symmetry", parents=[common], help="pairwise wrong/right counts between methods")
    p = sub.add_parser("fuse", parents=[common], help="fused presence decisions")
    p.add_argument("--rule", choices=FUSION_RULES + ("all",), default="all")
    p = sub.add_parser("ablate", parents=[common], help="training-set size ablation")
    p.add_argument("--fractions", type=float, nargs="+")
    p.add_argument("--methods", nargs="+", choices=METHODS)
    p = sub.add_parser("report", parents=[common], help="render report.md from the results")
    p.add_argument("results_dir", nargs="?", type=Path)
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    g = cfg.general
    updates = {k: v for k, v in (("seed", args.seed), ("runs", args.runs), ("workers", args.workers),
                                 ("backbone", args.backbone), ("data", args.data), ("save_masks", args.save_masks))
               if v is not None}
    cfg.general = replace(g, **updates)
    if cfg.general.runs < 1 or cfg.general.workers < 1:
        raise ConfigError("--runs and --workers must be >= 1")
    return cfg


def results_root(args) -> Path:
    if getattr(args, "results_dir", None):
        return args.results_dir
    if args.results:
        return args.results
    return Path(os.environ.get(RESULTS_ENV) or "results")


def data_dir(args, cfg: ExperimentConfig) -> Path:
    return args.data_dir or Path("data") / cfg.general.data


def _write_data_manifest(results: Path, name: str, argv, cfg, out: Path, checksum: str, started: float) -> None:
    from .experiments import hardware_descriptor
    d = results / name
    d.mkdir(parents=True, exist_ok=True)
    payload = {"command_line": list(argv), "config": serialize_config(cfg), "seeds": {"base": cfg.general.seed},
               "artifact_hashes": {str(out): checksum}, "hardware": hardware_descriptor(),
               "started": started, "finished": time.time()}
    (d / "run_manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _synth(args, cfg, results, argv) -> None:
    from .dataset import build_splits, prepare_tiles
    from .pipeline import TileDataset
    from .runner import dataset_checksum
    from .synthetic import SyntheticSpec, generate_synthetic_dataset

    started = time.time()
    s = cfg.synth
    spec = SyntheticSpec(
        n_scenes=args.scenes if args.scenes is not None else s.n_scenes,
        scene_size=args.scene_size or s.scene_size,
        panel_density=args.density if args.density is not None else s.panel_density,
        distractor_density=s.distractor_density,
        rng_seed=cfg.general.seed,
    )
    spec.validate()
    scenes, _ = generate_synthetic_dataset(spec)
    tiles = prepare_tiles(scenes)
    out = args.out or Path("data") / "synth"
    TileDataset.from_tiles(tiles, build_splits(tiles, cfg.general.seed)).save(out)
    checksum = dataset_checksum(out)
    _write_data_manifest(results, "synth", argv, cfg, out, checksum, started)
    print(f"wrote {len(tiles)} tiles to {out} (sha256 {checksum})")


def _prepare(args, cfg, results, argv) -> None:
    from .dataset import build_splits, ingest_scenes, prepare_tiles
    from .pipeline import TileDataset
    from .runner import dataset_checksum

    started = time.time()
    scenes = ingest_scenes(args.images, args.annotations)
    tiles = prepare_tiles(scenes, args.tile_size)
    if not tiles:
        raise ValueError("no tiles produced: every scene lacked polygons")
    out = args.out or Path("data") / "real"
    TileDataset.from_tiles(tiles, build_splits(tiles, cfg.general.seed)).save(out)
    checksum = dataset_checksum(out)
    _write_data_manifest(results, "prepare-data", argv, cfg, out, checksum, started)
    print(f"wrote {len(tiles)} tiles from {len(scenes)} scenes to {out} (sha256 {checksum})")


def _methods(choice: str) -> tuple[str, ...]:
    return METHODS if choice == "all" else (choice,)


def execute(args, cfg: ExperimentConfig, results: Path, argv) -> None:
    cmd = args.command
    if cmd == "report":
        print(emit_report(results))
        return
    if cmd == "synth":
        return _synth(args, cfg, results, argv)
    if cmd == "prepare-data":
        return _prepare(args, cfg, results, argv)

    from .runner import Runner
    runner = Runner(results, data_dir(args, cfg), cfg, argv)
    if cmd == "train":
        for m in _methods(args.method):
            runner.train(m)
    elif cmd == "predict":
        for m in _methods(args.method):
            runner.predict(m)
    elif cmd == "sweep":
        for m in _methods(args.method):
            runner.sweep(m)
            print(results / "main" / m / "metrics.tsv")
    elif cmd == "cam-compare":
        print(runner.cam_compare(args.cams))
    elif cmd == "symmetry":
        print(runner.symmetry())
    elif cmd == "fuse":
        print(runner.fuse(FUSION_RULES if args.rule == "all" else (args.rule,)))
    elif cmd == "ablate":
        print(runner.ablate(args.fractions, args.methods))
    elif cmd == "search":
        for m in _methods(args.method):
            print(runner.search(m, args.budget))
    elif cmd == "time":
        print(runner.time(_methods(args.method)))


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "supbench: error: a subcommand is required")
        cfg = load_config(args)
        results = results_root(args)
        if args.command not in ("synth", "prepare-data", "report"):
            d = data_dir(args, cfg)
            if not (d / "manifest.tsv").exists():
                raise ConfigError(f"no prepared dataset at {d}; run `supbench synth` or `supbench prepare-data` first")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ConfigError, OSError) as exc:
        print(f"supbench: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        execute(args, cfg, results, ["supbench", *argv])
    except Exception as exc:  # noqa: BLE001  runtime failures map to exit 2
        logger.debug("command failed", exc_info=True)
        print(f"supbench: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
