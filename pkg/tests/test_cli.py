import json

import pytest

from supbench.cli import main
from supbench.tables import as_float, read_table

FAST = """\
[general]
runs = 2
[detector]
epochs = 1
[classifier]
epochs = 1
[vae]
epochs = 1
latent_dims = 32
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "fast.ini").write_text(FAST)
    assert main(["synth", "--scenes", "4", "--seed", "5", "--out", str(d / "data"), "--results", str(d / "results")]) == 0
    return d


def run(workdir, *args):
    return main([*args, "--config", str(workdir / "fast.ini"), "--data-dir", str(workdir / "data"),
                 "--results", str(workdir / "results")])


def test_usage_errors_exit_1(tmp_path, capsys):
    assert main([]) == 1
    assert main(["bogus"]) == 1
    assert main(["train", "--method", "svm"]) == 1
    assert "invalid choice" in capsys.readouterr().err


def test_missing_dataset_exits_1(tmp_path, capsys):
    assert main(["train", "--data-dir", str(tmp_path / "nowhere"), "--results", str(tmp_path)]) == 1
    assert "supbench synth" in capsys.readouterr().err


def test_bad_config_exits_1(tmp_path, capsys):
    (tmp_path / "bad.ini").write_text("[classifier]\nepochs = ten\n")
    assert main(["report", "--config", str(tmp_path / "bad.ini"), str(tmp_path)]) == 1
    assert "[classifier] epochs: expected int, got 'ten'" in capsys.readouterr().err


def test_runtime_failure_exits_2(tmp_path, capsys):
    (tmp_path / "images").mkdir()
    (tmp_path / "ann.tsv").write_text("ghost\tp1\t1,1 5,1 5,5\n")
    code = main(["prepare-data", "--images", str(tmp_path / "images"), "--annotations", str(tmp_path / "ann.tsv"),
                 "--out", str(tmp_path / "out"), "--results", str(tmp_path / "results")])
    assert code == 2
    assert "ghost" in capsys.readouterr().err


def test_synth_is_deterministic(tmp_path, capsys):
    sums = []
    for name in ("a", "b"):
        assert main(["synth", "--scenes", "2", "--seed", "9", "--out", str(tmp_path / name),
                     "--results", str(tmp_path / f"r{name}")]) == 0
        sums.append(capsys.readouterr().out.split("sha256 ")[1])
        manifest = json.loads((tmp_path / f"r{name}" / "synth" / "run_manifest.json").read_text())
        assert manifest["seeds"] == {"base": 9}
    assert sums[0] == sums[1]


@pytest.mark.slow
def test_every_subcommand_runs(workdir, capsys):
    res = workdir / "results"
    assert run(workdir, "train", "--save-masks") == 0
    for m in ("detector", "classifier", "vae"):
        for k in (0, 1):
            assert (res / "main" / m / f"run{k}" / "model.pt").exists()
            assert (res / "main" / m / f"run{k}" / "train_log.tsv").exists()
    assert run(workdir, "sweep", "--save-masks") == 0
    sweep = read_table(res / "main" / "classifier" / "metrics.tsv")
    assert sweep.meta["runs"] == "2"
    assert sum(v == "1" for v in sweep.column("best_f1")) == 1
    assert (res / "main" / "classifier" / "run0" / "heatmaps" / "gradcam").is_dir()

    assert run(workdir, "cam-compare", "--cams", "gradcam", "eigencam") == 0
    assert read_table(res / "cam" / "metrics.tsv").column("cam_method") == ["gradcam", "eigencam"]
    assert (res / "cam" / "eigencam" / "run1" / "predictions.tsv").exists()

    assert run(workdir, "symmetry") == 0
    sym = read_table(res / "symmetry" / "metrics.tsv")
    assert len(sym.rows) == 2 * 3
    assert run(workdir, "fuse", "--rule", "majority") == 0
    assert "fused_majority" in read_table(res / "fusion" / "metrics.tsv").column("predictor")

    assert run(workdir, "ablate", "--fractions", "0.5", "1.0", "--methods", "classifier") == 0
    abl = read_table(res / "ablation" / "metrics.tsv")
    assert [as_float(v) for v in abl.column("fraction")] == [0.5, 1.0]

    assert run(workdir, "search", "--method", "vae", "--budget", "2") == 0
    assert len(read_table(res / "search" / "vae" / "metrics.tsv").rows) == 2
    assert run(workdir, "time", "--method", "classifier") == 0
    assert run(workdir, "predict", "--method", "vae") == 0

    capsys.readouterr()
    assert main(["report", str(res)]) == 0
    report = (res / "report.md").read_text()
    for name in ("main/detector/metrics.tsv", "cam/metrics.tsv", "symmetry/metrics.tsv", "fusion/metrics.tsv",
                 "ablation/metrics.tsv", "search/vae/metrics.tsv", "timing/metrics.tsv"):
        assert f"Source: `{name}`" in report
    for exp in ("main", "cam", "symmetry", "fusion", "ablation", "search", "timing"):
        manifest = json.loads((res / exp / "run_manifest.json").read_text())
        assert {"command_line", "config", "seeds", "artifact_hashes", "hardware"} <= set(manifest)
