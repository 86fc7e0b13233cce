import itertools
import math
import time

import numpy as np
import pytest

from supbench.experiments import (
    ABLATION_FRACTIONS, CLASSIFIER_THRESHOLDS, DETECTOR_THRESHOLDS, AblationSpec, PredictionRecord, SweepSpec,
    TileTruth, TimingResult, best_row, cam_comparison, data_ablation, evaluate_run, fuse_presence,
    hyperparam_search, run_jobs, search_space, symmetry_matrix, threshold_sweep, timing_harness,
)
from supbench.models.detector import Detection


def square_mask(r0, r1, c0, c1, size=4):
    m = np.zeros((size, size), bool)
    m[r0:r1, c0:c1] = True
    return m


def toy_truth():
    return {
        "a": TileTruth(True, square_mask(0, 2, 0, 2), square_mask(0, 2, 0, 2)),
        "b": TileTruth(True, square_mask(2, 4, 2, 4), square_mask(2, 4, 2, 4)),
        "c": TileTruth(False),
        "d": TileTruth(False),
    }


def toy_records(run=0, shift=0.0):
    hot_a = np.zeros((4, 4))
    hot_a[0:2, 0:2] = 1.0
    hot_b = np.zeros((4, 4))
    hot_b[0, 0] = 1.0  # misses tile b entirely
    return [
        PredictionRecord("a", "classifier", run, 0.9 - shift, heatmap=hot_a),
        PredictionRecord("b", "classifier", run, 0.6 - shift, heatmap=hot_b),
        PredictionRecord("c", "classifier", run, 0.7 - shift, heatmap=np.zeros((4, 4))),
        PredictionRecord("d", "classifier", run, 0.1, heatmap=np.zeros((4, 4))),
    ]


# ------------------------------------------------------------------ records


def test_record_rejects_scores_outside_unit_interval():
    with pytest.raises(ValueError, match="outside"):
        PredictionRecord("x", "vae", 0, 1.2)


def test_record_without_localization_cannot_build_a_mask():
    with pytest.raises(ValueError):
        PredictionRecord("x", "vae", 0, 0.5).mask(0.5, 4)


def test_detection_record_mask_uses_boxes():
    r = PredictionRecord("x", "detector", 0, 0.8, detections=[Detection((0, 0, 2, 2), 0.8)])
    assert np.array_equal(r.mask(0.5, 4), square_mask(0, 2, 0, 2))
    assert not r.mask(0.9, 4).any()


# -------------------------------------------------------------- evaluation


def test_evaluate_run_hand_example():
    m = evaluate_run(toy_records(), toy_truth(), 0.5)
    # predicted a, b, c; TP a, b; FP c; FN none
    assert (m.precision, m.recall) == (2 / 3, 1.0)
    assert m.f1 == pytest.approx(0.8)
    assert m.n_evaluated == 2
    assert m.dice_poly == pytest.approx(0.5)  # a perfect, b disjoint
    assert m.no_overlap == 0.5


def test_localization_threshold_can_differ_from_detection_threshold():
    m = evaluate_run(toy_records(), toy_truth(), 0.5, t_localize=1.0)
    assert m.n_evaluated == 2
    assert m.dice_poly == pytest.approx(0.5)


def test_empty_tp_set_marks_localization_absent():
    m = evaluate_run(toy_records(), toy_truth(), 0.95)
    assert m.f1 == 0.0 and m.n_evaluated == 0
    assert math.isnan(m.dice_poly) and math.isnan(m.no_overlap)


def test_sweep_aggregates_three_runs_and_flags_best():
    preds = {k: toy_records(k, shift=0.01 * k) for k in range(3)}
    rows = threshold_sweep(SweepSpec("classifier", runs=3), preds, toy_truth())
    assert [r.threshold for r in rows] == list(CLASSIFIER_THRESHOLDS)
    assert rows[-1].f1.mean == 0.0
    assert rows[-1].dice_poly.absent
    assert sum(r.best_f1 for r in rows) == 1 and sum(r.best_dice for r in rows) == 1
    best = best_row(rows, "f1")
    assert best.f1.mean == max(r.f1.mean for r in rows)
    # ties go to the lowest threshold
    assert best.threshold == min(r.threshold for r in rows if r.f1.mean == best.f1.mean)


def test_all_zero_scores_give_a_degenerate_sweep():
    truth = toy_truth()
    preds = {k: [PredictionRecord(t, "vae", k, 0.0, heatmap=np.zeros((4, 4))) for t in truth] for k in range(3)}
    rows = threshold_sweep(SweepSpec("vae", runs=3), preds, truth)
    assert rows[0].threshold == 0.0 and rows[0].f1.mean == pytest.approx(2 / 3)
    for r in rows[1:]:
        assert r.f1.mean == 0.0 and r.dice_poly.absent and r.n_evaluated == 0


def test_missing_run_is_an_error():
    with pytest.raises(ValueError, match="3 runs"):
        threshold_sweep(SweepSpec("classifier", runs=3), {0: toy_records(0), 1: toy_records(1)}, toy_truth())


def test_runs_over_different_tiles_are_an_error():
    preds = {0: toy_records(0), 1: toy_records(1)[:3]}
    with pytest.raises(ValueError, match="different tiles"):
        threshold_sweep(SweepSpec("classifier", runs=2), preds, toy_truth())


def test_sweep_spec_validation():
    assert SweepSpec("detector").thresholds == DETECTOR_THRESHOLDS
    with pytest.raises(ValueError):
        SweepSpec("detector", thresholds=(0.5, 0.1))
    with pytest.raises(ValueError):
        SweepSpec("detector", thresholds=(0.5, 1.5))


def test_cam_comparison_picks_the_best_dice_row_per_method():
    preds = {"gradcam": {0: toy_records()}, "eigencam": {0: toy_records()}}
    out = cam_comparison(preds, toy_truth(), runs=1)
    assert [c for c, _ in out] == ["gradcam", "eigencam"]
    assert all(row.best_dice for _, row in out)


# ---------------------------------------------------------------- symmetry


def test_symmetry_hand_example():
    labels = {"t0": True, "t1": True, "t2": False}
    preds = {"A": {"t0": True, "t1": False, "t2": True}, "B": {"t0": True, "t1": True, "t2": True}}
    s = symmetry_matrix(preds, labels)
    assert s.counts["A"]["B"] == 1
    assert s.counts["B"]["A"] == 0
    assert s.right_totals == {"A": 1, "B": 2}
    assert s.wrong_totals == {"A": 2, "B": 1}
    assert s.pair_total("A", "B") == 3


def test_symmetry_pairwise_identity_on_random_predictions():
    rng = np.random.default_rng(0)
    tiles = [f"t{i}" for i in range(50)]
    labels = dict(zip(tiles, rng.random(50) < 0.3))
    preds = {m: dict(zip(tiles, rng.random(50) < 0.4)) for m in ("detector", "classifier", "vae")}
    s = symmetry_matrix(preds, labels)
    for a, b in itertools.permutations(s.methods, 2):
        assert s.pair_total(a, b) == 50
        assert s.counts[a][b] - s.counts[b][a] == s.right_totals[b] - s.right_totals[a]


def test_symmetry_requires_identical_tile_sets():
    with pytest.raises(ValueError, match="different tile set"):
        symmetry_matrix({"A": {"t0": True}, "B": {"t1": True}}, {"t0": True, "t1": False})


# ------------------------------------------------------------------ fusion


def test_fusion_enumerates_all_vote_patterns():
    patterns = list(itertools.product([0.0, 1.0], repeat=3))
    scores = {m: [p[i] for p in patterns] for i, m in enumerate("xyz")}
    th = {m: 0.5 for m in "xyz"}
    votes = [sum(p) for p in patterns]
    assert fuse_presence(scores, "or", th).tolist() == [v >= 1 for v in votes]
    assert fuse_presence(scores, "and", th).tolist() == [v == 3 for v in votes]
    assert fuse_presence(scores, "majority", th).tolist() == [v >= 2 for v in votes]


def test_single_method_fusion_is_the_identity():
    s = [0.1, 0.6, 0.5, 0.9]
    for rule in ("or", "and", "majority"):
        assert fuse_presence({"m": s}, rule, {"m": 0.5}).tolist() == [False, True, True, True]


def test_fusion_uses_per_method_thresholds():
    out = fuse_presence({"a": [0.3], "b": [0.3]}, "and", {"a": 0.2, "b": 0.4})
    assert out.tolist() == [False]


def test_fusion_rejects_unknown_rule_and_empty_input():
    with pytest.raises(ValueError):
        fuse_presence({"a": [0.1]}, "xor", {"a": 0.5})
    with pytest.raises(ValueError):
        fuse_presence({}, "or", {})


# ---------------------------------------------------------------- ablation


def test_ablation_flags_degenerate_points():
    def evaluate(method, fraction, run):
        if fraction < 0.1:
            return None
        return fraction, fraction / 2 + 0.01 * run

    spec = AblationSpec(fractions=(0.05, 0.5, 1.0), methods=("classifier",), runs=3)
    points = data_ablation(spec, evaluate)
    assert [p.degenerate for p in points] == [True, False, False]
    assert points[0].f1.absent
    assert points[2].f1.mean == 1.0
    assert points[2].dice.mean == pytest.approx(0.51)


def test_parallel_ablation_matches_serial():
    def evaluate(method, fraction, run):
        time.sleep(0.001)
        return fraction * (run + 1), fraction

    spec = AblationSpec(fractions=(0.1, 0.5), methods=("vae", "detector"), runs=2)
    assert data_ablation(spec, evaluate, workers=1) == data_ablation(spec, evaluate, workers=3)


def test_ablation_spec_validation():
    assert AblationSpec().fractions == ABLATION_FRACTIONS
    with pytest.raises(ValueError):
        AblationSpec(fractions=(0.5, 0.1))
    with pytest.raises(ValueError):
        AblationSpec(fractions=(0.0, 1.0))


def test_run_jobs_orders_by_job_id():
    assert list(run_jobs({"b": lambda: 2, "a": lambda: 1}, workers=2)) == ["a", "b"]


# ------------------------------------------------------------------ search


def test_search_budget_one_evaluates_only_the_defaults():
    calls = []
    res = hyperparam_search({"x": [1, 2, 3]}, {"x": 1}, lambda p: calls.append(p) or 0.0, budget=1)
    assert calls == [{"x": 1}]
    assert res.best_params == {"x": 1} and len(res.trials) == 1


def test_search_keeps_the_earliest_of_tied_trials():
    res = hyperparam_search({"x": [1, 2, 3]}, {"x": 1}, lambda p: 0.5, budget=10)
    assert res.best_params == {"x": 1}
    assert [t.params["x"] for t in res.trials] == [1, 2, 3]


def test_search_is_coordinate_wise_and_respects_budget():
    def score(p):
        return -(p["a"] - 3) ** 2 - (p["b"] - 20) ** 2

    space = {"a": [1, 2, 3, 4], "b": [10, 20, 30]}
    res = hyperparam_search(space, {"a": 1, "b": 10}, score, budget=100)
    assert res.best_params == {"a": 3, "b": 20}
    assert len(res.trials) == 1 + 3 + 2
    capped = hyperparam_search(space, {"a": 1, "b": 10}, score, budget=4)
    assert len(capped.trials) == 4


def test_search_rejects_non_positive_budget():
    with pytest.raises(ValueError):
        hyperparam_search({"x": [1]}, {"x": 1}, lambda p: 0.0, budget=0)


def test_search_spaces_per_method():
    assert "latent_dims" in search_space("vae") and "positive_class_weight" not in search_space("vae")
    assert "positive_class_weight" in search_space("detector")
    assert search_space("classifier")["epochs"] == [1, 3, 5, 8, 10, 20]


# ------------------------------------------------------------------ timing


def test_seconds_per_epoch():
    assert TimingResult(30.0, 10, 2.0, {}).seconds_per_epoch == 3.0
    assert TimingResult(5.0, 0, 1.0, {}).seconds_per_epoch == 0.0


def test_timing_harness_measures_both_phases():
    res = timing_harness(lambda: time.sleep(0.02), lambda: time.sleep(0.01), epochs=2)
    assert res.train_seconds >= 0.02 and res.test_seconds >= 0.01
    assert res.seconds_per_epoch == res.train_seconds / 2
    assert "cpu_count" in res.hardware
