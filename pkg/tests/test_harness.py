"""AUC/threshold/metrics oracles and the ablation sweep machinery."""

import numpy as np
import pytest

from anovis.data import ImageSample, ladder_counts, split_dataset
from anovis.errors import DataValidationError
from anovis.fcdd import TrainConfig
from anovis.harness import (
    PHASE_OPPORTUNITY,
    PHASE_OVER_MINING,
    AblationReport,
    MetricsRecord,
    RatioPoint,
    RunRecord,
    calibrate_threshold,
    classify_phases,
    compute_auc,
    compute_metrics,
    find_effective_ratio,
    load_report,
    report_to_csv,
    report_to_dict,
    run_ablation,
    save_report,
    hash_sample_ids,
)

# ---------------------------------------------------------------------------
# AUC


def oracle_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def test_auc_perfect_separation():
    assert compute_auc([1, 2, 3, 4], [0, 0, 1, 1]) == 1.0


def test_auc_one_swapped_pair():
    assert compute_auc([1, 2, 3, 4], [0, 1, 0, 1]) == 0.75


def test_auc_ties_count_half():
    assert compute_auc([1, 1, 1, 1], [0, 1, 0, 1]) == 0.5


def test_auc_matches_pair_counting_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(4, 51))
        scores = rng.integers(0, 10, n).astype(float)  # integer scores force ties
        labels = np.zeros(n, dtype=int)
        labels[rng.permutation(n)[: max(1, n // 3)]] = 1
        if labels.sum() in (0, n):
            continue
        assert compute_auc(scores, labels) == pytest.approx(
            oracle_auc(scores, labels), abs=1e-12
        )


def test_auc_requires_both_classes():
    with pytest.raises(DataValidationError):
        compute_auc([1, 2], [1, 1])


# ---------------------------------------------------------------------------
# threshold calibration


def test_calibrate_separated_classes_returns_midpoint():
    scores = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0]
    labels = [0, 0, 0, 1, 1, 1]
    assert calibrate_threshold(scores, labels) == 0.5


def test_calibrate_confusion_arithmetic_example():
    # optimum threshold 3.5: TP=3 FP=1 FN=1 TN=3 -> P = R = F1 = 0.75
    scores = [1, 2, 3, 9, 4, 5, 6, 0]
    labels = [0, 0, 0, 0, 1, 1, 1, 1]
    threshold = calibrate_threshold(scores, labels)
    assert threshold == 3.5
    record = compute_metrics(scores, labels, threshold)
    assert record.counts == (3, 1, 3, 1)
    assert record.precision == record.recall == record.f1 == 0.75


def exhaustive_best_f1(scores, labels):
    best = -1.0
    grid = np.unique(scores)
    candidates = np.concatenate([[grid[0] - 1], 0.5 * (grid[:-1] + grid[1:]), [grid[-1] + 1]])
    for t in candidates:
        pred = np.asarray(scores) >= t
        tp = int(np.sum(pred & (np.asarray(labels) == 1)))
        fp = int(np.sum(pred & (np.asarray(labels) == 0)))
        fn = int(np.sum(~pred & (np.asarray(labels) == 1)))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        best = max(best, f1)
    return best


def test_calibrate_f1_at_least_any_scanned_threshold():
    rng = np.random.default_rng(1)
    for _ in range(30):
        n = int(rng.integers(8, 60))
        labels = rng.integers(0, 2, n)
        if labels.sum() in (0, n):
            continue
        scores = rng.normal(0, 1, n) + labels * rng.uniform(0, 2)
        t = calibrate_threshold(scores, labels)
        record = compute_metrics(scores, labels, t)
        # the rule scans midpoints only; allow the oracle its wider grid
        assert record.f1 >= exhaustive_best_f1(scores, labels) - 1e-12


def test_calibrate_single_class_falls_back_to_median():
    with pytest.warns(UserWarning, match="single class"):
        t = calibrate_threshold([1.0, 2.0, 3.0], [0, 0, 0])
    assert t == 2.0


def test_calibrate_ties_resolve_to_lowest_threshold():
    # two thresholds reach F1 = 1: any midpoint in the (2, 5) gap; the scan
    # only proposes 3.5, but duplicate-F1 candidates must pick the lowest.
    scores = [1, 2, 5, 6, 5, 6]
    labels = [0, 0, 1, 1, 1, 1]
    t = calibrate_threshold(scores, labels)
    assert t == 3.5


# ---------------------------------------------------------------------------
# metrics


def test_metrics_perfect_separation_all_ones():
    scores = [0.0] * 5 + [1.0] * 5
    labels = [0] * 5 + [1] * 5
    record = compute_metrics(scores, labels, 0.5)
    assert (record.auc, record.f1, record.precision, record.recall) == (1.0, 1.0, 1.0, 1.0)
    assert record.counts == (5, 0, 5, 0)


def test_metrics_all_predicted_normal():
    scores = [0.1, 0.2, 0.3, 0.4]
    labels = [0, 1, 0, 1]
    with pytest.warns(UserWarning, match="F1"):
        record = compute_metrics(scores, labels, 99.0)
    assert record.recall == 0.0 and record.f1 == 0.0


def test_metrics_fixture_confusion_matrix():
    # TP=39, FP=1, TN=39, FN=1 -> precision = recall = F1 = 0.975
    scores = [1.0] * 39 + [0.0] + [0.0] * 39 + [1.0]
    labels = [1] * 40 + [0] * 40
    record = compute_metrics(scores, labels, 0.5)
    assert record.counts == (39, 1, 39, 1)
    assert record.precision == pytest.approx(0.975)
    assert record.recall == pytest.approx(0.975)
    assert record.f1 == pytest.approx(0.975)


# ---------------------------------------------------------------------------
# effective ratio and phases


def ladder_points(aucs, one_shot_auc=None):
    points = []
    for denom, auc in aucs.items():
        metrics = MetricsRecord(auc, 0.9, 0.9, 0.9, 1.0, (1, 1, 1, 1))
        points.append(
            RatioPoint(
                ratio_label=f"1/{denom}",
                anomaly_count=max(1, 1300 // denom),
                denominator=denom,
                runs=[RunRecord(seed=0, metrics=metrics)],
            )
        )
    if one_shot_auc is not None:
        metrics = MetricsRecord(one_shot_auc, 0.5, 0.5, 0.5, 1.0, (1, 1, 1, 1))
        points.append(
            RatioPoint(ratio_label="one-shot", anomaly_count=1, denominator=None,
                       runs=[RunRecord(seed=0, metrics=metrics)])
        )
    return points


FULL = (1, 2, 4, 8, 16, 32, 64, 128)


def test_effective_ratio_all_equal_picks_most_imbalanced():
    points = ladder_points({d: 0.99 for d in FULL}, one_shot_auc=0.99)
    a_star, flagged = find_effective_ratio(points, delta=0.01)
    assert (a_star, flagged) == (128, False)


def test_effective_ratio_knee_at_16():
    aucs = {1: 0.99, 2: 0.99, 4: 0.99, 8: 0.99, 16: 0.99, 32: 0.95, 64: 0.94, 128: 0.93}
    points = ladder_points(aucs, one_shot_auc=0.80)
    a_star, flagged = find_effective_ratio(points, delta=0.01)
    assert (a_star, flagged) == (16, False)


def test_effective_ratio_strictly_decreasing_zero_delta():
    aucs = {d: 1.0 - 0.001 * i for i, d in enumerate(FULL)}
    points = ladder_points(aucs)
    a_star, flagged = find_effective_ratio(points, delta=0.0)
    assert (a_star, flagged) == (1, False)


def test_effective_ratio_excludes_one_shot():
    # the one-shot rung holds the best AUC but can never be a* itself
    points = ladder_points({1: 0.985, 2: 0.983}, one_shot_auc=0.99)
    a_star, flagged = find_effective_ratio(points, delta=0.01)
    assert (a_star, flagged) == (2, False)


def test_effective_ratio_flagged_when_nothing_qualifies():
    points = ladder_points({1: 0.85, 2: 0.84}, one_shot_auc=0.99)
    with pytest.warns(UserWarning, match="falls back"):
        a_star, flagged = find_effective_ratio(points, delta=0.01)
    assert (a_star, flagged) == (1, True)


def test_effective_ratio_permutation_invariant():
    aucs = {1: 0.99, 2: 0.985, 4: 0.992, 8: 0.97, 16: 0.96, 32: 0.92, 64: 0.91, 128: 0.90}
    points = ladder_points(aucs, one_shot_auc=0.7)
    base, _ = find_effective_ratio(points, delta=0.01)
    rng = np.random.default_rng(2)
    for _ in range(5):
        perm = rng.permutation(len(points))
        shuffled = [points[i] for i in perm]
        assert find_effective_ratio(shuffled, delta=0.01)[0] == base


def test_classify_phases_boundary_at_16():
    points = ladder_points({d: 0.99 for d in FULL}, one_shot_auc=0.9)
    classify_phases(points, a_star=16)
    phases = {p.ratio_label: p.phase for p in points}
    for label in ("1/1", "1/2", "1/4", "1/8", "1/16"):
        assert phases[label] == PHASE_OVER_MINING
    for label in ("1/32", "1/64", "1/128", "one-shot"):
        assert phases[label] == PHASE_OPPORTUNITY


def test_classify_phases_extremes():
    points = ladder_points({d: 0.99 for d in FULL}, one_shot_auc=0.9)
    classify_phases(points, a_star=1)
    assert [p.phase for p in points if p.ratio_label == "1/1"] == [PHASE_OVER_MINING]
    assert all(p.phase == PHASE_OPPORTUNITY for p in points if p.ratio_label != "1/1")
    classify_phases(points, a_star=128)
    assert [p.phase for p in points if p.ratio_label == "one-shot"] == [PHASE_OPPORTUNITY]
    assert all(p.phase == PHASE_OVER_MINING for p in points if p.ratio_label != "one-shot")


# ---------------------------------------------------------------------------
# report round trip


def build_report():
    points = ladder_points({1: 0.99, 8: 0.98, 64: 0.93}, one_shot_auc=0.8)
    a_star, flagged = find_effective_ratio(points, delta=0.01)
    classify_phases(points, a_star)
    return AblationReport(
        points=points,
        a_star=a_star,
        a_star_flagged=flagged,
        phase_boundary=("1/8", "1/64"),
        delta=0.01,
        seed=5,
        repeats=1,
        n_train_per_class=1300,
        test_id_hash="abc123",
        version="0.1.0",
    )


def test_report_round_trip(tmp_path):
    report = build_report()
    path = tmp_path / "report.json"
    save_report(path, report)
    loaded = load_report(path)
    assert report_to_dict(loaded) == report_to_dict(report)


def test_report_csv_columns(tmp_path):
    report = build_report()
    path = tmp_path / "report.csv"
    report_to_csv(path, report)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "ratio_label,anomaly_count,auc,f1,precision,recall,phase"
    assert len(lines) == 1 + len(report.points)


# ---------------------------------------------------------------------------
# the sweep itself (desk-size)


def tiny_dataset(n_per_class=24, size=16, seed=0):
    rng = np.random.default_rng(seed)
    samples = []
    for label in (0, 1):
        for i in range(n_per_class):
            img = 0.4 + 0.05 * rng.standard_normal((size, size, 1))
            if label:
                cy, cx = rng.integers(4, size - 4, 2)
                img[cy - 2 : cy + 2, cx - 2 : cx + 2] += 0.5
            samples.append(
                ImageSample(
                    id=f"{label}-{i:04d}",
                    pixels=np.clip(img, 0, 1).astype(np.float32),
                    label=label,
                )
            )
    return split_dataset(samples, seed=seed)


TINY_TRAIN = TrainConfig(epochs=2, batch_size=8, input_size=(16, 16))


def test_run_ablation_shape_and_fixed_test_set():
    dataset = tiny_dataset()
    ladder = ladder_counts(15).select(["1/1", "1/8", "one-shot"])
    report = run_ablation(dataset, ladder, TINY_TRAIN, seed=1)
    assert [p.ratio_label for p in report.points] == ["1/1", "1/8", "one-shot"]
    assert report.test_id_hash == hash_sample_ids(dataset.test)
    assert all(p.phase is not None for p in report.points)
    assert all(r.metrics is not None for p in report.points for r in p.runs)


def test_run_ablation_deterministic_rerun():
    dataset = tiny_dataset()
    ladder = ladder_counts(15).select(["1/1", "one-shot"])
    a = run_ablation(dataset, ladder, TINY_TRAIN, seed=2)
    b = run_ablation(dataset, ladder, TINY_TRAIN, seed=2)
    assert report_to_dict(a) == report_to_dict(b)


def test_run_ablation_repeats_aggregate():
    dataset = tiny_dataset()
    ladder = ladder_counts(15).select(["1/1", "1/8"])
    report = run_ablation(dataset, ladder, TINY_TRAIN, seed=3, repeats=2)
    point = report.points[0]
    assert len(point.runs) == 2
    assert {r.seed for r in point.runs} == {3, 4}
    aucs = [r.metrics.auc for r in point.runs]
    assert point.mean("auc") == pytest.approx(np.mean(aucs))


def test_run_ablation_rejects_oversized_ladder():
    dataset = tiny_dataset(n_per_class=10)
    ladder = ladder_counts(100)  # needs 100 anomalies, only ~6 in train
    with pytest.raises(DataValidationError):
        run_ablation(dataset, ladder, TINY_TRAIN, seed=0)


def test_run_ablation_marks_failed_rungs():
    from anovis.fcdd import ToyFCN, register_backbone

    class ExplodingFCN(ToyFCN):
        name = "exploding-fcn"

        def __init__(self, *args, **kwargs):
            super().__init__(*args, **kwargs)
            _, value, _ = self.params()[0]
            value[0, 0, 0, 0] = np.nan

    register_backbone(ExplodingFCN.name, ExplodingFCN)
    dataset = tiny_dataset()
    ladder = ladder_counts(15).select(["1/1", "one-shot"])
    config = TrainConfig(
        epochs=2, batch_size=8, input_size=(16, 16), backbone="exploding-fcn"
    )
    with pytest.warns(UserWarning):
        report = run_ablation(dataset, ladder, config, seed=0)
    assert all(p.failed for p in report.points)
    assert all("non-finite" in r.error for p in report.points for r in p.runs)
    assert report.a_star_flagged


def test_run_ablation_full_ladder_yields_nine_points():
    dataset = tiny_dataset()
    with pytest.warns(UserWarning, match="clamped"):
        ladder = ladder_counts(15)  # anomalies in the tiny train split
    report = run_ablation(dataset, ladder, TINY_TRAIN, seed=11)
    assert len(report.points) == 9
    assert [p.ratio_label for p in report.points] == [
        "1/1", "1/2", "1/4", "1/8", "1/16", "1/32", "1/64", "1/128", "one-shot",
    ]


def test_run_ablation_parallel_workers_match_sequential():
    dataset = tiny_dataset()
    ladder = ladder_counts(15).select(["1/1", "one-shot"])
    sequential = run_ablation(dataset, ladder, TINY_TRAIN, seed=7, workers=1)
    parallel = run_ablation(dataset, ladder, TINY_TRAIN, seed=7, workers=2)
    assert report_to_dict(sequential) == report_to_dict(parallel)
