"""Evaluation and the positive-ratio ablation sweep.

A sweep walks the ratio ladder: per rung it subsamples the training
anomalies (nested under one seed), trains a fresh detector, picks the score
threshold on the fixed calibration split by F1, and evaluates on the fixed
test split. The report derives the effective ratio 1/a* (the most imbalanced
rung whose AUC stays within delta of the best) and splits the ladder into a
mining-opportunity phase below it and an over-mining phase above it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from .data import RatioLadder, SplitDataset, subsample_anomalies
from .errors import DataValidationError, TrainingDiverged
from .fcdd import TrainConfig, score_dataset, train_detector

logger = logging.getLogger(__name__)

DEFAULT_DELTA = 0.01

PHASE_OPPORTUNITY = "mining-opportunity"
PHASE_OVER_MINING = "over-mining"


# ---------------------------------------------------------------------------
# metrics


def compute_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(anomalous score > normal score), ties count half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataValidationError("AUC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=float)
    ranks[order] = np.arange(1, len(scores) + 1, dtype=float)
    # average ranks over ties
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_pos = ranks[labels == 1].sum()
    return float((rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _confusion(scores, labels, threshold):
    pred = np.asarray(scores, dtype=float) >= threshold
    labels = np.asarray(labels).astype(bool)
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    tn = int(np.sum(~pred & ~labels))
    fn = int(np.sum(~pred & labels))
    return tp, fp, tn, fn


def _prf(tp, fp, fn):
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def calibrate_threshold(cal_scores, cal_labels) -> float:
    """Threshold with the best calibration F1 over midpoints of adjacent
    sorted unique scores; ties resolve to the lowest threshold."""
    scores = np.asarray(cal_scores, dtype=float)
    labels = np.asarray(cal_labels)
    if len(set(labels.tolist())) < 2:
        warnings.warn("calibration split has a single class; falling back to the score median")
        return float(np.median(scores))
    uniq = np.unique(scores)
    if len(uniq) == 1:
        warnings.warn("all calibration scores identical; using that value as threshold")
        return float(uniq[0])
    candidates = 0.5 * (uniq[:-1] + uniq[1:])
    best_t, best_f1 = None, -1.0
    for t in candidates:
        tp, fp, _, fn = _confusion(scores, labels, t)
        _, _, f1 = _prf(tp, fp, fn)
        if f1 > best_f1:
            best_t, best_f1 = float(t), f1
    return best_t


@dataclass(frozen=True)
class MetricsRecord:
    auc: float
    f1: float
    precision: float
    recall: float
    threshold: float
    counts: tuple[int, int, int, int]  # TP, FP, TN, FN


def compute_metrics(test_scores, test_labels, threshold) -> MetricsRecord:
    """Threshold at ``score >= threshold`` and fill the whole record."""
    scores = np.asarray(test_scores, dtype=float)
    labels = np.asarray(test_labels)
    tp, fp, tn, fn = _confusion(scores, labels, threshold)
    precision, recall, f1 = _prf(tp, fp, fn)
    if precision + recall == 0:
        warnings.warn("precision + recall are 0; F1 reported as 0")
    return MetricsRecord(
        auc=compute_auc(scores, labels),
        f1=f1,
        precision=precision,
        recall=recall,
        threshold=float(threshold),
        counts=(tp, fp, tn, fn),
    )


# ---------------------------------------------------------------------------
# ablation sweep


@dataclass(frozen=True)
class RunRecord:
    seed: int
    metrics: MetricsRecord | None
    error: str | None = None


@dataclass
class RatioPoint:
    ratio_label: str
    anomaly_count: int
    denominator: int | None  # None for one-shot
    runs: list[RunRecord]
    phase: str | None = None

    def _valid(self, name):
        return [getattr(r.metrics, name) for r in self.runs if r.metrics is not None]

    def mean(self, name) -> float:
        vals = self._valid(name)
        return float(np.mean(vals)) if vals else float("nan")

    def std(self, name) -> float:
        vals = self._valid(name)
        return float(np.std(vals)) if vals else float("nan")

    @property
    def failed(self) -> bool:
        return all(r.metrics is None for r in self.runs)

    @property
    def effective_denominator(self) -> float:
        return math.inf if self.denominator is None else float(self.denominator)


@dataclass
class AblationReport:
    points: list[RatioPoint]
    a_star: int
    a_star_flagged: bool
    phase_boundary: tuple[str, str] | None
    delta: float
    seed: int
    repeats: int
    n_train_per_class: int
    test_id_hash: str
    cluster_count: int | None = None
    version: str = ""


def hash_sample_ids(samples) -> str:
    digest = hashlib.sha256()
    for s in samples:
        digest.update(s.id.encode())
        digest.update(b"\n")
    return digest.hexdigest()


def _run_single(train_samples, calibration, test, rung_count, config: TrainConfig, run_seed):
    reduced = subsample_anomalies(train_samples, rung_count, seed=run_seed)
    cfg = replace(config, seed=run_seed)
    try:
        backbone, _ = train_detector(reduced, cfg)
    except TrainingDiverged as exc:
        return RunRecord(seed=run_seed, metrics=None, error=str(exc))
    cal_rows = score_dataset(backbone, calibration, cfg)
    threshold = calibrate_threshold([r.score for r in cal_rows], [r.label for r in cal_rows])
    test_rows = score_dataset(backbone, test, cfg)
    metrics = compute_metrics([r.score for r in test_rows], [r.label for r in test_rows], threshold)
    return RunRecord(seed=run_seed, metrics=metrics)


def _job(payload):
    key, train, calibration, test, count, config, run_seed = payload
    return key, _run_single(train, calibration, test, count, config, run_seed)


def run_ablation(
    dataset: SplitDataset,
    ladder: RatioLadder,
    train_config: TrainConfig,
    seed: int = 0,
    repeats: int = 1,
    workers: int = 1,
    delta: float = DEFAULT_DELTA,
    version: str = "",
) -> AblationReport:
    """Train/evaluate one detector per (rung, repeat) over fixed splits."""
    train = list(dataset.train)
    calibration = list(dataset.calibration)
    test = list(dataset.test)
    if not calibration or not test:
        raise DataValidationError("ablation needs non-empty calibration and test splits")
    n_anomalies = sum(1 for s in train if s.label == 1)
    n_normal = sum(1 for s in train if s.label == 0)
    max_count = max(r.anomaly_count for r in ladder)
    if max_count > n_anomalies:
        raise DataValidationError(
            f"ladder needs {max_count} anomalies but the train split has {n_anomalies}"
        )

    payloads = []
    for rung in ladder:
        for r in range(repeats):
            payloads.append(
                ((rung.label, r), train, calibration, test, rung.anomaly_count, train_config, seed + r)
            )

    results: dict = {}
    if workers <= 1:
        for payload in payloads:
            key, record = _job(payload)
            results[key] = record
            logger.info("rung %s seed %d done", key[0], record.seed)
    else:
        with ProcessPoolExecutor(max_workers=workers, mp_context=get_context("spawn")) as pool:
            for key, record in pool.map(_job, payloads):
                results[key] = record
                logger.info("rung %s seed %d done", key[0], record.seed)

    points = []
    for rung in ladder:
        runs = [results[(rung.label, r)] for r in range(repeats)]
        points.append(
            RatioPoint(
                ratio_label=rung.label,
                anomaly_count=rung.anomaly_count,
                denominator=rung.denominator,
                runs=runs,
            )
        )

    if len(points) >= 2:
        a_star, flagged = find_effective_ratio(points, delta)
    else:
        warnings.warn("a* needs at least two rungs; single-rung report flagged")
        a_star, flagged = 1, True
    points = classify_phases(points, a_star)
    boundary = _phase_boundary(points)
    return AblationReport(
        points=points,
        a_star=a_star,
        a_star_flagged=flagged,
        phase_boundary=boundary,
        delta=delta,
        seed=seed,
        repeats=repeats,
        n_train_per_class=n_normal,
        test_id_hash=hash_sample_ids(test),
        version=version,
    )


def find_effective_ratio(points, delta: float = DEFAULT_DELTA):
    """(a_star, flagged): largest non-one-shot denominator whose mean AUC is
    within delta of the best mean AUC over all rungs."""
    if len(points) < 2:
        raise DataValidationError("need at least two ratio points")
    aucs = {p.ratio_label: p.mean("auc") for p in points}
    valid = [p for p in points if np.isfinite(aucs[p.ratio_label])]
    if not valid:
        warnings.warn("no rung produced a valid AUC; a* falls back to 1")
        return 1, True
    best = max(aucs[p.ratio_label] for p in valid)
    qualifying = [
        p.denominator
        for p in valid
        if p.denominator is not None and aucs[p.ratio_label] >= best - delta
    ]
    if not qualifying:
        warnings.warn("no ladder rung qualifies within delta; a* falls back to 1")
        return 1, True
    return max(qualifying), False


def classify_phases(points, a_star: int):
    """Rungs more imbalanced than 1/a* still gain from new anomalies."""
    for p in points:
        p.phase = PHASE_OPPORTUNITY if p.effective_denominator > a_star else PHASE_OVER_MINING
    return points


def _phase_boundary(points):
    ordered = sorted(points, key=lambda p: p.effective_denominator)
    for earlier, later in zip(ordered, ordered[1:]):
        if earlier.phase == PHASE_OVER_MINING and later.phase == PHASE_OPPORTUNITY:
            return (earlier.ratio_label, later.ratio_label)
    return None


# ---------------------------------------------------------------------------
# serialization


def _metrics_to_dict(m: MetricsRecord | None):
    if m is None:
        return None
    return {
        "auc": m.auc,
        "f1": m.f1,
        "precision": m.precision,
        "recall": m.recall,
        "threshold": m.threshold,
        "counts": list(m.counts),
    }


def _metrics_from_dict(d):
    if d is None:
        return None
    return MetricsRecord(
        auc=d["auc"],
        f1=d["f1"],
        precision=d["precision"],
        recall=d["recall"],
        threshold=d["threshold"],
        counts=tuple(d["counts"]),
    )


def report_to_dict(report: AblationReport) -> dict:
    return {
        "a_star": report.a_star,
        "a_star_flagged": report.a_star_flagged,
        "phase_boundary": list(report.phase_boundary) if report.phase_boundary else None,
        "delta": report.delta,
        "seed": report.seed,
        "repeats": report.repeats,
        "n_train_per_class": report.n_train_per_class,
        "test_id_hash": report.test_id_hash,
        "cluster_count": report.cluster_count,
        "version": report.version,
        "points": [
            {
                "ratio_label": p.ratio_label,
                "anomaly_count": p.anomaly_count,
                "denominator": p.denominator,
                "phase": p.phase,
                "mean_auc": p.mean("auc"),
                "runs": [
                    {"seed": r.seed, "metrics": _metrics_to_dict(r.metrics), "error": r.error}
                    for r in p.runs
                ],
            }
            for p in report.points
        ],
    }


def report_from_dict(payload: dict) -> AblationReport:
    points = [
        RatioPoint(
            ratio_label=p["ratio_label"],
            anomaly_count=p["anomaly_count"],
            denominator=p["denominator"],
            phase=p["phase"],
            runs=[
                RunRecord(seed=r["seed"], metrics=_metrics_from_dict(r["metrics"]), error=r["error"])
                for r in p["runs"]
            ],
        )
        for p in payload["points"]
    ]
    boundary = payload["phase_boundary"]
    return AblationReport(
        points=points,
        a_star=payload["a_star"],
        a_star_flagged=payload["a_star_flagged"],
        phase_boundary=tuple(boundary) if boundary else None,
        delta=payload["delta"],
        seed=payload["seed"],
        repeats=payload["repeats"],
        n_train_per_class=payload["n_train_per_class"],
        test_id_hash=payload["test_id_hash"],
        cluster_count=payload["cluster_count"],
        version=payload["version"],
    )


def save_report(path, report: AblationReport):
    Path(path).write_text(json.dumps(report_to_dict(report), indent=2, sort_keys=True))
    return Path(path)


def load_report(path) -> AblationReport:
    return report_from_dict(json.loads(Path(path).read_text()))


def report_to_csv(path, report: AblationReport):
    lines = ["ratio_label,anomaly_count,auc,f1,precision,recall,phase"]
    for p in report.points:
        lines.append(
            f"{p.ratio_label},{p.anomaly_count},{p.mean('auc')!r},{p.mean('f1')!r},"
            f"{p.mean('precision')!r},{p.mean('recall')!r},{p.phase}"
        )
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def plot_effect(path, report: AblationReport):
    """Accuracy versus positive ratio with the 1/a* boundary marked."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = [p.ratio_label for p in report.points]
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name, marker in (("auc", "o"), ("f1", "s"), ("precision", "^"), ("recall", "v")):
        ax.plot(x, [p.mean(name) for p in report.points], marker=marker, label=name.upper())
    if report.repeats > 1:
        aucs = np.array([p.mean("auc") for p in report.points])
        stds = np.array([p.std("auc") for p in report.points])
        ax.fill_between(x, aucs - stds, aucs + stds, alpha=0.15)
    if report.phase_boundary:
        left = labels.index(report.phase_boundary[0])
        right = labels.index(report.phase_boundary[1])
        ax.axvline(0.5 * (left + right), linestyle="--", color="gray")
        ax.text(
            0.5 * (left + right),
            ax.get_ylim()[0],
            f"  1/a* = 1/{report.a_star}",
            rotation=90,
            va="bottom",
            fontsize=8,
            color="gray",
        )
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=45, ha="right")
    ax.set_xlabel("positive ratio")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
