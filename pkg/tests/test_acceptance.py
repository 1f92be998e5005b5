"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s``. The desk-scale sweep
(criterion 10) trains 24 detectors and dominates the runtime; everything
else finishes in seconds.
"""

import json
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

from anovis.cli import main as cli_main
from anovis.cluster import dbscan, reduce_2d
from anovis.data import ImageSample, ladder_counts, split_dataset
from anovis.fcdd import (
    FieldGeometry,
    FieldMap,
    TrainConfig,
    deep_svdd_loss,
    deep_svdd_loss_and_grad,
    fcdd_loss,
    fcdd_loss_and_grad,
    pseudo_huber,
)
from anovis.harness import compute_auc, run_ablation
from anovis.heatmap import display_range, upsample_field
from anovis.mnpair import (
    ContrastiveConfig,
    mnpair_loss,
    mnpair_loss_from_sims,
    mnpair_loss_grad,
    npair_loss,
    npair_loss_from_sims,
    npair_loss_grad,
    train_embedder,
)
from anovis.synthgen import MULTI_CLASS, SynthSpec, generate

from test_cluster import brute_force_dbscan, points_from
from test_fcdd import oracle_deep_svdd, oracle_fcdd, raw_from_huber
from test_mnpair import oracle_mnpair, oracle_npair


@contextmanager
def criterion(num, description):
    start = time.time()
    try:
        yield
    except BaseException:
        print(f"\n[criterion {num:02d}] FAIL - {description}")
        raise
    print(f"\n[criterion {num:02d}] PASS - {description} ({time.time() - start:.1f}s)")


# ---------------------------------------------------------------------------
# 1-2: protocol exactness


def test_c01_ladder_exactness():
    with criterion(1, "ladder counts for N=1300 match the published rung labels"):
        start = time.time()
        counts = [r.anomaly_count for r in ladder_counts(1300)]
        assert counts == [1300, 650, 325, 163, 81, 41, 20, 10, 1]
        assert time.time() - start < 1.0


def test_c02_split_exactness():
    with criterion(2, "2000 per-class samples split 1300/300/400 per class"):
        start = time.time()
        rng = np.random.default_rng(0)
        samples = []
        for label in (0, 1):
            for i in range(2000):
                pixels = rng.random((8, 8, 1)).astype(np.float32)
                samples.append(ImageSample(id=f"{label}-{i:04d}", pixels=pixels, label=label))
        ds = split_dataset(samples, seed=0)
        for label in (0, 1):
            sizes = (
                sum(1 for s in ds.train if s.label == label),
                sum(1 for s in ds.calibration if s.label == label),
                sum(1 for s in ds.test if s.label == label),
            )
            assert sizes == (1300, 300, 400)
        assert time.time() - start < 1.0


# ---------------------------------------------------------------------------
# 3: loss oracles


def test_c03_loss_oracles():
    with criterion(3, "all four losses match independent scalar oracles on 1000 instances"):
        start = time.time()
        rng = np.random.default_rng(10)
        for _ in range(1000):
            n = int(rng.integers(1, 5))
            u, v = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            maps = rng.standard_normal((n, u, v)) * rng.uniform(0.2, 2.0)
            labels = rng.integers(0, 2, n).tolist()
            assert abs(deep_svdd_loss(maps, labels) - oracle_deep_svdd(maps.tolist(), labels)) < 1e-9
            assert abs(fcdd_loss(maps, labels) - oracle_fcdd(maps.tolist(), labels)) < 1e-9
        for _ in range(1000):
            dim = int(rng.integers(2, 6))
            n_pos = int(rng.integers(1, 4))
            n_neg = int(rng.integers(1, 5))
            vecs = rng.standard_normal((1 + n_pos + n_neg, dim))
            got = mnpair_loss(vecs[0], vecs[1 : 1 + n_pos], vecs[1 + n_pos :], pi=0.15, tau=0.3)
            want = oracle_mnpair(
                vecs[0].tolist(), vecs[1 : 1 + n_pos].tolist(), vecs[1 + n_pos :].tolist(), 0.15, 0.3
            )
            assert abs(got - want) < 1e-9
            got = npair_loss(vecs[0], vecs[1], vecs[2:], tau=0.3)
            want = oracle_npair(vecs[0].tolist(), vecs[1].tolist(), vecs[2:].tolist(), 0.3)
            assert abs(got - want) < 1e-9

        # closed forms at 1e-12
        h = 0.8321
        maps = np.full((3, 4, 4), raw_from_huber(h))
        assert abs(fcdd_loss(maps, [0, 0, 0]) - h) < 1e-12
        maps = np.full((1, 5, 5), raw_from_huber(math.log(2.0)))
        assert abs(fcdd_loss(maps, [1]) - math.log(2.0)) < 1e-12
        assert abs(deep_svdd_loss(maps, [1]) - math.log(2.0)) < 1e-12
        assert abs(npair_loss_from_sims(0.3, [0.3] * 7, tau=0.3) - math.log(8.0)) < 1e-12
        m_minus_1, n_minus_1, pi = 2, 4, 0.15
        expected = -math.log(pi * m_minus_1 / (pi * m_minus_1 + (1 - pi) * n_minus_1))
        got = mnpair_loss_from_sims([0.3] * m_minus_1, [0.3] * n_minus_1, pi=pi, tau=0.3)
        assert abs(got - expected) < 1e-12
        assert time.time() - start < 10.0


# ---------------------------------------------------------------------------
# 4: gradient checks


def _relative_error(analytic, fd):
    return np.linalg.norm(analytic - fd) / max(np.linalg.norm(fd), 1e-12)


def test_c04_gradient_checks():
    with criterion(4, "analytic gradients of all four losses match central differences"):
        start = time.time()
        rng = np.random.default_rng(11)
        step = 1e-4
        for _ in range(100):
            maps = rng.standard_normal((2, 1, 5)) * rng.uniform(0.3, 2.0)
            labels = [0, 1]
            for loss_fn, grad_fn in (
                (fcdd_loss, lambda m, a: fcdd_loss_and_grad(m, a)[1]),
                (deep_svdd_loss, lambda m, a: deep_svdd_loss_and_grad(m, a)[1]),
            ):
                fd = np.zeros_like(maps)
                for idx in np.ndindex(maps.shape):
                    up, down = maps.copy(), maps.copy()
                    up[idx] += step
                    down[idx] -= step
                    fd[idx] = (loss_fn(up, labels) - loss_fn(down, labels)) / (2 * step)
                assert _relative_error(grad_fn(maps, labels), fd) < 1e-4

        for _ in range(100):
            anchor = rng.standard_normal(4)
            pos = rng.standard_normal((2, 4))
            neg = rng.standard_normal((3, 4))
            _, ga, gp, gn = mnpair_loss_grad(anchor, pos, neg, pi=0.15, tau=0.3)
            flat = np.concatenate([anchor, pos.ravel(), neg.ravel()])

            def loss_at(vec):
                return mnpair_loss(vec[:4], vec[4:12].reshape(2, 4), vec[12:].reshape(3, 4),
                                   pi=0.15, tau=0.3)

            fd = np.array(
                [
                    (loss_at(flat + step * basis) - loss_at(flat - step * basis)) / (2 * step)
                    for basis in np.eye(len(flat))
                ]
            )
            analytic = np.concatenate([ga, gp.ravel(), gn.ravel()])
            assert _relative_error(analytic, fd) < 1e-4

            _, ga, gp, gn = npair_loss_grad(anchor, pos[0], neg, tau=0.3)

            def nloss_at(vec):
                return npair_loss(vec[:4], vec[4:8], vec[8:].reshape(3, 4), tau=0.3)

            nflat = np.concatenate([anchor, pos[0], neg.ravel()])
            fd = np.array(
                [
                    (nloss_at(nflat + step * basis) - nloss_at(nflat - step * basis)) / (2 * step)
                    for basis in np.eye(len(nflat))
                ]
            )
            analytic = np.concatenate([ga, gp, gn.ravel()])
            assert _relative_error(analytic, fd) < 1e-4
        assert time.time() - start < 30.0


# ---------------------------------------------------------------------------
# 5: MN -> N reduction


def test_c05_mn_reduces_to_npair():
    with criterion(5, "MN-pair with M=2, pi=0.5 equals the N-pair loss"):
        start = time.time()
        rng = np.random.default_rng(12)
        for _ in range(1000):
            dim = int(rng.integers(2, 8))
            n_neg = int(rng.integers(1, 6))
            vecs = rng.standard_normal((2 + n_neg, dim))
            a = mnpair_loss(vecs[0], vecs[1:2], vecs[2:], pi=0.5, tau=0.3)
            b = npair_loss(vecs[0], vecs[1], vecs[2:], tau=0.3)
            assert abs(a - b) < 1e-12
        assert time.time() - start < 5.0


# ---------------------------------------------------------------------------
# 6: upsampling properties


def test_c06_upsampling_properties():
    with criterion(6, "upsampling is linear, mass-preserving, peak-faithful, 224-ready"):
        start = time.time()
        rng = np.random.default_rng(13)
        geometry = FieldGeometry(offset=0.0, stride=8.0, input_size=(64, 64))

        for _ in range(20):
            a = FieldMap(rng.random((8, 8)), geometry)
            b = FieldMap(rng.random((8, 8)), geometry)
            alpha, beta = rng.uniform(-2, 2, 2)
            combo = FieldMap(alpha * a.values + beta * b.values, geometry)
            lhs = upsample_field(combo, sigma=4.0).values
            rhs = alpha * upsample_field(a, sigma=4.0).values + beta * upsample_field(b, sigma=4.0).values
            assert np.abs(lhs - rhs).max() < 1e-9

        for _ in range(20):
            values = np.zeros((8, 8))
            values[2:6, 2:6] = rng.random((4, 4))  # interior: centers >= 3 sigma from borders
            heat = upsample_field(FieldMap(values, geometry), sigma=4.0)
            assert abs(heat.values.sum() - values.sum()) / values.sum() < 0.02

        for _ in range(20):
            values = np.zeros((8, 8))
            i, j = int(rng.integers(1, 7)), int(rng.integers(1, 7))
            values[i, j] = 1.0 + rng.random()
            heat = upsample_field(FieldMap(values, geometry), sigma=4.0)
            peak = np.unravel_index(np.argmax(heat.values), heat.values.shape)
            assert abs(peak[0] - 8.0 * i) <= 8.0 and abs(peak[1] - 8.0 * j) <= 8.0

        big = FieldMap(rng.random((28, 28)), FieldGeometry(0.0, 8.0, (224, 224)))
        assert upsample_field(big).values.shape == (224, 224)
        assert time.time() - start < 30.0


# ---------------------------------------------------------------------------
# 7: display range


def test_c07_display_range_rule():
    with criterion(7, "display range is exactly (min, max/4) on 100 random score sets"):
        start = time.time()
        rng = np.random.default_rng(14)
        for _ in range(100):
            values = rng.random(int(rng.integers(2, 200))) * rng.uniform(0.5, 50)
            dr = display_range(values)
            if values.max() * 0.25 > values.min():
                assert dr.lo == values.min()
                assert dr.hi == values.max() * 0.25
                assert not dr.degenerate
            else:
                assert dr.degenerate and dr.hi > dr.lo
        assert time.time() - start < 1.0


# ---------------------------------------------------------------------------
# 8: DBSCAN oracle equivalence


def test_c08_dbscan_oracle_equivalence():
    with criterion(8, "DBSCAN matches the O(n^2) reference on 20 random settings"):
        start = time.time()
        rng = np.random.default_rng(15)
        for trial in range(20):
            coords = [tuple(c) for c in rng.uniform(0, 12, (200, 2))]
            eps = float(rng.uniform(0.2, 2.5))
            min_neighbors = int(rng.integers(2, 15))
            got = dbscan(points_from(coords), eps=eps, min_neighbors=min_neighbors)
            want_cluster, want_roles = brute_force_dbscan(coords, eps, min_neighbors)
            assert [a.role for a in got] == want_roles, f"roles differ (trial {trial})"
            assert [a.cluster for a in got] == want_cluster, f"partitions differ (trial {trial})"
        assert time.time() - start < 30.0


# ---------------------------------------------------------------------------
# 9: AUC oracle


def test_c09_auc_oracle():
    with criterion(9, "AUC equals exhaustive pair counting; random labels score ~0.5"):
        start = time.time()
        rng = np.random.default_rng(16)
        from test_harness import oracle_auc

        for n in range(2, 51):
            scores = rng.integers(0, max(2, n // 2), n).astype(float)
            labels = np.zeros(n, dtype=int)
            labels[: max(1, n // 3)] = 1
            labels = labels[rng.permutation(n)]
            if labels.sum() in (0, n):
                continue
            assert compute_auc(scores, labels) == pytest.approx(oracle_auc(scores, labels), abs=1e-12)

        scores = rng.standard_normal(10000)
        labels = rng.integers(0, 2, 10000)
        assert abs(compute_auc(scores, labels) - 0.5) <= 0.02
        assert time.time() - start < 10.0


# ---------------------------------------------------------------------------
# 10: desk-scale phase reproduction


@pytest.fixture(scope="module")
def phase_sweep():
    samples = generate(SynthSpec(seed=0))
    dataset = split_dataset(samples, seed=0)
    n_anomalies = sum(1 for s in dataset.train if s.label == 1)
    assert n_anomalies == 256, "default synth spec must give N=256 per class in train"
    ladder = ladder_counts(n_anomalies).select(
        ["1/1", "1/2", "1/4", "1/8", "1/16", "1/32", "1/64", "one-shot"]
    )
    start = time.time()
    report = run_ablation(dataset, ladder, TrainConfig(seed=0), seed=0, repeats=3, workers=1)
    return report, time.time() - start


def test_c10_phase_reproduction(phase_sweep):
    with criterion(10, "positive-ratio sweep reproduces the accuracy-phase shape"):
        report, elapsed = phase_sweep
        auc = {p.ratio_label: p.mean("auc") for p in report.points}
        lines = "  ".join(f"{k}:{v:.3f}" for k, v in auc.items())
        print(f"\n  mean AUC over 3 seeds: {lines}\n  a* = {report.a_star}, {elapsed:.0f}s")
        assert auc["1/1"] >= 0.90
        assert auc["one-shot"] <= auc["1/8"] - 0.03
        assert report.a_star in (4, 8, 16, 32)
        assert not report.a_star_flagged
        assert elapsed <= 30 * 60


# ---------------------------------------------------------------------------
# 11: contrastive separation


def test_c11_contrastive_separation():
    with criterion(11, "MN-pair training separates classes and clusters stay >= 3"):
        start = time.time()
        spec = SynthSpec(n_per_class=150, anomaly_kind=MULTI_CLASS, n_classes=3, seed=0)
        samples = generate(spec)
        config = ContrastiveConfig(seed=0)
        assert config.tau == 0.3 and config.pi == 0.15
        result = train_embedder(samples, config)
        assert result.holdout_margin >= 0.2
        reduced = reduce_2d(result.points, perplexity=30, seed=0)
        assignments = dbscan(reduced, eps=3.0, min_neighbors=10)
        clusters = len({a.cluster for a in assignments if a.cluster >= 0})
        print(f"\n  holdout margin {result.holdout_margin:.3f}, clusters {clusters}")
        assert clusters >= 3
        assert time.time() - start <= 10 * 60


# ---------------------------------------------------------------------------
# 12: determinism of the command pipeline


def test_c12_cli_determinism(tmp_path, phase_sweep):
    with criterion(12, "train and ablate reruns produce byte-identical CSV/JSON"):
        import yaml

        start = time.time()
        config = {
            "dataset": {"synth": {"n_per_class": 24, "image_size": [32, 32]}},
            "train": {"epochs": 2, "input_size": [32, 32], "batch_size": 8},
        }
        config_path = tmp_path / "config.yaml"
        config_path.write_text(yaml.safe_dump(config))

        for command, files in (
            ("train", ("training_log.csv", "splits.json", "checkpoint/config.json")),
            ("ablate", ("report.json", "report.csv", "splits.json")),
        ):
            outputs = []
            for run in ("x", "y"):
                out = tmp_path / f"{command}-{run}"
                args = [command, "--config", str(config_path), "--out", str(out), "--seed", "9"]
                if command == "ablate":
                    args += ["--rungs", "1/1,1/8,one-shot", "--workers", "1"]
                assert cli_main(args) == 0
                outputs.append(out)
            for name in files:
                a = (outputs[0] / name).read_bytes()
                b = (outputs[1] / name).read_bytes()
                assert a == b, f"{command}: {name} differs between reruns"
        elapsed = time.time() - start
        assert elapsed < phase_sweep[1], "determinism check must be cheaper than the sweep"
