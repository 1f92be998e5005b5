"""Synthetic dataset contracts: determinism, defect strength, separability."""

import json

import numpy as np
import pytest

from anovis.data import ingest_folder
from anovis.errors import DataValidationError
from anovis.synthgen import MULTI_CLASS, STRIPE_DEFECT, SynthSpec, generate, write_dataset

SMALL = SynthSpec(n_per_class=16, seed=3)


def test_counts_per_class():
    samples = generate(SMALL)
    assert len(samples) == 32
    labels = [s.label for s in samples]
    assert labels.count(0) == 16 and labels.count(1) == 16


def test_generation_is_byte_identical():
    a = generate(SMALL)
    b = generate(SMALL)
    assert [s.id for s in a] == [s.id for s in b]
    for sa, sb in zip(a, b):
        np.testing.assert_array_equal(sa.pixels, sb.pixels)


def test_different_seed_differs():
    a = generate(SMALL)
    b = generate(SynthSpec(n_per_class=16, seed=4))
    assert any((sa.pixels != sb.pixels).any() for sa, sb in zip(a, b))


def test_blob_region_brighter_than_surroundings():
    samples = generate(SynthSpec(n_per_class=24, seed=1))
    spec = SynthSpec(n_per_class=24, seed=1)
    gaps = []
    for s in samples:
        if not s.label:
            continue
        defect = s.meta["defect"]
        cy, cx = defect["center"]
        radius = defect["radius"]
        yy, xx = np.mgrid[0 : s.pixels.shape[0], 0 : s.pixels.shape[1]]
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        inside = s.pixels[:, :, 0][dist <= radius].mean()
        ring = s.pixels[:, :, 0][(dist > 2 * radius) & (dist <= 4 * radius)].mean()
        gaps.append(inside - ring)
    assert np.mean(gaps) >= 3 * spec.noise_level


def test_stripe_defect_kind():
    samples = generate(SynthSpec(n_per_class=8, anomaly_kind=STRIPE_DEFECT, seed=2))
    anomalous = [s for s in samples if s.label]
    assert all(s.meta["defect"]["kind"] == STRIPE_DEFECT for s in anomalous)
    # the recorded stripe is brighter than the image average
    for s in anomalous[:4]:
        x0 = int(round(s.meta["defect"]["center"][1]))
        stripe = s.pixels[:, max(0, x0 - 1) : x0 + 2, 0].mean()
        assert stripe > s.pixels[:, :, 0].mean()


def test_multi_class_names_and_binary_labels():
    spec = SynthSpec(n_per_class=6, anomaly_kind=MULTI_CLASS, n_classes=3, seed=5)
    samples = generate(spec)
    names = sorted({s.class_name for s in samples})
    assert len(names) == 3 and "normal" in names
    for s in samples:
        assert s.label == (0 if s.class_name == "normal" else 1)


def test_spec_validation():
    with pytest.raises(DataValidationError):
        SynthSpec(n_per_class=2)
    with pytest.raises(DataValidationError):
        SynthSpec(noise_level=-0.1)
    with pytest.raises(DataValidationError):
        SynthSpec(anomaly_kind="sparkles")


def test_write_dataset_layout_and_ground_truth(tmp_path):
    samples = generate(SMALL)
    root = write_dataset(samples, tmp_path / "data")
    assert (root / "normal").is_dir() and (root / "anomalous").is_dir()
    ground_truth = json.loads((root / "ground_truth.json").read_text())
    assert len(ground_truth) == 16
    for key, defect in ground_truth.items():
        assert key.startswith("anomalous/")
        assert "center" in defect and "bbox" in defect

    ingested, skips = ingest_folder(root)
    assert not skips and len(ingested) == 32
    assert sum(s.label for s in ingested) == 16


def test_written_pixels_round_trip_closely(tmp_path):
    samples = generate(SMALL)
    root = write_dataset(samples, tmp_path / "data")
    ingested, _ = ingest_folder(root)
    by_id = {s.id: s for s in ingested}
    for s in samples[:5]:
        sub = "normal" if s.label == 0 else "anomalous"
        loaded = by_id[f"{sub}/{s.id}.png"]
        assert np.abs(loaded.pixels - s.pixels).max() <= 1.0 / 255.0 + 1e-6


def test_default_spec_is_knn_separable():
    """5-NN on raw pixels must exceed 0.9 accuracy on the default spec."""
    from sklearn.neighbors import KNeighborsClassifier

    from anovis.data import split_dataset

    samples = generate(SynthSpec(seed=0))
    dataset = split_dataset(samples, seed=0)
    flat = lambda part: np.stack([s.pixels.ravel() for s in part])
    labels = lambda part: np.array([s.label for s in part])
    knn = KNeighborsClassifier(n_neighbors=5)
    knn.fit(flat(dataset.train), labels(dataset.train))
    accuracy = knn.score(flat(dataset.test), labels(dataset.test))
    assert accuracy >= 0.9, f"5-NN accuracy {accuracy:.3f}"
