"""Dataset representation, folder ingestion, splitting, and ratio subsampling.

All operations here are deterministic functions of (input, seed): ingestion
orders samples by path, splits permute each class with a seeded generator,
and anomaly subsets are nested prefixes of one seeded permutation so that
walking down the ratio ladder only removes images.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataValidationError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp"}

SPLIT_RATIOS = (0.65, 0.15, 0.20)


class Split(str, Enum):
    TRAIN = "train"
    CALIBRATION = "calibration"
    TEST = "test"


@dataclass(frozen=True)
class ImageSample:
    """One image with a binary anomaly label (1 = anomalous)."""

    id: str
    pixels: np.ndarray  # h x w x c float32 in [0, 1]
    label: int
    split: Split | None = None
    class_name: str | None = None  # finer class id for multi-class sets
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataValidationError(f"label must be 0 or 1, got {self.label}")
        if self.pixels.ndim != 3:
            raise DataValidationError(f"pixels must be h x w x c, got shape {self.pixels.shape}")
        h, w = self.pixels.shape[:2]
        if h < 8 or w < 8:
            raise DataValidationError(f"images must be at least 8x8, got {h}x{w}")
        if not np.isfinite(self.pixels).all():
            raise DataValidationError(f"sample {self.id} has non-finite pixels")


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    n_train_per_class: int
    n_calibration: int = 300
    n_test: int = 400
    class_names: tuple[str, ...] = ("normal", "anomalous")

    def __post_init__(self):
        if self.n_train_per_class < 1:
            raise DataValidationError("n_train_per_class must be >= 1")

    @classmethod
    def from_split(cls, name: str, dataset: "SplitDataset") -> "DatasetSpec":
        """Describe a realized split; counts are per class of the normal side."""
        def count(part, label=0):
            return sum(1 for s in part if s.label == label)

        names = sorted({s.class_name or ("anomalous" if s.label else "normal")
                        for s in dataset.all_samples()})
        return cls(
            name=name,
            n_train_per_class=count(dataset.train),
            n_calibration=count(dataset.calibration),
            n_test=count(dataset.test),
            class_names=tuple(names),
        )


ONE_SHOT = "one-shot"
LADDER_DENOMINATORS = (1, 2, 4, 8, 16, 32, 64, 128)


@dataclass(frozen=True)
class RatioRung:
    label: str
    denominator: int | None  # None marks the one-shot rung
    anomaly_count: int
    clamped: bool = False

    @property
    def is_one_shot(self) -> bool:
        return self.denominator is None


@dataclass(frozen=True)
class RatioLadder:
    rungs: tuple[RatioRung, ...]

    def __iter__(self):
        return iter(self.rungs)

    def __len__(self):
        return len(self.rungs)

    def labels(self):
        return [r.label for r in self.rungs]

    def select(self, labels) -> "RatioLadder":
        """Subset of rungs by label, keeping ladder order."""
        wanted = set(labels)
        unknown = wanted - set(self.labels())
        if unknown:
            raise DataValidationError(f"unknown ladder rungs: {sorted(unknown)}")
        return RatioLadder(tuple(r for r in self.rungs if r.label in wanted))


def round_half_away(x: float) -> int:
    """Round to nearest integer, halves away from zero (162.5 -> 163)."""
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def ladder_counts(n_train_per_class: int) -> RatioLadder:
    """Anomaly counts for the standard positive-ratio ladder.

    Counts are round-half-away-from-zero of N/a; the one-shot rung always has
    a single anomaly. Rungs that would round to zero are clamped to 1 and
    flagged.
    """
    if n_train_per_class < 1:
        raise DataValidationError("n_train_per_class must be >= 1")
    rungs = []
    for denom in LADDER_DENOMINATORS:
        count = round_half_away(n_train_per_class / denom)
        clamped = count < 1
        if clamped:
            count = 1
            warnings.warn(f"rung 1/{denom} clamped to 1 anomaly (N={n_train_per_class})")
        rungs.append(RatioRung(f"1/{denom}", denom, count, clamped))
    rungs.append(RatioRung(ONE_SHOT, None, 1))
    return RatioLadder(tuple(rungs))


def _decode_image(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        mode = "L" if img.mode in ("L", "I", "I;16", "1") else "RGB"
        arr = np.asarray(img.convert(mode), dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


@dataclass(frozen=True)
class SkipRecord:
    path: str
    reason: str


def ingest_folder(root_path, manifest: str | None = "manifest.csv"):
    """Load a dataset from ``root/{normal,anomalous}/`` or a manifest file.

    Returns (samples, skips). Samples are ordered by path; files that fail to
    decode become skip records with a warning rather than an error.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise ConfigurationError(f"dataset root does not exist: {root}")

    entries: list[tuple[str, int]] = []
    manifest_path = root / manifest if manifest else None
    if manifest_path is not None and manifest_path.is_file():
        with open(manifest_path, newline="") as fh:
            for row in csv.DictReader(fh):
                entries.append((row["path"], int(row["label"])))
    else:
        for sub, label in (("normal", 0), ("anomalous", 1)):
            subdir = root / sub
            if not subdir.is_dir():
                raise ConfigurationError(f"missing {sub}/ directory under {root}")
            for p in sorted(subdir.iterdir()):
                if p.suffix.lower() in IMAGE_EXTENSIONS:
                    entries.append((str(p.relative_to(root)), label))
    entries.sort(key=lambda e: e[0])

    samples, skips = [], []
    for rel_path, label in entries:
        path = root / rel_path
        if not path.is_file():
            skips.append(SkipRecord(rel_path, "missing file"))
            warnings.warn(f"skipping {rel_path}: missing file")
            continue
        try:
            pixels = _decode_image(path)
            samples.append(ImageSample(id=rel_path, pixels=pixels, label=label))
        except Exception as exc:
            skips.append(SkipRecord(rel_path, f"decode error: {exc}"))
            warnings.warn(f"skipping {rel_path}: {exc}")
    logger.info("ingested %d samples (%d skipped) from %s", len(samples), len(skips), root)
    return samples, skips


@dataclass(frozen=True)
class SplitDataset:
    train: tuple[ImageSample, ...]
    calibration: tuple[ImageSample, ...]
    test: tuple[ImageSample, ...]
    seed: int

    def all_samples(self):
        return list(self.train) + list(self.calibration) + list(self.test)


def split_sizes(n: int, ratios=SPLIT_RATIOS) -> tuple[int, int, int]:
    """Per-class split sizes: round(n * ratio) for calibration/test, remainder to train."""
    n_cal = round_half_away(n * ratios[1])
    n_test = round_half_away(n * ratios[2])
    return n - n_cal - n_test, n_cal, n_test


def split_dataset(samples, ratios=SPLIT_RATIOS, seed: int = 0) -> SplitDataset:
    """Stratified train/calibration/test split, deterministic per seed."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataValidationError(f"split ratios must sum to 1, got {ratios}")
    by_class: dict[int, list[ImageSample]] = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)

    out = {Split.TRAIN: [], Split.CALIBRATION: [], Split.TEST: []}
    for label in sorted(by_class):
        members = by_class[label]
        if len(members) < 3:
            raise DataValidationError(f"class {label} has fewer than 3 samples")
        n_train, n_cal, n_test = split_sizes(len(members), ratios)
        rng = np.random.default_rng((seed, 100 + label))
        order = rng.permutation(len(members))
        for pos, idx in enumerate(order):
            if pos < n_train:
                split = Split.TRAIN
            elif pos < n_train + n_cal:
                split = Split.CALIBRATION
            else:
                split = Split.TEST
            out[split].append(replace(members[idx], split=split))
    for part in out.values():
        part.sort(key=lambda s: s.id)
    return SplitDataset(
        train=tuple(out[Split.TRAIN]),
        calibration=tuple(out[Split.CALIBRATION]),
        test=tuple(out[Split.TEST]),
        seed=seed,
    )


def subsample_anomalies(train_samples, count: int, seed: int):
    """Keep all normal samples and exactly ``count`` seeded-random anomalies.

    The permutation is drawn once from the sorted anomaly ids, so for a fixed
    seed the subset at a smaller count is contained in every larger one.
    """
    anomalies = sorted((s for s in train_samples if s.label == 1), key=lambda s: s.id)
    if count > len(anomalies):
        raise DataValidationError(f"requested {count} anomalies, only {len(anomalies)} available")
    rng = np.random.default_rng((seed, 200))
    order = rng.permutation(len(anomalies))
    keep = {anomalies[i].id for i in order[:count]}
    return [s for s in train_samples if s.label == 0 or s.id in keep]


def save_splits(path, dataset: SplitDataset):
    """Persist the split assignment as splits.json keyed by sample id."""
    payload = {
        "seed": dataset.seed,
        "assignments": {
            s.id: s.split.value for s in dataset.all_samples()
        },
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_splits(path) -> dict[str, Split]:
    payload = json.loads(Path(path).read_text())
    return {sid: Split(name) for sid, name in payload["assignments"].items()}
