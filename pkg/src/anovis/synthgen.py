"""Deterministic synthetic imbalanced-vision datasets.

Normal images are smooth noise textures with a few weak bright spots; an
anomalous image additionally carries a defect (bright blob, stripe, or one of
several defect styles in the multi-class variant) whose position is recorded
so localisation can be checked against ground truth. Everything derives from
``numpy`` generators seeded per image id, so regeneration is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import ImageSample
from .errors import DataValidationError

BRIGHT_BLOB = "bright-blob"
STRIPE_DEFECT = "stripe-defect"
MULTI_CLASS = "multi-class"

# Style cycle for multi-class generation; class j > 0 uses _DEFECT_STYLES[(j-1) % 3].
_DEFECT_STYLES = (BRIGHT_BLOB, STRIPE_DEFECT, "dark-blob")


@dataclass(frozen=True)
class SynthSpec:
    image_size: tuple[int, int] = (64, 64)
    n_per_class: int = 394
    noise_level: float = 0.05
    anomaly_kind: str = BRIGHT_BLOB
    n_classes: int = 2  # used by the multi-class kind
    seed: int = 0
    # Defect appearance; the ranges are wide on purpose so that a single
    # anomalous example does not reveal the whole defect family, while the
    # center box keeps defects of different images overlapping enough for
    # raw-pixel neighbours to be meaningful.
    contrast_range: tuple[float, float] = (0.22, 0.45)
    radius_range: tuple[float, float] = (4.0, 6.0)
    center_box: tuple[float, float] = (0.375, 0.625)
    brightness_jitter: float = 0.015
    distractor_contrast: float = 0.08
    n_distractors: int = 2

    def __post_init__(self):
        if self.n_per_class < 4:
            raise DataValidationError("n_per_class must be >= 4")
        if self.noise_level < 0:
            raise DataValidationError("noise_level must be >= 0")
        if self.anomaly_kind not in (BRIGHT_BLOB, STRIPE_DEFECT, MULTI_CLASS):
            raise DataValidationError(f"unknown anomaly kind: {self.anomaly_kind}")
        if self.anomaly_kind == MULTI_CLASS and self.n_classes < 2:
            raise DataValidationError("multi-class generation needs n_classes >= 2")


def _texture(rng, shape, noise_level, brightness_jitter):
    smooth = gaussian_filter(rng.standard_normal(shape), sigma=2.5, truncate=4.0)
    smooth /= max(smooth.std(), 1e-9)
    base = 0.45 + rng.uniform(-brightness_jitter, brightness_jitter)
    return base + noise_level * smooth


def _add_blob(img, rng, spec, sign=1.0, record=None):
    h, w = img.shape
    lo, hi = spec.center_box
    cy = rng.uniform(lo * h, hi * h)
    cx = rng.uniform(lo * w, hi * w)
    radius = rng.uniform(*spec.radius_range)
    contrast = rng.uniform(*spec.contrast_range)
    yy, xx = np.mgrid[0:h, 0:w]
    bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius**2))
    img += sign * contrast * bump
    if record is not None:
        record.update(
            center=(float(cy), float(cx)),
            bbox=(
                max(0.0, cy - 2 * radius),
                max(0.0, cx - 2 * radius),
                min(float(h), cy + 2 * radius),
                min(float(w), cx + 2 * radius),
            ),
            contrast=float(sign * contrast),
            radius=float(radius),
        )


def _add_stripe(img, rng, spec, record=None):
    h, w = img.shape
    contrast = rng.uniform(*spec.contrast_range)
    width = rng.uniform(1.5, 3.0)
    x0 = rng.uniform(0.25 * w, 0.75 * w)
    xx = np.arange(w, dtype=float)
    profile = np.exp(-((xx - x0) ** 2) / (2.0 * width**2))
    img += contrast * profile[None, :]
    if record is not None:
        record.update(
            center=(h / 2.0, float(x0)),
            bbox=(0.0, max(0.0, x0 - 2 * width), float(h), min(float(w), x0 + 2 * width)),
            contrast=float(contrast),
            width=float(width),
        )


def _add_distractors(img, rng, spec):
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(spec.n_distractors):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        radius = rng.uniform(1.5, 3.0)
        contrast = rng.uniform(0.3, 1.0) * spec.distractor_contrast
        img += contrast * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius**2))


def _class_names(spec: SynthSpec):
    if spec.anomaly_kind == MULTI_CLASS:
        return ["normal"] + [
            f"defect-{_DEFECT_STYLES[(j - 1) % len(_DEFECT_STYLES)]}-{j}"
            for j in range(1, spec.n_classes)
        ]
    return ["normal", spec.anomaly_kind]


def generate(spec: SynthSpec) -> list[ImageSample]:
    """Generate ``n_per_class`` images for every class in the spec.

    Anomalous samples carry their defect geometry in ``sample.meta`` so tests
    can check heatmap peaks against ground truth.
    """
    names = _class_names(spec)
    samples = []
    for class_id, class_name in enumerate(names):
        style = None
        if class_id > 0:
            style = (
                spec.anomaly_kind
                if spec.anomaly_kind != MULTI_CLASS
                else _DEFECT_STYLES[(class_id - 1) % len(_DEFECT_STYLES)]
            )
        for i in range(spec.n_per_class):
            rng = np.random.default_rng((spec.seed, class_id, i))
            img = _texture(rng, spec.image_size, spec.noise_level, spec.brightness_jitter)
            _add_distractors(img, rng, spec)
            meta: dict = {}
            if style is not None:
                record: dict = {"kind": style}
                if style == BRIGHT_BLOB:
                    _add_blob(img, rng, spec, sign=1.0, record=record)
                elif style == "dark-blob":
                    _add_blob(img, rng, spec, sign=-1.0, record=record)
                elif style == STRIPE_DEFECT:
                    _add_stripe(img, rng, spec, record=record)
                meta["defect"] = record
            pixels = np.clip(img, 0.0, 1.0).astype(np.float32)[:, :, None]
            samples.append(
                ImageSample(
                    id=f"{class_name}-{i:05d}",
                    pixels=pixels,
                    label=0 if class_id == 0 else 1,
                    class_name=class_name,
                    meta=meta,
                )
            )
    return samples


def write_dataset(samples, root) -> Path:
    """Write samples in the ``root/{normal,anomalous}/`` layout plus ground truth."""
    from PIL import Image

    root = Path(root)
    (root / "normal").mkdir(parents=True, exist_ok=True)
    (root / "anomalous").mkdir(parents=True, exist_ok=True)
    ground_truth = {}
    for s in samples:
        sub = "normal" if s.label == 0 else "anomalous"
        arr = (np.clip(s.pixels[:, :, 0], 0, 1) * 255).round().astype(np.uint8)
        Image.fromarray(arr, mode="L").save(root / sub / f"{s.id}.png")
        if s.meta.get("defect"):
            ground_truth[f"{sub}/{s.id}.png"] = s.meta["defect"]
    (root / "ground_truth.json").write_text(json.dumps(ground_truth, indent=2, sort_keys=True))
    return root
