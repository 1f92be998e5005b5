"""Full-resolution damage heatmaps from receptive-field maps.

Each field cell deposits its value as a 2D Gaussian at the cell's
receptive-field center; the sum over cells is the heatmap. Rendering clips
to a [min, max/4] display range so strong defects stay saturated instead of
washing the palette out.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ImageSample
from .errors import DataValidationError
from .fcdd import FieldMap, resize_bilinear

DISPLAY_QUARTILE = 0.25


@dataclass(frozen=True)
class DisplayRange:
    lo: float
    hi: float
    degenerate: bool = False

    def as_tuple(self):
        return (self.lo, self.hi)


@dataclass
class Heatmap:
    values: np.ndarray  # h x w
    display_range: DisplayRange
    source_field: FieldMap | None = None


def gaussian2d(m1: float, m2: float, sigma: float, grid: tuple[int, int]) -> np.ndarray:
    """Normalised 2D Gaussian centred at (m1, m2) on an h x w pixel grid.

    m1 indexes rows and m2 columns; the 1/(2*pi*sigma^2) factor makes the
    continuous mass 1, so a fine enough grid sums to ~1.
    """
    if sigma <= 0:
        raise DataValidationError(f"sigma must be > 0, got {sigma}")
    h, w = grid
    rows = np.arange(h, dtype=float)[:, None]
    cols = np.arange(w, dtype=float)[None, :]
    norm = 1.0 / (2.0 * np.pi * sigma * sigma)
    return norm * np.exp(-((rows - m1) ** 2 + (cols - m2) ** 2) / (2.0 * sigma * sigma))


def _axis_kernel(centers, size, sigma):
    # 1D factor of the separable Gaussian; outer product restores gaussian2d.
    grid = np.arange(size, dtype=float)[None, :]
    norm = 1.0 / np.sqrt(2.0 * np.pi * sigma * sigma)
    return norm * np.exp(-((grid - centers[:, None]) ** 2) / (2.0 * sigma * sigma))


def upsample_field(field: FieldMap, sigma: float | None = None, out_size=None) -> Heatmap:
    """Accumulate value * Gaussian(center) over every field cell.

    sigma defaults to half the field stride so neighbouring kernels overlap
    without blurring single-cell peaks away. Centers outside the image are
    clamped to the border with a warning.
    """
    geom = field.geometry
    if sigma is None:
        sigma = geom.stride / 2.0
    if sigma <= 0:
        raise DataValidationError(f"sigma must be > 0, got {sigma}")
    h, w = out_size if out_size is not None else geom.input_size
    u, v = field.values.shape
    ys, xs = geom.centers(u, v)
    if (ys < 0).any() or (ys > h - 1).any() or (xs < 0).any() or (xs > w - 1).any():
        warnings.warn("field centers outside the image; clamping to border")
        ys = np.clip(ys, 0, h - 1)
        xs = np.clip(xs, 0, w - 1)
    # Sum_d d * G2(c1(d), c2(d)) via the separable form: rows^T * D * cols.
    row_kernel = _axis_kernel(ys, h, sigma)  # u x h
    col_kernel = _axis_kernel(xs, w, sigma)  # v x w
    values = row_kernel.T @ field.values.astype(float) @ col_kernel
    return Heatmap(values=values, display_range=display_range(values), source_field=field)


def display_range(values, quartile: float = DISPLAY_QUARTILE) -> DisplayRange:
    """(min, max * quartile); degenerate inputs get a tiny synthetic span."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise DataValidationError("display_range needs at least one value")
    lo = float(values.min())
    hi = float(values.max() * quartile)
    if hi <= lo:
        eps = max(1e-6, abs(lo) * 1e-6)
        return DisplayRange(lo, lo + eps, degenerate=True)
    return DisplayRange(lo, hi)


def _colorize(norm_values):
    from matplotlib import cm

    return cm.jet(np.clip(norm_values, 0.0, 1.0))[:, :, :3]


def render_overlay(image: ImageSample, heatmap: Heatmap, out_path, alpha: float = 0.55) -> Path:
    """Blend the colorized heatmap (blue = low, red = high) over the image."""
    from PIL import Image

    h, w = image.pixels.shape[:2]
    values = heatmap.values
    if values.shape != (h, w):
        warnings.warn(f"heatmap {values.shape} resized to image {(h, w)}")
        values = resize_bilinear(values[:, :, None], (h, w))[:, :, 0]
    lo, hi = heatmap.display_range.as_tuple()
    norm = (np.clip(values, lo, hi) - lo) / (hi - lo)
    color = _colorize(norm)
    gray = image.pixels.mean(axis=2)
    base = np.repeat(gray[:, :, None], 3, axis=2)
    blended = (1.0 - alpha) * base + alpha * color
    out = (np.clip(blended, 0, 1) * 255).round().astype(np.uint8)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(out, mode="RGB").save(out_path)
    return out_path


@dataclass
class ScoreHistogram:
    edges: np.ndarray  # bins + 1
    count_normal: np.ndarray
    count_anomalous: np.ndarray

    def to_csv(self, path):
        lines = ["bin_lo,bin_hi,count_normal,count_anomalous"]
        for i in range(len(self.count_normal)):
            lines.append(
                f"{float(self.edges[i])!r},{float(self.edges[i + 1])!r},"
                f"{int(self.count_normal[i])},{int(self.count_anomalous[i])}"
            )
        Path(path).write_text("\n".join(lines) + "\n")

    def plot(self, path, title="anomaly scores"):
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        centers = 0.5 * (self.edges[:-1] + self.edges[1:])
        width = np.diff(self.edges)
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.bar(centers, self.count_normal, width=width, alpha=0.6, label="normal")
        ax.bar(centers, self.count_anomalous, width=width, alpha=0.6, label="anomalous")
        ax.set_xlabel("anomaly score")
        ax.set_ylabel("count")
        ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        return Path(path)


def score_histogram(score_rows, bins: int = 50) -> ScoreHistogram:
    """Per-class histogram over shared bin edges spanning the pooled range."""
    scores = np.array([r.score for r in score_rows], dtype=float)
    labels = np.array([r.label for r in score_rows])
    if scores.size == 0:
        raise DataValidationError("score_histogram needs at least one score")
    if len(set(labels.tolist())) < 2:
        warnings.warn("only one class present; emitting a single-series histogram")
    lo, hi = float(scores.min()), float(scores.max())
    if hi <= lo:
        hi = lo + max(1e-9, abs(lo) * 1e-9)
    edges = np.linspace(lo, hi, bins + 1)
    normal, _ = np.histogram(scores[labels == 0], bins=edges)
    anomalous, _ = np.histogram(scores[labels == 1], bins=edges)
    return ScoreHistogram(edges=edges, count_normal=normal, count_anomalous=anomalous)


def save_heatmap(base_path, heatmap: Heatmap):
    """Portable dump: raw little-endian values plus a JSON header."""
    base = Path(base_path)
    base.parent.mkdir(parents=True, exist_ok=True)
    values = np.ascontiguousarray(heatmap.values, dtype="<f4")
    header = {
        "shape": list(values.shape),
        "dtype": "<f4",
        "display_range": [heatmap.display_range.lo, heatmap.display_range.hi],
        "degenerate": heatmap.display_range.degenerate,
    }
    base.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True))
    base.with_suffix(".bin").write_bytes(values.tobytes())
    return base


def load_heatmap(base_path) -> Heatmap:
    base = Path(base_path)
    header = json.loads(base.with_suffix(".json").read_text())
    values = np.frombuffer(base.with_suffix(".bin").read_bytes(), dtype=header["dtype"])
    values = values.reshape(header["shape"]).astype(float)
    lo, hi = header["display_range"]
    return Heatmap(values=values, display_range=DisplayRange(lo, hi, header["degenerate"]))
