"""One-class detector: robust losses on receptive-field maps and training.

The detector is a small fully convolutional network whose single-channel
output map is penalised with the pseudo-Huber based losses below: normal
images push the map towards zero, anomalous images push its mean up through
a -log(1 - exp(-mean)) term. An image's anomaly score is the sum of the
pseudo-Huber map.

Pretrained deep backbones can be plugged in through ``register_backbone``;
nothing in this package requires one.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataValidationError, TrainingDiverged
from .nn import Adam, Conv2d, LeakyReLU, Sequential

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-12


# ---------------------------------------------------------------------------
# losses


def pseudo_huber(x):
    """Elementwise sqrt(x^2 + 1) - 1: quadratic near zero, linear for large x."""
    x = np.asarray(x)
    return np.sqrt(x * x + 1.0) - 1.0


def pseudo_huber_grad(x):
    x = np.asarray(x)
    return x / np.sqrt(x * x + 1.0)


def exp_neg_huber(x):
    """Companion weight exp(-pseudo_huber(x)) in (0, 1]."""
    return np.exp(-pseudo_huber(x))


def _as_map_array(field_maps):
    if isinstance(field_maps, np.ndarray) and field_maps.ndim == 3:
        return field_maps
    rows = [m.values if isinstance(m, FieldMap) else np.asarray(m) for m in field_maps]
    return np.stack(rows)


def _map_means(field_maps):
    maps = _as_map_array(field_maps)
    return pseudo_huber(maps).mean(axis=(1, 2)), maps


def deep_svdd_loss(field_maps, labels):
    """Cross-entropy over the per-map weight exp(-mean pseudo-Huber)."""
    means, _ = _map_means(field_maps)
    a = np.asarray(labels, dtype=means.dtype)
    if a.shape[0] != means.shape[0]:
        raise DataValidationError("field_maps and labels must have equal length")
    ell = np.exp(-means)
    log_ell = np.log(np.clip(ell, LOG_CLAMP, None))
    log_one_minus = np.log(np.clip(1.0 - ell, LOG_CLAMP, None))
    return float(-np.mean((1.0 - a) * log_ell + a * log_one_minus))


def fcdd_loss(field_maps, labels):
    """Mean of (1-a) * m - a * log(1 - exp(-m)) with m the map's pseudo-Huber mean.

    With no anomalous labels this reduces exactly to the mean of the per-map
    means, the unsupervised objective.
    """
    means, _ = _map_means(field_maps)
    a = np.asarray(labels, dtype=means.dtype)
    if a.shape[0] != means.shape[0]:
        raise DataValidationError("field_maps and labels must have equal length")
    anom = -np.log(np.clip(-np.expm1(-means), LOG_CLAMP, None))
    return float(np.mean((1.0 - a) * means + a * anom))


def fcdd_loss_and_grad(field_maps, labels):
    """(loss, dloss/dmap, saturation count) for the deeper-FCDD objective.

    The gradient is with respect to the raw map values; the saturation count
    is how many anomalous maps hit the log clamp (mean practically zero).
    """
    means, maps = _map_means(field_maps)
    a = np.asarray(labels, dtype=means.dtype)
    n = means.shape[0]
    one_minus_exp = -np.expm1(-means)
    saturated = int(np.sum((a > 0) & (one_minus_exp < LOG_CLAMP)))
    clipped = np.clip(one_minus_exp, LOG_CLAMP, None)
    loss = float(np.mean((1.0 - a) * means - a * np.log(clipped)))
    # d/dm of the anomalous term is -exp(-m)/(1-exp(-m)); zero where clamped.
    danom = np.where(one_minus_exp < LOG_CLAMP, 0.0, np.exp(-means) / clipped)
    dmean = ((1.0 - a) - a * danom) / n
    uv = maps.shape[1] * maps.shape[2]
    grad = (dmean / uv)[:, None, None] * pseudo_huber_grad(maps)
    return loss, grad, saturated


def deep_svdd_loss_and_grad(field_maps, labels):
    """(loss, dloss/dmap) for the cross-entropy form."""
    means, maps = _map_means(field_maps)
    a = np.asarray(labels, dtype=means.dtype)
    n = means.shape[0]
    ell = np.exp(-means)
    one_minus = 1.0 - ell
    clipped = np.clip(one_minus, LOG_CLAMP, None)
    loss = float(-np.mean((1.0 - a) * np.log(np.clip(ell, LOG_CLAMP, None)) + a * np.log(clipped)))
    danom = np.where(one_minus < LOG_CLAMP, 0.0, ell / clipped)
    dmean = ((1.0 - a) - a * danom) / n
    uv = maps.shape[1] * maps.shape[2]
    grad = (dmean / uv)[:, None, None] * pseudo_huber_grad(maps)
    return loss, grad


def anomaly_score(huber_map) -> float:
    """Sum of an already pseudo-Huber-transformed map."""
    values = huber_map.values if isinstance(huber_map, FieldMap) else np.asarray(huber_map)
    return float(values.sum())


# ---------------------------------------------------------------------------
# field geometry and backbone


@dataclass(frozen=True)
class FieldGeometry:
    """Receptive-field centers: cell (i, j) sits at offset + stride * (i, j)."""

    offset: float
    stride: float
    input_size: tuple[int, int]

    def centers(self, u: int, v: int):
        ys = self.offset + self.stride * np.arange(u, dtype=float)
        xs = self.offset + self.stride * np.arange(v, dtype=float)
        return ys, xs


@dataclass
class FieldMap:
    values: np.ndarray  # u x v
    geometry: FieldGeometry

    def __post_init__(self):
        if not np.isfinite(self.values).all():
            raise DataValidationError("field map has non-finite values")


class ToyFCN:
    """Small stride-8 FCN: three downsampling conv blocks, one refining block,
    and a 1x1 head to the single-channel field.

    The fixed per-layer gain compensates for training from scratch under the
    fine-tuning-sized learning rate of the standard protocol (see Conv2d).
    """

    name = "toy-fcn"

    def __init__(self, input_size=(64, 64), in_channels=1, widths=(8, 16, 32, 32), seed=0, gain=60.0):
        h, w = input_size
        if h % 8 or w % 8:
            raise DataValidationError(f"input size must be divisible by 8, got {input_size}")
        self.input_size = (h, w)
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self.seed = seed
        self.gain = gain
        rng = np.random.default_rng((seed, 17))
        layers = []
        c_prev = in_channels
        for i, c in enumerate(self.widths):
            stride = 2 if i < 3 else 1
            layers += [
                Conv2d(c_prev, c, kernel=3, stride=stride, pad=1, rng=rng, gain=gain),
                LeakyReLU(0.1),
            ]
            c_prev = c
        layers.append(
            Conv2d(c_prev, 1, kernel=1, stride=1, pad=0, weight_scale=0.01, rng=rng, gain=gain)
        )
        self.net = Sequential(layers)
        self.field_size = (h // 8, w // 8)

    def field_geometry(self) -> FieldGeometry:
        # 3x3/pad-1 blocks keep the first receptive-field center at pixel 0;
        # three stride-2 stages give an effective stride of 8.
        return FieldGeometry(offset=0.0, stride=8.0, input_size=self.input_size)

    def forward(self, x, train=False):
        out = self.net.forward(np.ascontiguousarray(x, dtype=np.float32), train=train)
        return out[:, :, :, 0]

    def backward(self, grad_maps):
        self.net.backward(np.ascontiguousarray(grad_maps[:, :, :, None], dtype=np.float32))

    def params(self):
        return self.net.params()

    def zero_grad(self):
        self.net.zero_grad()

    def state_arrays(self):
        return self.net.state_arrays()

    def load_state_arrays(self, arrays):
        self.net.load_state_arrays(arrays)

    def config(self):
        return {
            "backbone": self.name,
            "input_size": list(self.input_size),
            "in_channels": self.in_channels,
            "widths": list(self.widths),
            "seed": self.seed,
            "gain": self.gain,
            "field_size": list(self.field_size),
        }


_BACKBONES = {}


def register_backbone(name, factory):
    """Register a backbone factory; pretrained plug-ins hook in here."""
    _BACKBONES[name] = factory


def create_backbone(name, input_size, in_channels=1, seed=0, **kwargs):
    if name not in _BACKBONES:
        raise DataValidationError(f"unknown backbone {name!r}; registered: {sorted(_BACKBONES)}")
    return _BACKBONES[name](input_size=input_size, in_channels=in_channels, seed=seed, **kwargs)


register_backbone(ToyFCN.name, ToyFCN)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    batch_size: int = 32
    epochs: int = 60
    seed: int = 0
    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 1
    backbone: str = ToyFCN.name

    def __post_init__(self):
        if self.lr <= 0:
            raise DataValidationError("lr must be > 0")
        if self.epochs < 1:
            raise DataValidationError("epochs must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    saturation_count: int


@dataclass
class TrainingLog:
    epochs: list[EpochRecord] = field(default_factory=list)

    def to_csv(self, path):
        lines = ["epoch,loss,saturation_count"]
        lines += [f"{e.epoch},{e.loss!r},{e.saturation_count}" for e in self.epochs]
        Path(path).write_text("\n".join(lines) + "\n")

    @property
    def final_loss(self):
        return self.epochs[-1].loss if self.epochs else float("nan")


def resize_bilinear(img, out_size):
    """Half-pixel-aligned bilinear resize of an h x w x c array."""
    h, w = img.shape[:2]
    out_h, out_w = out_size
    if (h, w) == (out_h, out_w):
        return img
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return (top * (1 - fy) + bottom * fy).astype(img.dtype)


def prepare_inputs(samples, input_size, in_channels=1):
    """Stack samples into an (n, h, w, c) float32 batch, resizing if needed."""
    batch = []
    resized = False
    for s in samples:
        px = s.pixels
        if px.shape[:2] != tuple(input_size):
            px = resize_bilinear(px, input_size)
            resized = True
        if px.shape[2] != in_channels:
            if in_channels == 1:
                px = px.mean(axis=2, keepdims=True)
            else:
                px = np.repeat(px[:, :, :1], in_channels, axis=2)
        batch.append(px)
    if resized:
        warnings.warn(f"resized inputs to {tuple(input_size)}")
    return np.ascontiguousarray(np.stack(batch), dtype=np.float32)


def train_detector(samples, config: TrainConfig, backbone=None):
    """Minimise the deeper-FCDD loss with Adam; returns (backbone, log).

    Deterministic for a fixed seed: parameter init, batch order, and every
    update depend only on (samples, config).
    """
    samples = list(samples)
    if not samples:
        raise DataValidationError("training set is empty")
    labels_all = np.array([s.label for s in samples], dtype=np.float64)
    if not (labels_all == 0).any():
        raise DataValidationError("training set needs at least one normal sample")

    if backbone is None:
        backbone = create_backbone(
            config.backbone, config.input_size, config.in_channels, seed=config.seed
        )
    x_all = prepare_inputs(samples, config.input_size, config.in_channels)
    opt = Adam(backbone.params(), lr=config.lr, beta1=config.beta1, beta2=config.beta2)
    rng = np.random.default_rng((config.seed, 300))
    log = TrainingLog()
    n = len(samples)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        epoch_saturated = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = np.ascontiguousarray(x_all[idx])
            maps = backbone.forward(xb, train=True)
            loss, grad, saturated = fcdd_loss_and_grad(maps.astype(np.float64), labels_all[idx])
            if not np.isfinite(loss):
                batch_ids = [samples[i].id for i in idx]
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}", batch_ids=batch_ids, epoch=epoch
                )
            backbone.zero_grad()
            backbone.backward(grad.astype(np.float32))
            opt.step()
            epoch_loss += loss * len(idx)
            epoch_saturated += saturated
        log.epochs.append(EpochRecord(epoch, epoch_loss / n, epoch_saturated))
    logger.info("trained %d epochs, final loss %.6f", config.epochs, log.final_loss)
    return backbone, log


@dataclass(frozen=True)
class ScoreRow:
    id: str
    score: float
    label: int


def forward_field_maps(backbone, samples, config: TrainConfig, batch_size=64):
    """Raw field maps for samples, in order, as one (n, u, v) array."""
    outs = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        x = prepare_inputs(chunk, config.input_size, config.in_channels)
        outs.append(backbone.forward(x))
    return np.concatenate(outs) if outs else np.zeros((0,) + backbone.field_size)


def score_dataset(backbone, samples, config: TrainConfig):
    """One anomaly score per sample: the summed pseudo-Huber field."""
    samples = list(samples)
    maps = forward_field_maps(backbone, samples, config)
    huber = pseudo_huber(maps.astype(np.float64))
    scores = huber.sum(axis=(1, 2))
    return [ScoreRow(s.id, float(v), s.label) for s, v in zip(samples, scores)]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(ckpt_dir, backbone, config: TrainConfig):
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    arrays = backbone.state_arrays()
    manifest = {
        "model": backbone.config(),
        "train": {
            "lr": config.lr,
            "beta1": config.beta1,
            "beta2": config.beta2,
            "batch_size": config.batch_size,
            "epochs": config.epochs,
            "seed": config.seed,
        },
        "tensors": [{"name": n, "shape": list(a.shape), "dtype": str(a.dtype)} for n, a in arrays],
    }
    (ckpt_dir / "config.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    with open(ckpt_dir / "weights.bin", "wb") as fh:
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a).tobytes())
    return ckpt_dir


def load_checkpoint(ckpt_dir):
    """Rebuild (backbone, manifest) from a checkpoint directory."""
    ckpt_dir = Path(ckpt_dir)
    config_path = ckpt_dir / "config.json"
    if not config_path.is_file():
        raise DataValidationError(f"no checkpoint at {ckpt_dir}")
    manifest = json.loads(config_path.read_text())
    model_cfg = manifest["model"]
    backbone = create_backbone(
        model_cfg["backbone"],
        tuple(model_cfg["input_size"]),
        model_cfg.get("in_channels", 1),
        seed=model_cfg.get("seed", 0),
        widths=tuple(model_cfg.get("widths", (8, 16, 32, 32))),
        gain=model_cfg.get("gain", 1.0),
    )
    raw = (ckpt_dir / "weights.bin").read_bytes()
    arrays, offset = [], 0
    for meta in manifest["tensors"]:
        shape = tuple(meta["shape"])
        dtype = np.dtype(meta["dtype"])
        size = int(np.prod(shape)) * dtype.itemsize
        arr = np.frombuffer(raw[offset : offset + size], dtype=dtype).reshape(shape)
        arrays.append((meta["name"], arr.copy()))
        offset += size
    backbone.load_state_arrays(arrays)
    return backbone, manifest
