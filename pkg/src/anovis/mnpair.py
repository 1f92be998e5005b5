"""Contrastive damage representation: N-pair / MN-pair losses and training.

Similarities are cosines of L2-normalised embeddings divided by a temperature
before entering the softmax ratio. The MN-pair loss weights the summed
positive exponentials by ``pi`` against ``1 - pi`` for the negatives; with a
single positive and pi = 0.5 it collapses to the plain N-pair (InfoNCE) loss.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import DataValidationError, TrainingDiverged
from .fcdd import prepare_inputs
from .nn import Adam, Conv2d, Flatten, LayerNorm, LeakyReLU, Linear, Sequential

logger = logging.getLogger(__name__)


def _normalize(e):
    e = np.asarray(e, dtype=float)
    norm = np.linalg.norm(e)
    if norm == 0 or not np.isfinite(norm):
        raise DataValidationError("cannot normalise a zero or non-finite vector")
    return e / norm


def cosine_similarity(e1, e2) -> float:
    """Inner product of the L2-normalised vectors, in [-1, 1]."""
    return float(np.dot(_normalize(e1), _normalize(e2)))


def npair_loss_from_sims(sim_pos: float, sim_negs, tau: float = 0.3) -> float:
    """Softmax cross-entropy of the positive against the negatives."""
    s = np.concatenate(([sim_pos], np.asarray(sim_negs, dtype=float))) / tau
    return float(logsumexp(s) - s[0])


def mnpair_loss_from_sims(sim_pos, sim_negs, pi: float = 0.15, tau: float = 0.3) -> float:
    """-log of pi * sum(exp(s+)) over pi * sum(exp(s+)) + (1-pi) * sum(exp(s-))."""
    if not 0 < pi < 1:
        raise DataValidationError(f"pi must be in (0, 1), got {pi}")
    sp = np.asarray(sim_pos, dtype=float) / tau
    sn = np.asarray(sim_negs, dtype=float) / tau
    log_p = np.log(pi) + logsumexp(sp)
    log_q = np.log(1.0 - pi) + logsumexp(sn)
    return float(np.logaddexp(log_p, log_q) - log_p)


def npair_loss(anchor, positive, negatives, tau: float = 0.3) -> float:
    f_a = _normalize(anchor)
    sim_pos = float(f_a @ _normalize(positive))
    sim_negs = [float(f_a @ _normalize(n)) for n in negatives]
    return npair_loss_from_sims(sim_pos, sim_negs, tau)


def mnpair_loss(anchor, positives, negatives, pi: float = 0.15, tau: float = 0.3) -> float:
    f_a = _normalize(anchor)
    sim_pos = [float(f_a @ _normalize(p)) for p in positives]
    sim_negs = [float(f_a @ _normalize(n)) for n in negatives]
    return mnpair_loss_from_sims(sim_pos, sim_negs, pi, tau)


def _sim_grad(e_a, e_b, tau):
    """d(cos(e_a, e_b)/tau) with respect to both raw vectors."""
    f_a, f_b = _normalize(e_a), _normalize(e_b)
    dot = float(f_a @ f_b)
    g_a = (f_b - dot * f_a) / (np.linalg.norm(e_a) * tau)
    g_b = (f_a - dot * f_b) / (np.linalg.norm(e_b) * tau)
    return dot, g_a, g_b


def mnpair_loss_grad(anchor, positives, negatives, pi: float = 0.15, tau: float = 0.3):
    """(loss, g_anchor, g_positives, g_negatives) with respect to raw vectors."""
    anchor = np.asarray(anchor, dtype=float)
    positives = [np.asarray(p, dtype=float) for p in positives]
    negatives = [np.asarray(n, dtype=float) for n in negatives]
    sims_p, sims_n = [], []
    da_p, db_p, da_n, db_n = [], [], [], []
    for p in positives:
        dot, g_a, g_b = _sim_grad(anchor, p, tau)
        sims_p.append(dot / tau)
        da_p.append(g_a)
        db_p.append(g_b)
    for n in negatives:
        dot, g_a, g_b = _sim_grad(anchor, n, tau)
        sims_n.append(dot / tau)
        da_n.append(g_a)
        db_n.append(g_b)
    sp, sn = np.array(sims_p), np.array(sims_n)
    log_p = np.log(pi) + logsumexp(sp)
    log_q = np.log(1.0 - pi) + logsumexp(sn)
    loss = float(np.logaddexp(log_p, log_q) - log_p)
    ratio = 1.0 / (1.0 + np.exp(log_p - log_q))  # Q / (P + Q)
    w_pos = -ratio * np.exp(sp - logsumexp(sp))  # dloss/ds_j+
    w_neg = ratio * np.exp(sn - logsumexp(sn))  # dloss/ds_k-
    g_anchor = np.zeros_like(anchor)
    g_pos = []
    for w, g_a, g_b in zip(w_pos, da_p, db_p):
        g_anchor += w * g_a
        g_pos.append(w * g_b)
    g_neg = []
    for w, g_a, g_b in zip(w_neg, da_n, db_n):
        g_anchor += w * g_a
        g_neg.append(w * g_b)
    return loss, g_anchor, np.array(g_pos), np.array(g_neg)


def npair_loss_grad(anchor, positive, negatives, tau: float = 0.3):
    """(loss, g_anchor, g_positive, g_negatives); plain softmax cross-entropy."""
    anchor = np.asarray(anchor, dtype=float)
    dot_p, ga_p, gb_p = _sim_grad(anchor, positive, tau)
    sims = [dot_p / tau]
    grads = []
    for n in negatives:
        dot, g_a, g_b = _sim_grad(anchor, n, tau)
        sims.append(dot / tau)
        grads.append((g_a, g_b))
    s = np.array(sims)
    loss = float(logsumexp(s) - s[0])
    soft = np.exp(s - logsumexp(s))
    g_anchor = (soft[0] - 1.0) * ga_p
    g_positive = (soft[0] - 1.0) * gb_p
    g_negs = []
    for w, (g_a, g_b) in zip(soft[1:], grads):
        g_anchor += w * g_a
        g_negs.append(w * g_b)
    return loss, g_anchor, g_positive, np.array(g_negs)


# ---------------------------------------------------------------------------
# batches


@dataclass(frozen=True)
class MNBatch:
    anchor: int
    positives: tuple[int, ...]
    negatives: tuple[int, ...]


def _class_of(sample):
    return sample.class_name if sample.class_name is not None else str(sample.label)


def build_mn_batches(samples, m: int, n: int, n_batches: int, seed: int = 0):
    """Anchors cycle round-robin over classes large enough to supply M-1 positives."""
    if m < 2 or n < 2:
        raise DataValidationError("M and N must both be >= 2")
    by_class: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        by_class.setdefault(_class_of(s), []).append(i)
    if len(by_class) < 2:
        raise DataValidationError("need at least two classes for contrastive batches")
    eligible = []
    for name in sorted(by_class):
        if len(by_class[name]) >= m:
            eligible.append(name)
        else:
            warnings.warn(f"class {name!r} has fewer than M={m} samples; no anchors drawn")
    if not eligible:
        raise DataValidationError("no class is large enough to build MN batches")

    rng = np.random.default_rng((seed, 400))
    batches = []
    for b in range(n_batches):
        cls = eligible[b % len(eligible)]
        members = by_class[cls]
        anchor = int(members[rng.integers(len(members))])
        pool_pos = [i for i in members if i != anchor]
        positives = rng.choice(len(pool_pos), size=m - 1, replace=False)
        others = [i for name in sorted(by_class) if name != cls for i in by_class[name]]
        if len(others) < n - 1:
            raise DataValidationError(f"not enough out-of-class samples for N-1={n - 1} negatives")
        negatives = rng.choice(len(others), size=n - 1, replace=False)
        batches.append(
            MNBatch(
                anchor=anchor,
                positives=tuple(int(pool_pos[i]) for i in positives),
                negatives=tuple(int(others[i]) for i in negatives),
            )
        )
    return batches


# ---------------------------------------------------------------------------
# embedder


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.3
    pi: float = 0.15
    m: int = 4
    n: int = 8
    embedding_dim: int = 128
    epochs: int = 12
    batches_per_epoch: int = 48
    lr: float = 1e-3
    seed: int = 0
    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 1
    holdout_fraction: float = 0.15

    def __post_init__(self):
        if self.tau <= 0:
            raise DataValidationError("tau must be > 0")
        if not 0 < self.pi < 1:
            raise DataValidationError("pi must be in (0, 1)")


class ConvEncoder:
    """Three stride-2 conv blocks, then a normalised spatial-feature head.

    The conv grid is flattened rather than pooled: pooled channel profiles
    are nearly image-independent at init, which would start training at the
    collapsed-similarity fixed point of the contrastive loss."""

    def __init__(self, input_size=(64, 64), in_channels=1, embedding_dim=128, seed=0):
        rng = np.random.default_rng((seed, 23))
        widths = (8, 16, 32)
        layers = []
        c_prev = in_channels
        for c in widths:
            layers += [Conv2d(c_prev, c, kernel=3, stride=2, pad=1, rng=rng), LeakyReLU(0.1)]
            c_prev = c
        feat = (input_size[0] // 8) * (input_size[1] // 8) * c_prev
        layers += [Flatten(), LayerNorm(), Linear(feat, embedding_dim, rng=rng)]
        self.net = Sequential(layers)
        self.input_size = tuple(input_size)
        self.in_channels = in_channels
        self.embedding_dim = embedding_dim

    def forward(self, x, train=False):
        return self.net.forward(np.ascontiguousarray(x, dtype=np.float32), train=train)

    def backward(self, g):
        self.net.backward(np.ascontiguousarray(g, dtype=np.float32))

    def params(self):
        return self.net.params()

    def zero_grad(self):
        self.net.zero_grad()


@dataclass(frozen=True)
class EmbeddingPoint:
    id: str
    e: np.ndarray
    f: np.ndarray  # unit-norm version of e
    label: str


@dataclass
class EmbedderResult:
    encoder: ConvEncoder
    points: list[EmbeddingPoint]
    epoch_losses: list[float] = field(default_factory=list)
    holdout_margin: float = float("nan")


def _holdout_split(samples, fraction, seed):
    by_class: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        by_class.setdefault(_class_of(s), []).append(i)
    rng = np.random.default_rng((seed, 500))
    held = set()
    for name in sorted(by_class):
        members = by_class[name]
        k = max(1, int(round(fraction * len(members))))
        order = rng.permutation(len(members))
        held.update(members[i] for i in order[:k])
    train_idx = [i for i in range(len(samples)) if i not in held]
    return train_idx, sorted(held)


def similarity_margin(points_by_label):
    """Mean intra-class cosine minus mean inter-class cosine."""
    labels = sorted(points_by_label)
    mats = {lab: np.stack([_normalize(e) for e in points_by_label[lab]]) for lab in labels}
    intra, inter = [], []
    for i, lab_i in enumerate(labels):
        sims_ii = mats[lab_i] @ mats[lab_i].T
        iu = np.triu_indices(len(sims_ii), k=1)
        if iu[0].size:
            intra.append(sims_ii[iu].mean())
        for lab_j in labels[i + 1 :]:
            inter.append((mats[lab_i] @ mats[lab_j].T).mean())
    if not intra or not inter:
        return float("nan")
    return float(np.mean(intra) - np.mean(inter))


def embed_samples(encoder, samples, config: ContrastiveConfig, batch_size=64):
    points = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        x = prepare_inputs(chunk, config.input_size, config.in_channels)
        e = encoder.forward(x).astype(float)
        for s, row in zip(chunk, e):
            points.append(EmbeddingPoint(id=s.id, e=row, f=_normalize(row), label=_class_of(s)))
    return points


def train_embedder(samples, config: ContrastiveConfig) -> EmbedderResult:
    """Minimise the MN-pair loss with Adam; embeds every sample afterwards.

    A held-out slice per class is excluded from batch construction and used
    for the intra-versus-inter similarity margin reported on the result.
    """
    samples = list(samples)
    train_idx, held_idx = _holdout_split(samples, config.holdout_fraction, config.seed)
    train_part = [samples[i] for i in train_idx]

    encoder = ConvEncoder(config.input_size, config.in_channels, config.embedding_dim, config.seed)
    opt = Adam(encoder.params(), lr=config.lr)
    x_train = prepare_inputs(train_part, config.input_size, config.in_channels)

    epoch_losses = []
    for epoch in range(config.epochs):
        batches = build_mn_batches(
            train_part, config.m, config.n, config.batches_per_epoch, seed=config.seed * 1009 + epoch
        )
        total = 0.0
        for batch in batches:
            idx = [batch.anchor, *batch.positives, *batch.negatives]
            xb = np.ascontiguousarray(x_train[idx])
            e = encoder.forward(xb, train=True).astype(float)
            n_pos = len(batch.positives)
            loss, g_anchor, g_pos, g_neg = mnpair_loss_grad(
                e[0], e[1 : 1 + n_pos], e[1 + n_pos :], pi=config.pi, tau=config.tau
            )
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite contrastive loss at epoch {epoch}",
                    batch_ids=[samples[i].id for i in idx],
                    epoch=epoch,
                )
            grads = np.vstack([g_anchor[None, :], g_pos, g_neg])
            encoder.zero_grad()
            encoder.backward(grads)
            opt.step()
            total += loss
        epoch_losses.append(total / max(1, len(batches)))
    logger.info("embedder trained %d epochs, final loss %.4f", config.epochs, epoch_losses[-1])

    points = embed_samples(encoder, samples, config)
    held_by_label: dict[str, list[np.ndarray]] = {}
    for i in held_idx:
        held_by_label.setdefault(points[i].label, []).append(points[i].e)
    margin = similarity_margin(held_by_label) if len(held_by_label) > 1 else float("nan")
    return EmbedderResult(encoder, points, epoch_losses, margin)


def save_embeddings(csv_path, points, config: ContrastiveConfig):
    """CSV of id,label,e_1..e_L plus a JSON sidecar with the run parameters."""
    csv_path = Path(csv_path)
    dim = len(points[0].e) if points else config.embedding_dim
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label"] + [f"e_{i + 1}" for i in range(dim)])
        for p in points:
            writer.writerow([p.id, p.label] + [repr(float(v)) for v in p.e])
    meta = {
        "embedding_dim": dim,
        "tau": config.tau,
        "pi": config.pi,
        "m": config.m,
        "n": config.n,
        "seed": config.seed,
    }
    csv_path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return csv_path


def load_embeddings(csv_path):
    points = []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim = len(header) - 2
        for row in reader:
            e = np.array([float(v) for v in row[2 : 2 + dim]])
            points.append(EmbeddingPoint(id=row[0], e=e, f=_normalize(e), label=row[1]))
    return points
