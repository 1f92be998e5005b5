"""Feature-imbalance analysis: 2D reduction and density-based clustering.

The DBSCAN here follows the textbook five steps: label core/border/noise,
drop noise, connect core points within eps, make connected core groups the
clusters, then attach each border point to a cluster of one of its cores.
Neighbour counts include the point itself, and a border point reachable from
several clusters joins the lowest cluster id; cluster ids are assigned by
first-core order in the input, so runs are fully deterministic.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataValidationError

NOISE = -1

DEFAULT_EPS = 3.0
DEFAULT_MIN_NEIGHBORS = 10
DEFAULT_PERPLEXITY = 30.0


@dataclass(frozen=True)
class Point2D:
    id: str
    x: float
    y: float
    label: str


@dataclass(frozen=True)
class ClusterAssignment:
    id: str
    cluster: int  # NOISE (-1) for noise points
    role: str  # "core" | "border" | "noise"


def reduce_2d(points, perplexity: float = DEFAULT_PERPLEXITY, seed: int = 0):
    """t-SNE the (normalised) embeddings down to two score axes."""
    if len(points) < 3 * perplexity:
        raise DataValidationError(
            f"t-SNE needs at least 3 * perplexity = {3 * perplexity:.0f} points, got {len(points)}"
        )
    from sklearn.manifold import TSNE

    x = np.stack([p.f for p in points])
    coords = TSNE(
        n_components=2,
        perplexity=perplexity,
        random_state=seed,
        init="pca",
    ).fit_transform(x)
    return [
        Point2D(id=p.id, x=float(c[0]), y=float(c[1]), label=p.label)
        for p, c in zip(points, coords)
    ]


def dbscan(points, eps: float = DEFAULT_EPS, min_neighbors: int = DEFAULT_MIN_NEIGHBORS):
    """Role labels and clusters for 2D points; see module docstring for rules."""
    if eps <= 0:
        raise DataValidationError("eps must be > 0")
    if min_neighbors < 1:
        raise DataValidationError("min_neighbors must be >= 1")
    n = len(points)
    if n == 0:
        return []
    coords = np.array([[p.x, p.y] for p in points], dtype=float)
    d2 = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(axis=2)
    within = d2 <= eps * eps  # includes self (distance 0)

    # Step 1: core points have at least min_neighbors points (self included)
    # inside eps; the rest are border (near a core) or noise.
    neighbor_counts = within.sum(axis=1)
    is_core = neighbor_counts >= min_neighbors

    # Steps 3-4: connected components of cores linked within eps.
    cluster = np.full(n, NOISE, dtype=int)
    next_id = 0
    for start in range(n):
        if not is_core[start] or cluster[start] != NOISE:
            continue
        queue = deque([start])
        cluster[start] = next_id
        while queue:
            i = queue.popleft()
            for j in np.nonzero(within[i] & is_core)[0]:
                if cluster[j] == NOISE:
                    cluster[j] = next_id
                    queue.append(j)
        next_id += 1

    # Step 5: border points join the lowest-id cluster among their cores.
    assignments = []
    for i, p in enumerate(points):
        if is_core[i]:
            assignments.append(ClusterAssignment(p.id, int(cluster[i]), "core"))
            continue
        core_clusters = cluster[within[i] & is_core]
        if core_clusters.size:
            assignments.append(ClusterAssignment(p.id, int(core_clusters.min()), "border"))
        else:
            assignments.append(ClusterAssignment(p.id, NOISE, "noise"))
    return assignments


def count_clusters(assignments) -> int:
    return len({a.cluster for a in assignments if a.cluster != NOISE})


def save_scatter(csv_path, points, assignments):
    """CSV of id,x,y,label,cluster,role in input order."""
    by_id = {a.id: a for a in assignments}
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "x", "y", "label", "cluster", "role"])
        for p in points:
            a = by_id[p.id]
            writer.writerow([p.id, repr(p.x), repr(p.y), p.label, a.cluster, a.role])
    return csv_path


def plot_scatter(png_path, points, assignments=None, color_by="label", title=None):
    """Scatter of the 2D scores coloured by class label or by cluster id."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if color_by == "cluster":
        if assignments is None:
            raise DataValidationError("cluster colouring needs assignments")
        by_id = {a.id: a for a in assignments}
        keys = [by_id[p.id].cluster for p in points]
        nice = {NOISE: "noise"}
        names = [nice.get(k, f"cluster {k}") for k in keys]
    else:
        names = [p.label for p in points]
    xs = np.array([p.x for p in points])
    ys = np.array([p.y for p in points])
    fig, ax = plt.subplots(figsize=(6, 6))
    for name in sorted(set(names)):
        mask = np.array([n == name for n in names])
        ax.scatter(xs[mask], ys[mask], s=8, label=name, alpha=0.8)
    ax.legend(loc="best", fontsize=8)
    ax.set_xlabel("score 1")
    ax.set_ylabel("score 2")
    ax.set_title(title or f"embedding scatter by {color_by}")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return Path(png_path)
