"""Command-line pipeline: synth, train, score, ablate, embed, cluster, report.

Configuration lives in a YAML file (see README for the schema); every flag
overrides its config key. Each emitted artifact gets a ``<file>.meta.json``
sidecar carrying the resolved-config hash, the seed, and the package version
so reruns can be compared byte for byte (PNGs exempt).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .data import (
    ingest_folder,
    ladder_counts,
    save_splits,
    split_dataset,
)
from .errors import ConfigurationError, DataValidationError, TrainingDiverged
from .fcdd import (
    FieldMap,
    TrainConfig,
    forward_field_maps,
    load_checkpoint,
    pseudo_huber,
    save_checkpoint,
    score_dataset,
    train_detector,
)
from .harness import (
    load_report,
    plot_effect,
    report_to_csv,
    run_ablation,
    save_report,
)
from .heatmap import render_overlay, save_heatmap, score_histogram, upsample_field
from .mnpair import ContrastiveConfig, load_embeddings, save_embeddings, train_embedder
from .synthgen import SynthSpec, generate, write_dataset

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = {
    "seed": 0,
    "out": "runs/default",
    "dataset": {
        "source": "synth",
        "path": None,
        "synth": {
            "image_size": [64, 64],
            "n_per_class": 394,
            "noise_level": 0.055,
            "anomaly_kind": "bright-blob",
            "n_classes": 2,
        },
    },
    "train": {
        "input_size": [64, 64],
        "batch_size": 32,
        "epochs": 60,
        "lr": 1e-4,
        "beta1": 0.9,
        "beta2": 0.99,
        "backbone": "toy-fcn",
    },
    "ladder": {"rungs": None, "delta": 0.01},
    "ablate": {"repeats": 1, "workers": None},
    "contrastive": {
        "tau": 0.3,
        "pi": 0.15,
        "m": 4,
        "n": 8,
        "embedding_dim": 128,
        "epochs": 12,
        "batches_per_epoch": 48,
        "lr": 1e-3,
    },
    "cluster": {"perplexity": 30.0, "eps": 3.0, "min_neighbors": 10},
    "heatmap": {"sigma": None, "bins": 50},
}


def _deep_merge(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(path: str | None) -> dict:
    cfg = DEFAULT_CONFIG
    if path:
        import yaml

        p = Path(path)
        if not p.is_file():
            raise ConfigurationError(f"--config file not found: {p}")
        loaded = yaml.safe_load(p.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"--config must contain a mapping: {p}")
        cfg = _deep_merge(cfg, loaded)
    return cfg


def _apply_overrides(cfg: dict, args) -> dict:
    over: dict = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = args.out
    if getattr(args, "data", None) is not None:
        over["dataset"] = {"source": "folder", "path": args.data}
    if getattr(args, "rungs", None) is not None:
        over["ladder"] = {"rungs": [r.strip() for r in args.rungs.split(",") if r.strip()]}
    for name, path in (
        ("delta", ("ladder", "delta")),
        ("repeats", ("ablate", "repeats")),
        ("workers", ("ablate", "workers")),
        ("sigma", ("heatmap", "sigma")),
        ("bins", ("heatmap", "bins")),
        ("eps", ("cluster", "eps")),
        ("min_neighbors", ("cluster", "min_neighbors")),
        ("perplexity", ("cluster", "perplexity")),
        ("tau", ("contrastive", "tau")),
        ("pi", ("contrastive", "pi")),
        ("epochs", ("train", "epochs")),
        ("embed_epochs", ("contrastive", "epochs")),
    ):
        value = getattr(args, name, None)
        if value is not None:
            node = over
            for key in path[:-1]:
                node = node.setdefault(key, {})
            node[path[-1]] = value
    return _deep_merge(cfg, over)


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def write_sidecar(artifact_path, cfg: dict, extra: dict | None = None):
    meta = {"config_hash": config_hash(cfg), "seed": cfg["seed"], "version": __version__}
    if extra:
        meta.update(extra)
    side = Path(f"{artifact_path}.meta.json")
    side.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return side


def _synth_spec(cfg: dict) -> SynthSpec:
    s = cfg["dataset"]["synth"]
    return SynthSpec(
        image_size=tuple(s["image_size"]),
        n_per_class=s["n_per_class"],
        noise_level=s["noise_level"],
        anomaly_kind=s["anomaly_kind"],
        n_classes=s.get("n_classes", 2),
        seed=cfg["seed"],
    )


def _load_samples(cfg: dict):
    source = cfg["dataset"]["source"]
    if source == "synth":
        return generate(_synth_spec(cfg))
    if source == "folder":
        path = cfg["dataset"]["path"]
        if not path or not Path(path).is_dir():
            raise ConfigurationError(f"--data does not point to a dataset folder: {path}")
        samples, _ = ingest_folder(path)
        return samples
    raise ConfigurationError(f"dataset.source must be synth or folder, got {source!r}")


def _train_config(cfg: dict, seed: int | None = None) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        lr=t["lr"],
        beta1=t["beta1"],
        beta2=t["beta2"],
        batch_size=t["batch_size"],
        epochs=t["epochs"],
        seed=cfg["seed"] if seed is None else seed,
        input_size=tuple(t["input_size"]),
        backbone=t["backbone"],
    )


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _safe_name(sample_id: str) -> str:
    return sample_id.replace("/", "_").replace("\\", "_")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict) -> int:
    out = _out_dir(cfg)
    samples = generate(_synth_spec(cfg))
    root = write_dataset(samples, out / "data")
    write_sidecar(root / "ground_truth.json", cfg)
    n_anom = sum(s.label for s in samples)
    print(f"wrote {len(samples)} images ({n_anom} anomalous) to {root}")
    return 0


def cmd_train(cfg: dict) -> int:
    out = _out_dir(cfg)
    samples = _load_samples(cfg)
    dataset = split_dataset(samples, seed=cfg["seed"])
    save_splits(out / "splits.json", dataset)
    write_sidecar(out / "splits.json", cfg)
    config = _train_config(cfg)
    backbone, log = train_detector(list(dataset.train), config)
    ckpt = save_checkpoint(out / "checkpoint", backbone, config)
    log.to_csv(out / "training_log.csv")
    write_sidecar(out / "training_log.csv", cfg)
    write_sidecar(ckpt / "config.json", cfg)
    print(f"checkpoint written to {ckpt} (final loss {log.final_loss:.6f})")
    return 0


def cmd_score(cfg: dict, checkpoint: str | None) -> int:
    out = _out_dir(cfg)
    ckpt_dir = Path(checkpoint) if checkpoint else _out_dir(cfg) / "checkpoint"
    if not (ckpt_dir / "config.json").is_file():
        raise ConfigurationError(f"--checkpoint has no model: {ckpt_dir}")
    backbone, manifest = load_checkpoint(ckpt_dir)
    config = _train_config(cfg)
    if tuple(manifest["model"]["input_size"]) != config.input_size:
        from dataclasses import replace as dc_replace

        config = dc_replace(config, input_size=tuple(manifest["model"]["input_size"]))
    samples = _load_samples(cfg)
    dataset = split_dataset(samples, seed=cfg["seed"])
    test = list(dataset.test)

    rows = score_dataset(backbone, test, config)
    scores_csv = out / "scores.csv"
    lines = ["id,score,label"] + [f"{r.id},{r.score!r},{r.label}" for r in rows]
    scores_csv.write_text("\n".join(lines) + "\n")
    write_sidecar(scores_csv, cfg)

    hist = score_histogram(rows, bins=cfg["heatmap"]["bins"])
    hist.to_csv(out / "histogram.csv")
    hist.plot(out / "histogram.png")
    write_sidecar(out / "histogram.csv", cfg)

    sigma = cfg["heatmap"]["sigma"]
    geometry = backbone.field_geometry()
    heat_dir = out / "heatmaps"
    maps = forward_field_maps(backbone, test, config)
    for sample, field_values in zip(test, maps):
        field = FieldMap(values=pseudo_huber(field_values), geometry=geometry)
        heatmap = upsample_field(field, sigma=sigma)
        base = heat_dir / _safe_name(sample.id)
        render_overlay(sample, heatmap, base.with_suffix(".png"))
        save_heatmap(base, heatmap)
    write_sidecar(heat_dir, cfg, extra={"count": len(test), "sigma": sigma})
    print(f"scored {len(rows)} test images; artifacts in {out}")
    return 0


def _select_ladder(cfg: dict, n_anomalies: int):
    ladder = ladder_counts(n_anomalies)
    wanted = cfg["ladder"]["rungs"]
    if wanted:
        ladder = ladder.select(wanted)
    return ladder


def cmd_ablate(cfg: dict) -> int:
    out = _out_dir(cfg)
    samples = _load_samples(cfg)
    dataset = split_dataset(samples, seed=cfg["seed"])
    save_splits(out / "splits.json", dataset)
    write_sidecar(out / "splits.json", cfg)
    n_anomalies = sum(1 for s in dataset.train if s.label == 1)
    ladder = _select_ladder(cfg, n_anomalies)
    workers = cfg["ablate"]["workers"] or os.cpu_count() or 1
    report = run_ablation(
        dataset,
        ladder,
        _train_config(cfg),
        seed=cfg["seed"],
        repeats=cfg["ablate"]["repeats"],
        workers=workers,
        delta=cfg["ladder"]["delta"],
        version=__version__,
    )
    save_report(out / "report.json", report)
    report_to_csv(out / "report.csv", report)
    plot_effect(out / "effect.png", report)
    write_sidecar(out / "report.json", cfg)
    write_sidecar(out / "report.csv", cfg)
    print(f"effective ratio 1/a* = 1/{report.a_star}"
          + (" (flagged)" if report.a_star_flagged else ""))
    for p in report.points:
        print(f"  {p.ratio_label:>9} (ano.{p.anomaly_count:>4})  "
              f"AUC {p.mean('auc'):.4f}  F1 {p.mean('f1'):.4f}  {p.phase}")
    return 0


def _contrastive_config(cfg: dict) -> ContrastiveConfig:
    c = cfg["contrastive"]
    return ContrastiveConfig(
        tau=c["tau"],
        pi=c["pi"],
        m=c["m"],
        n=c["n"],
        embedding_dim=c["embedding_dim"],
        epochs=c["epochs"],
        batches_per_epoch=c["batches_per_epoch"],
        lr=c["lr"],
        seed=cfg["seed"],
        input_size=tuple(cfg["train"]["input_size"]),
    )


def cmd_embed(cfg: dict) -> int:
    out = _out_dir(cfg)
    samples = _load_samples(cfg)
    result = train_embedder(samples, _contrastive_config(cfg))
    csv_path = save_embeddings(out / "embeddings.csv", result.points, _contrastive_config(cfg))
    write_sidecar(csv_path, cfg, extra={"holdout_margin": result.holdout_margin})
    print(f"embedded {len(result.points)} samples (holdout margin {result.holdout_margin:.3f})")
    return 0


def cmd_cluster(cfg: dict, embeddings: str | None) -> int:
    from .cluster import count_clusters, dbscan, plot_scatter, reduce_2d, save_scatter

    out = _out_dir(cfg)
    emb_path = Path(embeddings) if embeddings else out / "embeddings.csv"
    if not emb_path.is_file():
        raise ConfigurationError(f"--embeddings file not found: {emb_path}")
    points = load_embeddings(emb_path)
    reduced = reduce_2d(points, perplexity=cfg["cluster"]["perplexity"], seed=cfg["seed"])
    assignments = dbscan(
        reduced, eps=cfg["cluster"]["eps"], min_neighbors=cfg["cluster"]["min_neighbors"]
    )
    save_scatter(out / "scatter.csv", reduced, assignments)
    plot_scatter(out / "scatter_by_label.png", reduced, assignments, color_by="label")
    plot_scatter(out / "scatter_by_cluster.png", reduced, assignments, color_by="cluster")
    summary = {
        "cluster_count": count_clusters(assignments),
        "eps": cfg["cluster"]["eps"],
        "min_neighbors": cfg["cluster"]["min_neighbors"],
        "perplexity": cfg["cluster"]["perplexity"],
        "n_points": len(points),
    }
    (out / "cluster_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    write_sidecar(out / "scatter.csv", cfg)
    write_sidecar(out / "cluster_summary.json", cfg)
    print(f"feature clusters: {summary['cluster_count']}")
    return 0


def cmd_report(cfg: dict, report_path: str | None) -> int:
    out = _out_dir(cfg)
    path = Path(report_path) if report_path else out / "report.json"
    if not path.is_file():
        raise ConfigurationError(f"--report file not found: {path}")
    report = load_report(path)
    report_to_csv(out / "report.csv", report)
    plot_effect(out / "effect.png", report)
    write_sidecar(out / "report.csv", cfg)
    print(f"{'ratio':>9} {'ano.':>5} {'AUC':>7} {'F1':>7} {'prec':>7} {'recall':>7}  phase")
    for p in report.points:
        print(
            f"{p.ratio_label:>9} {p.anomaly_count:>5} {p.mean('auc'):7.4f} {p.mean('f1'):7.4f} "
            f"{p.mean('precision'):7.4f} {p.mean('recall'):7.4f}  {p.phase}"
        )
    print(f"effective ratio 1/a* = 1/{report.a_star}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anovis",
        description="Imbalanced one-class anomaly detection: train, score, and ablate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--data", default=None, help="dataset folder (normal/ + anomalous/)")

    p = sub.add_parser("synth", help="generate the synthetic dataset folder")
    common(p)

    p = sub.add_parser("train", help="train the detector on the balanced train split")
    common(p)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("score", help="score the test split and render heatmaps")
    common(p)
    p.add_argument("--checkpoint", default=None, help="checkpoint directory")
    p.add_argument("--sigma", type=float, default=None, help="heatmap Gaussian sigma")
    p.add_argument("--bins", type=int, default=None, help="histogram bins")

    p = sub.add_parser("ablate", help="run the positive-ratio ladder sweep")
    common(p)
    p.add_argument("--rungs", default=None, help="comma list, e.g. 1/1,1/8,one-shot")
    p.add_argument("--delta", type=float, default=None, help="AUC tolerance for 1/a*")
    p.add_argument("--repeats", type=int, default=None, help="training seeds per rung")
    p.add_argument("--workers", type=int, default=None, help="parallel rung jobs")
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("embed", help="train the contrastive embedder")
    common(p)
    p.add_argument("--tau", type=float, default=None, help="similarity temperature")
    p.add_argument("--pi", type=float, default=None, help="positive weight")
    p.add_argument("--embed-epochs", type=int, default=None, dest="embed_epochs")

    p = sub.add_parser("cluster", help="reduce embeddings to 2D and cluster them")
    common(p)
    p.add_argument("--embeddings", default=None, help="embeddings CSV from `embed`")
    p.add_argument("--eps", type=float, default=None, help="DBSCAN radius")
    p.add_argument("--min-neighbors", type=int, default=None, dest="min_neighbors")
    p.add_argument("--perplexity", type=float, default=None)

    p = sub.add_parser("report", help="re-emit tables and plots from a report JSON")
    common(p)
    p.add_argument("--report", default=None, help="report.json path")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("ANOVIS_LOGLEVEL", "WARNING"))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "score":
            return cmd_score(cfg, args.checkpoint)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        if args.command == "embed":
            return cmd_embed(cfg)
        if args.command == "cluster":
            return cmd_cluster(cfg, args.embeddings)
        if args.command == "report":
            return cmd_report(cfg, args.report)
        parser.error(f"unknown command {args.command}")
    except (ConfigurationError, DataValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"training diverged: {exc} (batches: {exc.batch_ids[:4]}...)", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
