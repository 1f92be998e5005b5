"""One-class anomaly detection for imbalanced vision data.

Subpackages cover the pipeline end to end: dataset handling (``data``,
``synthgen``), the receptive-field detector and its robust losses (``fcdd``),
heatmap rendering (``heatmap``), contrastive embeddings (``mnpair``),
density-based feature clustering (``cluster``), and the positive-ratio
ablation harness (``harness``). ``anovis.cli`` exposes the same pipeline as
a command-line tool.
"""

__version__ = "0.1.0"
