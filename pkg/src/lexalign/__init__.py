"""Toolkit for measuring representational alignment between human triplet
judgments and word-embedding spaces.

Subpackages cover the full pipeline: ingesting embeddings/features/judgments
(`ingest`), designing stimulus sets and triplet schedules (`stimuli`),
building dissimilarity matrices (`rdm`), correlational statistics (`stats`),
ridge-based feature ablation (`ablation`), the behavioral data-collection
service (`service`), and report generation (`report`, `cli`).
"""

__version__ = "0.1.0"
