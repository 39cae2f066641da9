"""Modality-agnostic adapter fusion on precomputed multi-modal embeddings."""

from .config import TrainConfig
from .dataio import Batch, DatasetHeader, EmbeddingRecord, collate, gen_synthetic, read_dataset, write_dataset
from .metrics import MetricsReport, average_precision, map_from_logits
from .model import MAAModel, ce_loss

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "DatasetHeader",
    "EmbeddingRecord",
    "MAAModel",
    "MetricsReport",
    "TrainConfig",
    "average_precision",
    "ce_loss",
    "collate",
    "gen_synthetic",
    "map_from_logits",
    "read_dataset",
    "write_dataset",
]
