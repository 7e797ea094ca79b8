"""
ssbnn Data Layer
================

Dataset ingestion, batching, checkpoint persistence and metrics records.
"""

from .datasets import LabeledDataset, batches, load_idx, load_standard, synthetic_blobs
from .serializers import (Checkpoint, CheckpointSerializer, MetricsSerializer, load_checkpoint,
                          read_metrics, save_checkpoint, write_metrics)
from .validators import (METRICS_RECORD_SCHEMA, RUN_SPEC_SCHEMA, ValidationError, validate_metrics_record,
                         validate_run_spec)

__all__ = [
    'LabeledDataset',
    'batches',
    'load_idx',
    'load_standard',
    'synthetic_blobs',
    'Checkpoint',
    'CheckpointSerializer',
    'MetricsSerializer',
    'load_checkpoint',
    'save_checkpoint',
    'read_metrics',
    'write_metrics',
    'METRICS_RECORD_SCHEMA',
    'RUN_SPEC_SCHEMA',
    'ValidationError',
    'validate_metrics_record',
    'validate_run_spec',
]
