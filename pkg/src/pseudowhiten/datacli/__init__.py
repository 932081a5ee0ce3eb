"""Datasets, run configuration, metrics persistence, and the experiment CLI."""

from .config import ConfigError, RunConfig, config_from_dict, config_to_dict, load_config, run_config_hash
from .datasets import (
    DataFormatError,
    LabeledDataset,
    SyntheticDatasetSpec,
    generate_synthetic,
    load_image_dataset,
    write_idx_dataset,
    write_ppm_dir,
)
from .metrics import MetricsIOError, MetricsRecord, MetricsWriter, read_metrics

__all__ = [
    "ConfigError",
    "RunConfig",
    "config_from_dict",
    "config_to_dict",
    "load_config",
    "run_config_hash",
    "DataFormatError",
    "LabeledDataset",
    "SyntheticDatasetSpec",
    "generate_synthetic",
    "load_image_dataset",
    "write_idx_dataset",
    "write_ppm_dir",
    "MetricsIOError",
    "MetricsRecord",
    "MetricsWriter",
    "read_metrics",
]
