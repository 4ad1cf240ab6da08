"""Checkpoint exporter and dataset packer for the astro-ViT inference engine.

Standalone tool: it talks to the inference side only through files (the
tensor-container format, manifest CSVs, raw float32 heatmaps) and the
`vita` command line, never through its Python API.
"""

from .container import read_container, write_container
from .errors import ConvertError
from .export import ExportReport, ProbeRecord, TensorRecord, export_weights
from .pack import PackReport, pack_dataset

__all__ = [
    "ConvertError",
    "ExportReport",
    "PackReport",
    "ProbeRecord",
    "TensorRecord",
    "export_weights",
    "pack_dataset",
    "read_container",
    "write_container",
]

__version__ = "0.1.0"
