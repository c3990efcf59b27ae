"""Hook-based exporter turning torch classifiers into monitoring datasets."""

from capguard_exporter.hookdump import (
    ExportError,
    ExportSpec,
    LayerNotFoundError,
    NonSpatialLayerError,
    PREPROCESSORS,
    ShapeDriftError,
    export_dataset,
    export_sample,
)

__all__ = [
    "ExportError",
    "ExportSpec",
    "LayerNotFoundError",
    "NonSpatialLayerError",
    "PREPROCESSORS",
    "ShapeDriftError",
    "export_dataset",
    "export_sample",
]
