"""Offline bridge: run pretrained encoders on image patches and write their
multi-level feature maps as FMAP files for the segmentation pipeline."""

__version__ = "0.1.0"

from .export import ExportError, ExportJob, export_features, load_hub_model
from .fmap_format import validate_fmap_bytes, write_fmap

__all__ = ["ExportError", "ExportJob", "export_features", "load_hub_model",
           "validate_fmap_bytes", "write_fmap"]
