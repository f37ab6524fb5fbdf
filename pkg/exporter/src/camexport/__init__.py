"""Checkpoint exporter: PyTorch conv classifiers to the portable format."""

__version__ = "0.1.0"

from .export import ExportError, ExportReport, Residual, convert_model, export_checkpoint, fold_batchnorm
from .portable import PortableNet, read_tensor_2d, write_tensor_2d

__all__ = [
    "ExportError",
    "ExportReport",
    "PortableNet",
    "Residual",
    "convert_model",
    "export_checkpoint",
    "fold_batchnorm",
    "read_tensor_2d",
    "write_tensor_2d",
]
