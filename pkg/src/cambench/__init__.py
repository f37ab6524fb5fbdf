"""CAM saliency computation and localization benchmarking for small CNNs."""

__version__ = "0.1.0"

from .cams import CAM_METHODS, compute_cam, postprocess
from .engine import ForwardTrace, forward, gradients_at, resume_forward
from .locmetrics import (aggregate, bbox_overlap, binarize, calibrate_threshold,
                         connected_components, loose_hit, pixel_overlap)
from .modelio import (Network, NetworkSpec, WeightStore, build_toy_detector,
                      load_network, save_network)

__all__ = [
    "CAM_METHODS",
    "ForwardTrace",
    "Network",
    "NetworkSpec",
    "WeightStore",
    "aggregate",
    "bbox_overlap",
    "binarize",
    "build_toy_detector",
    "calibrate_threshold",
    "compute_cam",
    "connected_components",
    "forward",
    "gradients_at",
    "load_network",
    "loose_hit",
    "pixel_overlap",
    "postprocess",
    "resume_forward",
    "save_network",
]
