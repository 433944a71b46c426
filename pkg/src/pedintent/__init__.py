"""Skeleton-based pedestrian crossing-intention prediction.

A Chebyshev graph-convolutional GRU over 19-joint skeleton windows,
trained with hand-written backpropagation and AdamW, plus a procedural
scenario generator and a streaming evaluation harness.
"""
from .model import (LABELS, PedGnnConfig, PedGnnParams, Prediction, count_params, forward,
                    load_checkpoint, save_checkpoint)
from .skeleton import JointId, build_topology, map_coco17_to_19, normalize_frame

__all__ = [
    "LABELS", "JointId", "PedGnnConfig", "PedGnnParams", "Prediction", "build_topology",
    "count_params", "forward", "load_checkpoint", "map_coco17_to_19", "normalize_frame",
    "save_checkpoint",
]
__version__ = "0.1.0"
