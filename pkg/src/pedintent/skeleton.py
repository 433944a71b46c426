"""19-joint pedestrian skeleton: topology, per-frame normalization and
ingestion of 17-keypoint (COCO order) pose-estimator output.

Joint arrays are ``(..., 19, 3)`` float arrays whose last axis holds
``(x, y, confidence)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

NUM_JOINTS = 19
NUM_CHANNELS = 3
DEGENERATE_RANGE = 1e-9


class JointId(IntEnum):
    NOSE = 0
    LEYE = 1
    REYE = 2
    LEAR = 3
    REAR = 4
    NECK = 5
    LSHOULDER = 6
    RSHOULDER = 7
    LELBOW = 8
    RELBOW = 9
    LWRIST = 10
    RWRIST = 11
    CHIP = 12
    LHIP = 13
    RHIP = 14
    LKNEE = 15
    RKNEE = 16
    LANKLE = 17
    RANKLE = 18


JOINT_NAMES = [
    "Nose", "LEye", "REye", "LEar", "REar", "Neck", "LShoulder", "RShoulder",
    "LElbow", "RElbow", "LWrist", "RWrist", "CHip", "LHip", "RHip", "LKnee",
    "RKnee", "LAnkle", "RAnkle",
]

EDGES: tuple[tuple[int, int], ...] = (
    (0, 1), (0, 2), (1, 3), (2, 4), (0, 5), (5, 6), (5, 7), (6, 8), (7, 9),
    (8, 10), (9, 11), (5, 12), (12, 13), (12, 14), (13, 15), (14, 16),
    (15, 17), (16, 18),
)

# Position of each 19-joint slot in the COCO-17 layout; -1 marks joints that
# are synthesized as the midpoint of two COCO keypoints.
COCO17_TO_19 = (0, 1, 2, 3, 4, -1, 5, 6, 7, 8, 9, 10, -1, 11, 12, 13, 14, 15, 16)
SYNTHESIZED = {
    JointId.NECK: (JointId.LSHOULDER, JointId.RSHOULDER),
    JointId.CHIP: (JointId.LHIP, JointId.RHIP),
}
_COPIED_SLOTS = np.array([j for j, c in enumerate(COCO17_TO_19) if c >= 0])


class SkeletonFormatError(ValueError):
    """Raised when keypoint data has the wrong shape or layout."""


@dataclass(frozen=True)
class SkeletonTopology:
    edges: tuple[tuple[int, int], ...]
    adjacency: np.ndarray = field(repr=False)
    degree: np.ndarray = field(repr=False)

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]


def build_topology() -> SkeletonTopology:
    adjacency = np.zeros((NUM_JOINTS, NUM_JOINTS))
    for i, j in EDGES:
        adjacency[i, j] = adjacency[j, i] = 1.0
    adjacency.setflags(write=False)
    degree = adjacency.sum(axis=1)
    degree.setflags(write=False)
    return SkeletonTopology(edges=EDGES, adjacency=adjacency, degree=degree)


@dataclass(frozen=True)
class RawSkeletonFrame:
    """Pixel-space joints of one pedestrian in one frame."""

    joints: np.ndarray
    frame_index: int = 0
    pedestrian_id: int = 0

    def __post_init__(self):
        joints = np.asarray(self.joints, dtype=np.float64)
        if joints.shape != (NUM_JOINTS, NUM_CHANNELS):
            raise SkeletonFormatError(f"expected (19, 3) joints, got {joints.shape}")
        object.__setattr__(self, "joints", joints)


@dataclass(frozen=True)
class NormalizedSkeletonFrame:
    joints: np.ndarray
    frame_index: int = 0
    pedestrian_id: int = 0


@dataclass(frozen=True)
class SkeletonWindow:
    """``n_frames`` consecutive normalized frames of one pedestrian."""

    joints: np.ndarray          # (N_F, 19, 3)
    frame_indices: tuple[int, ...]
    pedestrian_id: int = 0

    def __post_init__(self):
        joints = np.asarray(self.joints, dtype=np.float64)
        if joints.ndim != 3 or joints.shape[1:] != (NUM_JOINTS, NUM_CHANNELS):
            raise SkeletonFormatError(f"expected (N_F, 19, 3) window, got {joints.shape}")
        idx = tuple(int(i) for i in self.frame_indices)
        if len(idx) != len(joints):
            raise SkeletonFormatError("one frame index per window frame is required")
        if any(b - a != 1 for a, b in zip(idx, idx[1:])):
            raise SkeletonFormatError(f"window frames are not consecutive: {idx}")
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "frame_indices", idx)

    @property
    def n_frames(self) -> int:
        return len(self.joints)

    @classmethod
    def from_frames(cls, frames: Sequence[NormalizedSkeletonFrame]) -> "SkeletonWindow":
        if not frames:
            raise SkeletonFormatError("a window needs at least one frame")
        pids = {f.pedestrian_id for f in frames}
        if len(pids) != 1:
            raise SkeletonFormatError(f"window mixes pedestrians {sorted(pids)}")
        return cls(np.stack([f.joints for f in frames]), tuple(f.frame_index for f in frames),
                   frames[0].pedestrian_id)


def normalize_joints(joints: np.ndarray) -> np.ndarray:
    """Min-max normalize x and y over the 19 joints of every frame.

    Works on any ``(..., 19, 3)`` array. An axis whose range is below
    ``DEGENERATE_RANGE`` maps to 0.5 for every joint. Confidences pass
    through untouched.
    """
    joints = np.asarray(joints, dtype=np.float64)
    out = joints.copy()
    xy = joints[..., :2]
    lo = xy.min(axis=-2, keepdims=True)
    span = xy.max(axis=-2, keepdims=True) - lo
    degenerate = span < DEGENERATE_RANGE
    safe = np.where(degenerate, 1.0, span)
    out[..., :2] = np.where(degenerate, 0.5, (xy - lo) / safe)
    return out


def normalize_frame(raw: RawSkeletonFrame) -> NormalizedSkeletonFrame:
    return NormalizedSkeletonFrame(
        joints=normalize_joints(raw.joints),
        frame_index=raw.frame_index,
        pedestrian_id=raw.pedestrian_id,
    )


def coco17_to_19_array(kp17) -> np.ndarray:
    """Vectorized 17 -> 19 mapping over a ``(..., 17, 3)`` array."""
    kp17 = np.asarray(kp17, dtype=np.float64)
    if kp17.ndim < 2 or kp17.shape[-2:] != (17, NUM_CHANNELS):
        raise SkeletonFormatError(f"expected 17 keypoint triples, got shape {kp17.shape}")
    out = np.empty(kp17.shape[:-2] + (NUM_JOINTS, NUM_CHANNELS))
    out[..., _COPIED_SLOTS, :] = kp17
    for joint, (a, b) in SYNTHESIZED.items():
        out[..., joint, :] = (out[..., a, :] + out[..., b, :]) / 2.0
    return out


def map_coco17_to_19(kp17: Sequence[Sequence[float]], frame_index: int = 0,
                     pedestrian_id: int = 0) -> RawSkeletonFrame:
    """Add Neck and CHip as shoulder and hip midpoints.

    Their confidence is the mean of the two parent confidences.
    """
    return RawSkeletonFrame(coco17_to_19_array(kp17), frame_index, pedestrian_id)


def project_19_to_coco17(joints19: np.ndarray) -> np.ndarray:
    """Drop the two synthesized joints, recovering the COCO-17 layout."""
    return np.asarray(joints19)[..., _COPIED_SLOTS, :]
