"""Clip record streams: one JSON object per line, each a labeled clip.

A record looks like::

    {"clip_id": "clip_00000", "fps": 30, "width": 1600, "height": 600,
     "frames": [{"frame_index": 0,
                 "pedestrians": [{"pedestrian_id": 0, "label": "C",
                                  "joints": [[x, y, c], ...]}]}]}

``joints`` holds 19 triples in the canonical joint order. The 17-keypoint
variant (COCO order) is accepted by :func:`import_coco17_records`. A null
label excludes that pedestrian-frame from metric accounting.
"""
from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator

import numpy as np

from .skeleton import NUM_JOINTS, SkeletonFormatError, coco17_to_19_array

VALID_LABELS = ("C", "NC", None)


class ClipFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        where = ""
        if source is not None:
            where += f"{source}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line
        self.source = source


@dataclass
class PedestrianObs:
    pedestrian_id: int
    label: str | None
    joints: np.ndarray  # (19, 3) pixel x, pixel y, confidence


@dataclass
class FrameRecord:
    frame_index: int
    pedestrians: list[PedestrianObs] = field(default_factory=list)


@dataclass
class ClipRecord:
    clip_id: str
    fps: float
    width: int
    height: int
    frames: list[FrameRecord] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "fps": self.fps,
            "width": self.width,
            "height": self.height,
            "frames": [
                {
                    "frame_index": f.frame_index,
                    "pedestrians": [
                        {"pedestrian_id": p.pedestrian_id, "label": p.label,
                         "joints": p.joints.tolist()}
                        for p in f.pedestrians
                    ],
                }
                for f in self.frames
            ],
        }

    @classmethod
    def from_dict(cls, data: dict, n_joints: int = NUM_JOINTS) -> "ClipRecord":
        try:
            frames = []
            for f in data["frames"]:
                peds = []
                for p in f["pedestrians"]:
                    label = p.get("label")
                    if label not in VALID_LABELS:
                        raise ClipFormatError(f"invalid label {label!r}")
                    joints = np.asarray(p["joints"], dtype=np.float64)
                    if joints.shape != (n_joints, 3):
                        raise ClipFormatError(
                            f"expected {n_joints} joint triples, got shape {joints.shape}")
                    if not np.all(np.isfinite(joints)):
                        raise ClipFormatError("non-finite joint values")
                    peds.append(PedestrianObs(int(p["pedestrian_id"]), label, joints))
                frames.append(FrameRecord(int(f["frame_index"]), peds))
            return cls(str(data["clip_id"]), float(data["fps"]), int(data["width"]),
                       int(data["height"]), frames)
        except (KeyError, TypeError) as exc:
            raise ClipFormatError(f"malformed clip record: {exc!r}") from exc

    def label_counts(self) -> dict[str, int]:
        counts = {"C": 0, "NC": 0}
        for f in self.frames:
            for p in f.pedestrians:
                if p.label is not None:
                    counts[p.label] += 1
        return counts


def dumps(clip: ClipRecord) -> str:
    return json.dumps(clip.to_dict(), separators=(",", ":"))


def write_clips(path, clips: Iterable[ClipRecord]) -> int:
    n = 0
    with open(path, "w") as fh:
        for clip in clips:
            fh.write(dumps(clip) + "\n")
            n += 1
    return n


def iter_clips(source: str | Path | IO[str], n_joints: int = NUM_JOINTS) -> Iterator[ClipRecord]:
    """Yield clips from a path, an open text stream, or ``"-"`` for stdin.

    Malformed lines raise :class:`ClipFormatError` carrying the line number.
    """
    if source == "-":
        fh, name, close = sys.stdin, "<stdin>", False
    elif hasattr(source, "read"):
        fh, name, close = source, getattr(source, "name", "<stream>"), False
    else:
        fh, name, close = open(source), str(source), True
    try:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                yield ClipRecord.from_dict(data, n_joints=n_joints)
            except json.JSONDecodeError as exc:
                raise ClipFormatError(f"invalid JSON: {exc.msg}", lineno, name) from exc
            except ClipFormatError as exc:
                raise ClipFormatError(str(exc), lineno, name) from exc
    finally:
        if close:
            fh.close()


def read_clips(source, n_joints: int = NUM_JOINTS) -> list[ClipRecord]:
    return list(iter_clips(source, n_joints=n_joints))


def convert_coco17_clip(clip: ClipRecord) -> ClipRecord:
    frames = [
        FrameRecord(f.frame_index, [
            PedestrianObs(p.pedestrian_id, p.label, coco17_to_19_array(p.joints))
            for p in f.pedestrians
        ])
        for f in clip.frames
    ]
    return ClipRecord(clip.clip_id, clip.fps, clip.width, clip.height, frames)


def import_coco17_records(source, dest) -> int:
    """Convert a stream of 17-keypoint records into 19-joint records."""
    try:
        return write_clips(dest, (convert_coco17_clip(c) for c in iter_clips(source, n_joints=17)))
    except SkeletonFormatError as exc:
        raise ClipFormatError(str(exc)) from exc
