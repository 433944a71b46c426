"""Sliding windows (step 1) over per-pedestrian tracks.

A window ends at every frame whose track already holds ``n_frames``
consecutive observations; a missing frame index starts a new segment.
Each window is labeled with the label of its last frame.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .clips import ClipRecord
from .model import LABEL_INDEX
from .skeleton import NUM_CHANNELS, NUM_JOINTS, normalize_joints

UNLABELED = -1


@dataclass
class Track:
    clip_id: str
    pedestrian_id: int
    frame_indices: np.ndarray   # (L,) strictly increasing
    joints: np.ndarray          # (L, 19, 3) raw
    labels: list


def extract_tracks(clip: ClipRecord) -> list[Track]:
    per_ped: dict[int, tuple[list, list, list]] = {}
    for frame in clip.frames:
        for ped in frame.pedestrians:
            idx, joints, labels = per_ped.setdefault(ped.pedestrian_id, ([], [], []))
            idx.append(frame.frame_index)
            joints.append(ped.joints)
            labels.append(ped.label)
    tracks = []
    for pid in sorted(per_ped):
        idx, joints, labels = per_ped[pid]
        order = np.argsort(idx, kind="stable")
        tracks.append(Track(
            clip.clip_id, pid, np.asarray(idx)[order],
            np.asarray(joints, dtype=np.float64).reshape(-1, NUM_JOINTS, NUM_CHANNELS)[order],
            [labels[i] for i in order],
        ))
    return tracks


def gap_free_segments(frame_indices: np.ndarray) -> list[tuple[int, int]]:
    """``[start, stop)`` position ranges of consecutive frame indices."""
    if len(frame_indices) == 0:
        return []
    breaks = np.flatnonzero(np.diff(frame_indices) != 1) + 1
    starts = np.concatenate([[0], breaks])
    stops = np.concatenate([breaks, [len(frame_indices)]])
    return list(zip(starts.tolist(), stops.tolist()))


def window_count(length: int, n_frames: int) -> int:
    return max(0, length - n_frames + 1)


@dataclass
class WindowSet:
    """All step-1 windows of a collection of clips for one window length.

    ``frames`` holds normalized frames of every track back to back; window
    ``i`` covers ``frames[ends[i] - n_frames + 1 : ends[i] + 1]``.
    """

    name: str
    n_frames: int
    frames: np.ndarray
    ends: np.ndarray
    labels: np.ndarray          # class index, UNLABELED for null labels
    clip_ids: list
    pedestrian_ids: np.ndarray
    frame_indices: np.ndarray

    def __len__(self) -> int:
        return len(self.ends)

    def windows(self, idx=None) -> np.ndarray:
        ends = self.ends if idx is None else self.ends[idx]
        offsets = np.arange(-self.n_frames + 1, 1)
        return self.frames[ends[:, None] + offsets]

    def labeled(self) -> "WindowSet":
        keep = np.flatnonzero(self.labels != UNLABELED)
        return self.subset(keep)

    def subset(self, idx: np.ndarray) -> "WindowSet":
        return WindowSet(self.name, self.n_frames, self.frames, self.ends[idx], self.labels[idx],
                         [self.clip_ids[i] for i in idx], self.pedestrian_ids[idx],
                         self.frame_indices[idx])


def build_window_set(clips: Iterable[ClipRecord], n_frames: int, name: str = "") -> WindowSet:
    frames, ends, labels, clip_ids, ped_ids, frame_idx = [], [], [], [], [], []
    offset = 0
    for clip in clips:
        for track in extract_tracks(clip):
            norm = normalize_joints(track.joints)
            frames.append(norm)
            for start, stop in gap_free_segments(track.frame_indices):
                for pos in range(start + n_frames - 1, stop):
                    ends.append(offset + pos)
                    lab = track.labels[pos]
                    labels.append(UNLABELED if lab is None else LABEL_INDEX[lab])
                    clip_ids.append(track.clip_id)
                    ped_ids.append(track.pedestrian_id)
                    frame_idx.append(int(track.frame_indices[pos]))
            offset += len(norm)
    all_frames = (np.concatenate(frames) if frames
                  else np.zeros((0, NUM_JOINTS, NUM_CHANNELS)))
    return WindowSet(name, n_frames, all_frames, np.asarray(ends, dtype=np.int64),
                     np.asarray(labels, dtype=np.int64), clip_ids,
                     np.asarray(ped_ids, dtype=np.int64), np.asarray(frame_idx, dtype=np.int64))
