"""Streaming sliding-window inference and the C/NC metric harness.

Metrics count (pedestrian, frame) prediction events with C as the
positive class; events whose ground truth is null are emitted but never
scored. Warm-up frames (fewer than ``n_frames`` observations) emit nothing.
"""
from __future__ import annotations

import csv
import io
import json
from collections import deque
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .clips import ClipFormatError, ClipRecord, FrameRecord
from .model import LABELS, PedGnnConfig, PedGnnParams, forward_batch, softmax
from .skeleton import normalize_joints
from .windows import UNLABELED, WindowSet

INFER_CHUNK = 2048


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionEvent:
    clip_id: str
    pedestrian_id: int
    frame: int
    p_cross: float
    predicted: str
    gt: str | None

    def to_dict(self) -> dict:
        return asdict(self)


def _label_from_logits(logits: np.ndarray) -> np.ndarray:
    return np.where(logits[:, 0] >= logits[:, 1], 0, 1)


def predict_windows(windows: np.ndarray, params: PedGnnParams, config: PedGnnConfig):
    """Infer-mode ``(p_cross, predicted class index)`` for stacked windows."""
    p_cross = np.empty(len(windows))
    pred = np.empty(len(windows), dtype=np.int64)
    for lo in range(0, len(windows), INFER_CHUNK):
        logits, _ = forward_batch(windows[lo:lo + INFER_CHUNK], params, config)
        p_cross[lo:lo + INFER_CHUNK] = softmax(logits)[:, 0]
        pred[lo:lo + INFER_CHUNK] = _label_from_logits(logits)
    return p_cross, pred


class PedestrianTrack:
    """Ring buffer of the latest normalized frames of one pedestrian."""

    def __init__(self, pedestrian_id: int, n_frames: int):
        self.pedestrian_id = pedestrian_id
        self.buffer: deque = deque(maxlen=n_frames)
        self.last_frame: int | None = None
        self.frames_seen = 0

    def push(self, frame_index: int, joints: np.ndarray) -> bool:
        """Add one observation; True once the buffer holds a full window."""
        if self.last_frame is not None:
            if frame_index <= self.last_frame:
                raise ClipFormatError(
                    f"pedestrian {self.pedestrian_id}: frame {frame_index} is not after "
                    f"frame {self.last_frame}")
            if frame_index != self.last_frame + 1:
                self.buffer.clear()
        self.buffer.append(normalize_joints(joints))
        self.last_frame = frame_index
        self.frames_seen += 1
        return len(self.buffer) == self.buffer.maxlen

    def window(self) -> np.ndarray:
        return np.stack(self.buffer)


class StreamPredictor:
    """Online predictor: feed frames in order, get events as soon as a
    pedestrian's window is full."""

    def __init__(self, params: PedGnnParams, config: PedGnnConfig, clip_id: str = ""):
        self.params = params
        self.config = config
        self.clip_id = clip_id
        self.tracks: dict[int, PedestrianTrack] = {}

    def ready_windows(self, frame: FrameRecord):
        """Push a frame; yield ``(pedestrian_id, gt, window)`` for full buffers."""
        for ped in sorted(frame.pedestrians, key=lambda p: p.pedestrian_id):
            track = self.tracks.get(ped.pedestrian_id)
            if track is None:
                track = self.tracks[ped.pedestrian_id] = PedestrianTrack(
                    ped.pedestrian_id, self.config.n_frames)
            if track.push(frame.frame_index, ped.joints):
                yield ped.pedestrian_id, ped.label, track.window()

    def push(self, frame: FrameRecord) -> list[PredictionEvent]:
        ready = list(self.ready_windows(frame))
        if not ready:
            return []
        p_cross, pred = predict_windows(np.stack([w for _, _, w in ready]), self.params,
                                        self.config)
        return [PredictionEvent(self.clip_id, pid, frame.frame_index, float(p), LABELS[c], gt)
                for (pid, gt, _), p, c in zip(ready, p_cross, pred)]


def stream_predict(clip: ClipRecord, params: PedGnnParams, config: PedGnnConfig,
                   online: bool = False) -> list[PredictionEvent]:
    """Sliding-window predictions for every pedestrian of a clip.

    Events come out ordered by frame, then pedestrian id. With
    ``online=False`` the windows are gathered first and evaluated in
    batches, which gives the same events much faster.
    """
    predictor = StreamPredictor(params, config, clip.clip_id)
    frames = sorted(clip.frames, key=lambda f: f.frame_index)
    if online:
        events = []
        for frame in frames:
            events.extend(predictor.push(frame))
        return events
    keys, windows = [], []
    for frame in frames:
        for pid, gt, window in predictor.ready_windows(frame):
            keys.append((frame.frame_index, pid, gt))
            windows.append(window)
    if not windows:
        return []
    p_cross, pred = predict_windows(np.stack(windows), params, config)
    return [PredictionEvent(clip.clip_id, pid, f, float(p), LABELS[c], gt)
            for (f, pid, gt), p, c in zip(keys, p_cross, pred)]


def predict_window_set(ws: WindowSet, params: PedGnnParams, config: PedGnnConfig):
    """Batched predictions over a prepared window set."""
    if len(ws) == 0:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    p_cross = np.empty(len(ws))
    pred = np.empty(len(ws), dtype=np.int64)
    for lo in range(0, len(ws), INFER_CHUNK):
        idx = np.arange(lo, min(lo + INFER_CHUNK, len(ws)))
        p_cross[idx], pred[idx] = predict_windows(ws.windows(idx), params, config)
    return p_cross, pred


def window_set_events(ws: WindowSet, params: PedGnnParams,
                      config: PedGnnConfig) -> list[PredictionEvent]:
    p_cross, pred = predict_window_set(ws, params, config)
    return [
        PredictionEvent(ws.clip_ids[i], int(ws.pedestrian_ids[i]), int(ws.frame_indices[i]),
                        float(p_cross[i]), LABELS[pred[i]],
                        None if ws.labels[i] == UNLABELED else LABELS[ws.labels[i]])
        for i in range(len(ws))
    ]


# -- metrics -----------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str | None]]) -> "ConfusionCounts":
        tp = fp = tn = fn = 0
        for predicted, gt in pairs:
            if gt is None:
                continue
            if predicted == "C":
                if gt == "C":
                    tp += 1
                else:
                    fp += 1
            elif gt == "C":
                fn += 1
            else:
                tn += 1
        return cls(tp, fp, tn, fn)

    @classmethod
    def from_arrays(cls, predicted: np.ndarray, gt: np.ndarray) -> "ConfusionCounts":
        """Class-index arrays (0 = C); UNLABELED ground truth is skipped."""
        keep = gt != UNLABELED
        pc = predicted[keep] == 0
        gc = gt[keep] == 0
        return cls(int(np.sum(pc & gc)), int(np.sum(pc & ~gc)),
                   int(np.sum(~pc & ~gc)), int(np.sum(~pc & gc)))


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    counts: ConfusionCounts
    degenerate: bool


def metrics_from_counts(counts: ConfusionCounts) -> Metrics:
    if counts.total == 0:
        raise EvaluationError("no scored prediction events")
    degenerate = False

    def ratio(num, den):
        nonlocal degenerate
        if den == 0:
            degenerate = True
            return 0.0
        return num / den

    precision = ratio(counts.tp, counts.tp + counts.fp)
    recall = ratio(counts.tp, counts.tp + counts.fn)
    f1 = ratio(2 * precision * recall, precision + recall)
    accuracy = (counts.tp + counts.tn) / counts.total
    return Metrics(accuracy, precision, recall, f1, counts, degenerate)


def compute_metrics(events: Iterable) -> Metrics:
    """Accuracy, precision, recall and F1 from prediction events or
    ``(predicted, gt)`` pairs."""
    pairs = ((e.predicted, e.gt) if isinstance(e, PredictionEvent) else e for e in events)
    return metrics_from_counts(ConfusionCounts.from_pairs(pairs))


# -- reports -----------------------------------------------------------------

REPORT_COLUMNS = ("Train", "Test", "N_F", "Accuracy", "Precision", "Recall", "F1-score")


@dataclass(frozen=True)
class ReportRow:
    train: str
    test: str
    n_frames: int
    accuracy: float   # percentages
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_metrics(cls, train: str, test: str, n_frames: int, m: Metrics) -> "ReportRow":
        return cls(train, test, n_frames, round(100 * m.accuracy, 2), round(100 * m.precision, 2),
                   round(100 * m.recall, 2), round(100 * m.f1, 2))

    def cells(self) -> list[str]:
        return [self.train, self.test, f"{self.n_frames:02d}", f"{self.accuracy:.2f}",
                f"{self.precision:.2f}", f"{self.recall:.2f}", f"{self.f1:.2f}"]


def _sorted_rows(rows: Sequence[ReportRow]) -> list[ReportRow]:
    return sorted(rows, key=lambda r: (r.test, r.train))


def format_report(rows: Sequence[ReportRow]) -> str:
    if not rows:
        raise EvaluationError("report needs at least one row")
    table = [list(REPORT_COLUMNS)] + [r.cells() for r in _sorted_rows(rows)]
    widths = [max(len(row[i]) for row in table) for i in range(len(REPORT_COLUMNS))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def report_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in _sorted_rows(rows):
        writer.writerow(r.cells())
    return buf.getvalue()


def parse_report_csv(text: str) -> list[ReportRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != REPORT_COLUMNS:
        raise EvaluationError(f"unexpected report header {header}")
    return [ReportRow(r[0], r[1], int(r[2]), float(r[3]), float(r[4]), float(r[5]), float(r[6]))
            for r in reader]


def events_jsonl(events: Iterable[PredictionEvent]) -> str:
    return "".join(json.dumps(e.to_dict()) + "\n" for e in events)
