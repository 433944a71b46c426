import io
import json

import numpy as np
import pytest

from pedintent.clips import (
    ClipFormatError, ClipRecord, FrameRecord, PedestrianObs, convert_coco17_clip,
    import_coco17_records, read_clips, write_clips,
)
from pedintent.skeleton import JointId, normalize_joints
from pedintent.windows import (
    UNLABELED, build_window_set, extract_tracks, gap_free_segments, window_count,
)

from helpers import toy_clips


def test_window_count_formula():
    assert [window_count(n, 4) for n in (0, 3, 4, 10)] == [0, 0, 1, 7]


def test_gap_free_segments():
    assert gap_free_segments(np.array([0, 1, 2, 5, 6, 9])) == [(0, 3), (3, 5), (5, 6)]
    assert gap_free_segments(np.array([], dtype=int)) == []


def gappy_clip():
    rng = np.random.default_rng(0)
    idx = list(range(0, 7)) + list(range(9, 12)) + list(range(15, 25))
    frames = [FrameRecord(i, [PedestrianObs(2, "C" if i < 20 else None,
                                            rng.uniform(0, 100, (19, 3)))]) for i in idx]
    return ClipRecord("g", 30.0, 100, 100, frames), idx


def test_window_set_counts_labels_and_contents():
    clip, idx = gappy_clip()
    ws = build_window_set([clip], 4)
    assert len(ws) == 4 + 0 + 7
    assert list(ws.frame_indices) == [3, 4, 5, 6] + list(range(18, 25))
    assert list(ws.labels) == [0] * 6 + [UNLABELED] * 5
    assert len(ws.labeled()) == 6
    raw = np.stack([f.pedestrians[0].joints for f in clip.frames])
    w = ws.windows(np.array([4]))[0]
    pos = idx.index(18)
    assert np.array_equal(w, normalize_joints(raw[pos - 3:pos + 1]))


def test_tracks_sorted_per_pedestrian():
    clips = toy_clips(2)
    frames = list(reversed(clips[0].frames))
    tracks = extract_tracks(ClipRecord("r", 30, 10, 10, frames))
    assert len(tracks) == 1 and list(tracks[0].frame_indices) == list(range(20))


def test_clip_roundtrip(tmp_path):
    clips = toy_clips(3)
    clips[1].frames[2].pedestrians[0].label = None
    path = tmp_path / "c.jsonl"
    assert write_clips(path, clips) == 3
    back = read_clips(path)
    assert [c.to_dict() for c in back] == [c.to_dict() for c in clips]
    assert back[1].label_counts() == {"C": 0, "NC": 19}


def test_clip_rejects_bad_shapes():
    d = toy_clips(1)[0].to_dict()
    d["frames"][0]["pedestrians"][0]["joints"] = [[0, 0, 0]] * 18
    with pytest.raises(ClipFormatError):
        read_clips(io.StringIO(json.dumps(d)))
    with pytest.raises(ClipFormatError):
        read_clips(io.StringIO(json.dumps({"clip_id": "x"})))


def test_import_coco17(tmp_path):
    kp = np.random.default_rng(1).uniform(0, 300, (17, 3))
    rec = ClipRecord("k", 30.0, 640, 480, [FrameRecord(0, [PedestrianObs(0, "NC", kp)])])
    src = io.StringIO(json.dumps(rec.to_dict()) + "\n")
    dest = tmp_path / "out.jsonl"
    assert import_coco17_records(src, dest) == 1
    out = read_clips(dest)[0]
    joints = out.frames[0].pedestrians[0].joints
    np.testing.assert_allclose(joints[JointId.NECK], (kp[5] + kp[6]) / 2)
    np.testing.assert_allclose(joints[JointId.CHIP], (kp[11] + kp[12]) / 2)
    assert convert_coco17_clip(rec).to_dict() == out.to_dict()
    with pytest.raises(ClipFormatError):
        import_coco17_records(io.StringIO(json.dumps(out.to_dict()) + "\n"), tmp_path / "x")
