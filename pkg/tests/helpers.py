"""Small hand-built clips shared by several test modules."""
import numpy as np

from pedintent.clips import ClipRecord, FrameRecord, PedestrianObs


def pose(label, rng, jitter=2.0):
    """A 19-joint pose whose shape depends on the label."""
    base = np.zeros((19, 3))
    base[:, 0] = np.linspace(0, 40, 19)
    base[:, 1] = np.linspace(0, 120, 19)
    if label == "C":
        base[15:, 0] += 60.0     # legs stretched out to one side
    base[:, :2] += rng.normal(scale=jitter, size=(19, 2))
    base[:, 2] = 1.0
    return base


def toy_clips(n, seed=0, n_frames=20, offset=(300.0, 200.0)):
    """Alternating C and NC single-pedestrian clips."""
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(n):
        label = "C" if i % 2 == 0 else "NC"
        frames = []
        for f in range(n_frames):
            joints = pose(label, rng)
            joints[:, 0] += offset[0]
            joints[:, 1] += offset[1]
            frames.append(FrameRecord(f, [PedestrianObs(0, label, joints)]))
        clips.append(ClipRecord(f"toy{seed}_{i:03d}", 30.0, 1600, 600, frames))
    return clips
