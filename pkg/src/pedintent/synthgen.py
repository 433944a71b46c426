"""Procedural C/NC clip generator.

A flat world with a straight road along +z, an ego camera driving down it,
and one scripted pedestrian per clip. Pedestrians are posed by a
sinusoidal gait model, projected through a pinhole camera, labeled from
their script, and filtered for visibility.

World axes: x to the right, y up, z forward along the road. A heading
``h`` means walking direction ``(cos h, sin h)`` in the (x, z) plane.
"""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from . import rng as rngs
from .clips import ClipRecord, FrameRecord, PedestrianObs, write_clips
from .skeleton import NUM_JOINTS, JointId

log = logging.getLogger(__name__)

SCENARIO_KINDS = ("perpendicular_cross", "mid_lane_abort", "walk_along_sidewalk",
                  "stand_still", "diagonal_cross")
PIXEL_QUANTUM = 1.0 / 1024   # output pixel grid, exactly representable
TIME_EPS = 1e-9
TURN_RATE = math.pi / 0.8    # rad/s for in-place turns
RAMP_S = 0.3                 # gait amplitude fade in/out


class GenerationError(RuntimeError):
    pass


# -- specs -------------------------------------------------------------------

@dataclass(frozen=True)
class BodyModel:
    thigh: float = 0.45
    shin: float = 0.43
    hip_half_width: float = 0.10
    torso: float = 0.52
    shoulder_half_width: float = 0.18
    upper_arm: float = 0.29
    forearm: float = 0.26
    head_up: float = 0.20
    head_forward: float = 0.08

    def scaled(self, s: float) -> "BodyModel":
        return BodyModel(**{f.name: getattr(self, f.name) * s for f in fields(self)})

    @property
    def pelvis_height(self) -> float:
        return self.thigh + self.shin


@dataclass(frozen=True)
class MotionPhase:
    """Constant-speed straight walk (``speed > 0``, fixed heading) or an
    in-place stand/turn (``speed == 0``, heading interpolated linearly).

    ``heading`` is the direction of travel. A backward phase keeps the body
    facing the opposite way and runs the gait in reverse with shorter steps.
    """

    t0: float
    t1: float
    heading0: float
    heading1: float
    speed: float
    backward: bool = False   # facing heading + pi, stepping backwards


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    walk_speed: float
    start_position: tuple[float, float]
    motion: tuple[MotionPhase, ...]
    duration: float
    commit_time: float | None = None
    abort_time: float | None = None
    step_frequency: float = 0.9
    label_timeline: tuple[tuple[int, int, str], ...] = ()

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.abort_time is not None and (self.commit_time is None
                                            or self.abort_time <= self.commit_time):
            raise ValueError("abort_time must come after commit_time")
        starts = [p.t0 for p in self.motion]
        if starts != sorted(starts):
            raise ValueError("motion phases must be sorted in time")

    @property
    def heading_timeline(self) -> list[tuple[float, float]]:
        return [(p.t0, p.heading0) for p in self.motion]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["motion"] = [asdict(p) for p in self.motion]
        d["label_timeline"] = [list(x) for x in self.label_timeline]
        d["heading_timeline"] = [list(x) for x in self.heading_timeline]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        d.pop("heading_timeline", None)
        d["motion"] = tuple(MotionPhase(**p) for p in d["motion"])
        d["start_position"] = tuple(d["start_position"])
        d["label_timeline"] = tuple(tuple(x) for x in d.get("label_timeline", ()))
        return cls(**d)


@dataclass(frozen=True)
class Camera:
    focal_px: float = 1000.0
    cx: float = 800.0
    cy: float = 300.0
    height_m: float = 1.4
    pitch_rad: float = 0.0     # positive tilts the view down
    lateral_m: float = 1.75    # camera x on the road
    ego_speed: float = 0.0     # m/s along +z

    def __post_init__(self):
        if self.height_m <= 0:
            raise ValueError("camera height must be positive")

    def position(self, t: float) -> np.ndarray:
        return np.array([self.lateral_m, self.height_m, self.ego_speed * t])


@dataclass(frozen=True)
class WorldSpec:
    road_band: tuple[float, float] = (-3.5, 3.5)
    sidewalks: tuple[tuple[float, float], ...] = ((-6.5, -3.5), (3.5, 6.5))
    camera: Camera = field(default_factory=Camera)
    width: int = 1600
    height: int = 600

    def __post_init__(self):
        if not self.road_band[1] > self.road_band[0]:
            raise ValueError("road band must have positive width")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        return cls(road_band=tuple(d["road_band"]),
                   sidewalks=tuple(tuple(s) for s in d["sidewalks"]),
                   camera=Camera(**d["camera"]), width=d["width"], height=d["height"])


@dataclass(frozen=True)
class NoiseModel:
    enabled: bool = True
    jitter_px: float = 1.0
    confidence_cap_px: float = 3.0
    dropout_prob: float = 0.02


@dataclass(frozen=True)
class GeneratorConfig:
    clip_count: int = 947
    clip_duration_s: float = 20.0
    fps: float = 30.0
    width: int = 1600
    height: int = 600
    focal_px: float = 1000.0
    camera_height_m: float = 1.4
    body_scale_range: tuple[float, float] = (0.85, 1.1)
    speed_range: tuple[float, float] = (1.0, 1.8)
    ego_speed_range: tuple[float, float] = (0.0, 0.5)
    depth_range: tuple[float, float] = (15.0, 30.0)
    noise: NoiseModel = field(default_factory=NoiseModel)
    scenario_mix: dict = field(default_factory=lambda: {k: 1.0 for k in SCENARIO_KINDS})
    seed: int = 0
    retry_limit: int = 50
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    workers: int = 1

    def __post_init__(self):
        if self.clip_count < 1:
            raise ValueError("clip_count must be >= 1")
        if self.fps <= 0 or self.clip_duration_s <= 0:
            raise ValueError("fps and clip_duration_s must be positive")
        unknown = set(self.scenario_mix) - set(SCENARIO_KINDS)
        if unknown:
            raise ValueError(f"unknown scenario kinds: {sorted(unknown)}")
        if not any(w > 0 for w in self.scenario_mix.values()):
            raise ValueError("scenario_mix needs a positive weight")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if "noise" in d and isinstance(d["noise"], dict):
            d["noise"] = NoiseModel(**d["noise"])
        for key in ("body_scale_range", "speed_range", "ego_speed_range", "depth_range", "split"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def world(self, ego_speed: float = 0.0) -> WorldSpec:
        cam = Camera(focal_px=self.focal_px, cx=self.width / 2, cy=self.height / 2,
                     height_m=self.camera_height_m, ego_speed=ego_speed)
        return WorldSpec(camera=cam, width=self.width, height=self.height)


# -- kinematics --------------------------------------------------------------

def _phase_index(spec: ScenarioSpec, t: float) -> int:
    for i in range(len(spec.motion) - 1, -1, -1):
        if t >= spec.motion[i].t0:
            return i
    return 0


def pelvis_ground(spec: ScenarioSpec, t: float) -> np.ndarray:
    """CHip position on the ground plane, (x, z)."""
    pos = np.array(spec.start_position, dtype=np.float64)
    for p in spec.motion:
        if t <= p.t0:
            break
        if p.speed > 0:
            dt = min(t, p.t1) - p.t0
            pos = pos + p.speed * dt * np.array([math.cos(p.heading0), math.sin(p.heading0)])
    return pos


def heading_at(spec: ScenarioSpec, t: float) -> float:
    p = spec.motion[_phase_index(spec, t)]
    if p.t1 <= p.t0 or t >= p.t1:
        return p.heading1
    frac = (t - p.t0) / (p.t1 - p.t0)
    return p.heading0 + frac * (p.heading1 - p.heading0)


def gait_amplitude(spec: ScenarioSpec, t: float) -> float:
    """Swing envelope; zero while standing, continuous in t."""
    p = spec.motion[_phase_index(spec, t)]
    if p.speed <= 0 or t > p.t1:
        return 0.0
    ramp = min(RAMP_S, (p.t1 - p.t0) / 2)
    env = max(0.0, min(1.0, (t - p.t0) / ramp, (p.t1 - t) / ramp))
    return BACKWARD_STRIDE * env if p.backward else env


def facing_at(spec: ScenarioSpec, t: float) -> float:
    p = spec.motion[_phase_index(spec, t)]
    h = heading_at(spec, t)
    return h + math.pi if p.backward and p.t0 <= t <= p.t1 else h


LEG_SWING = 0.45
KNEE_FLEX = 0.6
ARM_SWING = 0.35
LEAN = 0.08
BACKWARD_STRIDE = 0.5
BACKWARD_SPEED = 0.6


def synthesize_gait(spec: ScenarioSpec, body: BodyModel, t: float) -> np.ndarray:
    """19 world-space joint positions (meters) at time ``t``."""
    if not -TIME_EPS <= t <= spec.duration + TIME_EPS:
        raise ValueError(f"t={t} outside [0, {spec.duration}]")
    h = facing_at(spec, t)
    a = gait_amplitude(spec, t)
    phase = 2.0 * math.pi * spec.step_frequency * t
    if spec.motion[_phase_index(spec, t)].backward:
        phase = -phase   # gait runs in reverse; a == 0 at phase boundaries
    fwd = np.array([math.cos(h), 0.0, math.sin(h)])
    up = np.array([0.0, 1.0, 0.0])
    left = np.cross(fwd, up)

    gx, gz = pelvis_ground(spec, t)
    chip = np.array([gx, body.pelvis_height, gz])
    J = np.empty((NUM_JOINTS, 3))
    J[JointId.CHIP] = chip

    def limb(angle):
        # unit vector hanging down, rotated forward by angle in the sagittal plane
        return -math.cos(angle) * up + math.sin(angle) * fwd

    for side, hip, knee, ankle, ph in ((1.0, JointId.LHIP, JointId.LKNEE, JointId.LANKLE, 0.0),
                                       (-1.0, JointId.RHIP, JointId.RKNEE, JointId.RANKLE, math.pi)):
        swing = LEG_SWING * a * math.sin(phase + ph)
        flex = KNEE_FLEX * a * 0.5 * (1.0 + math.sin(phase + ph + 0.5))
        J[hip] = chip + side * body.hip_half_width * left
        J[knee] = J[hip] + body.thigh * limb(swing)
        J[ankle] = J[knee] + body.shin * limb(swing - flex)

    lean = LEAN * a
    t_up = math.cos(lean) * up + math.sin(lean) * fwd
    t_fwd = math.cos(lean) * fwd - math.sin(lean) * up
    neck = chip + body.torso * t_up
    J[JointId.NECK] = neck
    for side, sh, el, wr, ph in ((1.0, JointId.LSHOULDER, JointId.LELBOW, JointId.LWRIST, math.pi),
                                 (-1.0, JointId.RSHOULDER, JointId.RELBOW, JointId.RWRIST, 0.0)):
        swing = ARM_SWING * a * math.sin(phase + ph)
        J[sh] = neck + side * body.shoulder_half_width * left
        J[el] = J[sh] + body.upper_arm * limb(swing)
        J[wr] = J[el] + body.forearm * limb(swing + 0.3 + 0.2 * a)

    s = body.head_up / 0.20   # head features scale with the body
    nose = neck + body.head_up * t_up + body.head_forward * t_fwd
    J[JointId.NOSE] = nose
    for side, eye, ear in ((1.0, JointId.LEYE, JointId.LEAR), (-1.0, JointId.REYE, JointId.REAR)):
        J[eye] = nose + s * (0.03 * t_up - 0.02 * t_fwd + side * 0.032 * left)
        J[ear] = J[eye] + s * (-0.01 * t_up - 0.08 * t_fwd + side * 0.04 * left)
    return J


# -- camera ------------------------------------------------------------------

MIN_DEPTH = 0.1


def camera_coords(camera: Camera, points: np.ndarray, t: float) -> np.ndarray:
    """World points -> camera frame (x right, y down, z along the optical axis)."""
    rel = np.asarray(points, dtype=np.float64) - camera.position(t)
    cp, sp = math.cos(camera.pitch_rad), math.sin(camera.pitch_rad)
    x = rel[..., 0]
    y = -cp * rel[..., 1] - sp * rel[..., 2]
    z = -sp * rel[..., 1] + cp * rel[..., 2]
    return np.stack([x, y, z], axis=-1)


def project_points(camera: Camera, points: np.ndarray, t: float):
    """Pinhole projection. Returns ``(uv, in_front)``; points behind the
    camera are placed at the principal point."""
    c = camera_coords(camera, points, t)
    in_front = c[..., 2] > MIN_DEPTH
    depth = np.where(in_front, c[..., 2], 1.0)
    u = np.where(in_front, camera.cx + camera.focal_px * c[..., 0] / depth, camera.cx)
    v = np.where(in_front, camera.cy + camera.focal_px * c[..., 1] / depth, camera.cy)
    return np.stack([u, v], axis=-1), in_front


def quantize(px: np.ndarray) -> np.ndarray:
    return np.round(px / PIXEL_QUANTUM) * PIXEL_QUANTUM


def project(world: WorldSpec, joints3d: np.ndarray, t: float, noise: NoiseModel | None = None,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """(19, 3) pixel joints ``(u, v, confidence)`` after the noise model."""
    uv, in_front = project_points(world.camera, joints3d, t)
    conf = np.where(in_front, 1.0, 0.0)
    if noise is not None and noise.enabled:
        jitter = rng.normal(0.0, noise.jitter_px, uv.shape)
        uv = uv + jitter
        mag = np.linalg.norm(jitter, axis=-1)
        conf = conf * np.maximum(0.0, 1.0 - mag / noise.confidence_cap_px)
        conf = np.where(rng.random(len(conf)) < noise.dropout_prob, 0.0, conf)
    out = np.empty((NUM_JOINTS, 3))
    out[:, :2] = quantize(uv)
    out[:, 2] = quantize(conf)
    return out


# -- labels ------------------------------------------------------------------

def _inside(band, x: float) -> bool:
    return band[0] <= x <= band[1]


def road_exit_time(world: WorldSpec, spec: ScenarioSpec) -> float:
    """First time after intention onset at which the pelvis leaves the road
    band having been inside it; inf if that never happens."""
    if spec.commit_time is None:
        return math.inf
    band = world.road_band
    entered = _inside(band, pelvis_ground(spec, spec.commit_time)[0])
    for p in spec.motion:
        if p.speed <= 0 or p.t1 <= spec.commit_time:
            continue
        t0 = max(p.t0, spec.commit_time)
        x0 = pelvis_ground(spec, t0)[0]
        vx = p.speed * math.cos(p.heading0)
        # crossings of the two band edges within [t0, p.t1]
        events = []
        if abs(vx) > 0:
            for edge in band:
                tc = t0 + (edge - x0) / vx
                if t0 <= tc <= p.t1:
                    events.append(tc)
        for tc in sorted(events):
            ahead = pelvis_ground(spec, min(tc + 1e-6, p.t1))[0]
            if not entered:
                if _inside(band, ahead):
                    entered = True
            elif not _inside(band, ahead):
                return tc
        if not entered and _inside(band, pelvis_ground(spec, p.t1)[0]):
            entered = True
    return math.inf


def frame_time(frame_index: int, fps: float) -> float:
    return frame_index / fps


def label_frame(world: WorldSpec, spec: ScenarioSpec, frame_index: int, fps: float,
                exit_time: float | None = None) -> str:
    t = frame_time(frame_index, fps)
    if spec.commit_time is None or t < spec.commit_time - TIME_EPS:
        return "NC"
    if spec.abort_time is not None and t >= spec.abort_time - TIME_EPS:
        return "NC"
    if exit_time is None:
        exit_time = road_exit_time(world, spec)
    return "C" if t < exit_time else "NC"


def label_sequence(world: WorldSpec, spec: ScenarioSpec, n_frames: int, fps: float) -> list[str]:
    exit_time = road_exit_time(world, spec)
    return [label_frame(world, spec, i, fps, exit_time) for i in range(n_frames)]


def label_runs(labels: list[str]) -> tuple[tuple[int, int, str], ...]:
    """Run-length form ``(first_frame, last_frame, label)``."""
    runs = []
    for i, lab in enumerate(labels):
        if runs and runs[-1][2] == lab:
            runs[-1][1] = i
        else:
            runs.append([i, i, lab])
    return tuple(tuple(r) for r in runs)


# -- scenario scripts --------------------------------------------------------

MIN_CLEARANCE_M = 8.0


def _along_heading(rng, z: float, speed: float, remaining: float, world: WorldSpec,
                   duration: float) -> float:
    """Random direction along the sidewalk, but never one that would walk
    the pedestrian past the ego camera before the clip ends."""
    toward = rng.random() < 0.5
    cam_end = world.camera.ego_speed * duration
    if z - speed * remaining < cam_end + MIN_CLEARANCE_M:
        toward = False
    return -0.5 * math.pi if toward else 0.5 * math.pi


class _Script:
    """Builds a motion timeline phase by phase."""

    def __init__(self, duration: float, heading: float):
        self.duration = duration
        self.t = 0.0
        self.heading = heading
        self.phases: list[MotionPhase] = []
        self.t_walked = 0.0   # forward-walking time so far

    def _add(self, dt: float, h1: float, speed: float, backward: bool = False):
        if self.t >= self.duration or dt <= 0:
            return
        t1 = min(self.duration, self.t + dt)
        self.phases.append(MotionPhase(self.t, t1, self.heading, h1, speed, backward))
        self.t, self.heading = t1, h1

    def stand(self, dt: float):
        self._add(dt, self.heading, 0.0)

    def turn(self, h1: float):
        self._add(abs(h1 - self.heading) / TURN_RATE, h1, 0.0)

    def walk(self, dt: float, speed: float):
        self.t_walked += max(0.0, min(dt, self.duration - self.t))
        self._add(dt, self.heading, speed)

    def step_back(self, dt: float, speed: float):
        """Retreat along ``heading + pi`` while still facing ``heading``."""
        h = self.heading
        self.heading = h + math.pi
        self._add(dt, self.heading, speed, backward=True)
        self.heading = h

    def finish(self) -> tuple[MotionPhase, ...]:
        self.stand(self.duration - self.t)
        return tuple(self.phases)


def make_scenario(kind: str, cfg: GeneratorConfig, world: WorldSpec,
                  rng: np.random.Generator) -> tuple[ScenarioSpec, BodyModel]:
    """Randomized script for one clip."""
    if kind not in SCENARIO_KINDS:
        raise ValueError(f"unknown scenario kind {kind!r}")
    D = cfg.clip_duration_s
    body = BodyModel().scaled(rng.uniform(*cfg.body_scale_range))
    speed = rng.uniform(*cfg.speed_range)
    step_freq = speed / (1.6 * body.thigh / 0.45)
    side = 1.0 if rng.random() < 0.5 else -1.0
    lo, hi = world.road_band
    curb = hi if side > 0 else lo
    curb_offset = rng.uniform(0.3, 1.2)
    x0 = curb + side * curb_offset
    z0 = rng.uniform(*cfg.depth_range)
    toward_road = math.pi if side > 0 else 0.0
    commit = abort = None

    if kind in ("perpendicular_cross", "diagonal_cross", "mid_lane_abort"):
        commit = float(rng.uniform(0.5, max(0.6, min(3.0, 0.3 * D))))
        heading = toward_road
        if kind == "diagonal_cross":
            heading += rng.choice([-1.0, 1.0]) * rng.uniform(math.radians(20), math.radians(40))
        script = _Script(D, heading)
        script.stand(commit)
        lateral = abs(math.cos(heading))
        if kind == "mid_lane_abort":
            into_road = rng.uniform(1.0, 0.6 * (hi - lo))
            walk_t = (curb_offset + into_road) / (speed * lateral)
            abort = commit + walk_t
            script.walk(walk_t, speed)
            # hesitate, then back off towards the curb while watching traffic
            script.stand(rng.uniform(0.3, 1.0))
            script.step_back(walk_t / BACKWARD_SPEED, BACKWARD_SPEED * speed)
        else:
            far_margin = 0.2
            walk_t = (curb_offset + (hi - lo) + far_margin) / (speed * lateral)
            script.walk(walk_t, speed)
            z_turn = z0 + speed * script.t_walked * math.sin(heading)
            script.turn(_along_heading(rng, z_turn, speed, D - script.t, world, D))
            script.walk(D, speed)
        motion = script.finish()
    elif kind == "walk_along_sidewalk":
        heading = _along_heading(rng, z0, speed, D, world, D)
        x0 = curb + side * rng.uniform(0.5, 2.5)
        script = _Script(D, heading)
        script.walk(D, speed)
        motion = script.finish()
    else:  # stand_still
        script = _Script(D, float(rng.uniform(-math.pi, math.pi)))
        motion = script.finish()
        speed = 0.0

    if abort is not None and (abort >= D or abort <= commit):
        abort = None if abort >= D else abort
    spec = ScenarioSpec(kind=kind, walk_speed=float(speed), start_position=(float(x0), float(z0)),
                        motion=motion, duration=D, commit_time=commit, abort_time=abort,
                        step_frequency=float(step_freq))
    return spec, body


# -- rendering and validation ------------------------------------------------

MIN_PIXEL_HEIGHT = 20.0
MAX_BAD_FRACTION = 0.5


def n_clip_frames(cfg_or_duration, fps: float | None = None) -> int:
    if isinstance(cfg_or_duration, GeneratorConfig):
        return int(round(cfg_or_duration.clip_duration_s * cfg_or_duration.fps))
    return int(round(cfg_or_duration * fps))


def render_clip(clip_id: str, world: WorldSpec, spec: ScenarioSpec, body: BodyModel,
                fps: float, noise: NoiseModel | None, rng: np.random.Generator) -> ClipRecord:
    """Project every frame; a pedestrian appears in a frame only when all
    joints are in front of the camera and its bbox overlaps the image."""
    n = n_clip_frames(spec.duration, fps)
    labels = label_sequence(world, spec, n, fps)
    frames = []
    for i in range(n):
        t = min(frame_time(i, fps), spec.duration)
        j3 = synthesize_gait(spec, body, t)
        _, in_front = project_points(world.camera, j3, t)
        joints = project(world, j3, t, noise, rng)
        peds = []
        if in_front.all() and _bbox_overlaps(joints, world):
            peds.append(PedestrianObs(0, labels[i], joints))
        frames.append(FrameRecord(i, peds))
    return ClipRecord(clip_id, fps, world.width, world.height, frames)


def _bbox(joints: np.ndarray):
    return joints[:, 0].min(), joints[:, 1].min(), joints[:, 0].max(), joints[:, 1].max()


def _bbox_overlaps(joints: np.ndarray, world: WorldSpec) -> bool:
    x0, y0, x1, y1 = _bbox(joints)
    return x1 >= 0 and y1 >= 0 and x0 <= world.width and y0 <= world.height


def validate_clip(clip: ClipRecord) -> tuple[bool, str | None]:
    """Accept unless, for more than half of the frames, the pedestrian is
    off screen (``off_screen``) or shorter than 20 px (``too_small``)."""
    n = len(clip.frames)
    if n == 0:
        return False, "empty"
    off = small = 0
    for f in clip.frames:
        visible = [p for p in f.pedestrians
                   if x_overlap(p.joints, clip.width, clip.height)]
        if not visible:
            off += 1
            continue
        _, y0, _, y1 = _bbox(visible[0].joints)
        if y1 - y0 < MIN_PIXEL_HEIGHT:
            small += 1
    if off / n > MAX_BAD_FRACTION:
        return False, "off_screen"
    if small / n > MAX_BAD_FRACTION:
        return False, "too_small"
    return True, None


def x_overlap(joints: np.ndarray, width: int, height: int) -> bool:
    x0, y0, x1, y1 = _bbox(joints)
    return x1 >= 0 and y1 >= 0 and x0 <= width and y0 <= height


# -- dataset -----------------------------------------------------------------

@dataclass
class Candidate:
    index: int
    kind: str
    spec: ScenarioSpec
    body: BodyModel
    world: WorldSpec
    clip: ClipRecord
    accepted: bool
    reason: str | None


def _pick_kind(cfg: GeneratorConfig, rng: np.random.Generator) -> str:
    kinds = [k for k in SCENARIO_KINDS if cfg.scenario_mix.get(k, 0) > 0]
    w = np.array([float(cfg.scenario_mix[k]) for k in kinds])
    return kinds[int(rng.choice(len(kinds), p=w / w.sum()))]


def generate_candidate(cfg: GeneratorConfig, index: int) -> Candidate:
    """Candidate clip ``index``; depends only on (seed, index)."""
    rng = rngs.stream(cfg.seed, "clip", index)
    kind = _pick_kind(cfg, rng)
    world = cfg.world(ego_speed=float(rng.uniform(*cfg.ego_speed_range)))
    spec, body = make_scenario(kind, cfg, world, rng)
    labels = label_sequence(world, spec, n_clip_frames(cfg), cfg.fps)
    spec = ScenarioSpec(**{**{f.name: getattr(spec, f.name) for f in fields(spec)},
                           "label_timeline": label_runs(labels)})
    noise_rng = rngs.stream(cfg.seed, "clip", index, "noise")
    clip = render_clip(f"cand_{index:06d}", world, spec, body, cfg.fps, cfg.noise, noise_rng)
    ok, reason = validate_clip(clip)
    return Candidate(index, kind, spec, body, world, clip, ok, reason)


def _candidates(cfg: GeneratorConfig) -> Iterator[Candidate]:
    if cfg.workers <= 1:
        i = 0
        while True:
            yield generate_candidate(cfg, i)
            i += 1
    chunk = 4 * cfg.workers
    start = 0
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        while True:
            idx = range(start, start + chunk)
            yield from pool.map(generate_candidate, [cfg] * chunk, idx)
            start += chunk


def manifest_entry(c: Candidate, clip_id: str | None) -> dict:
    return {
        "clip_id": clip_id,
        "candidate": c.index,
        "kind": c.kind,
        "accepted": c.accepted,
        "reason": c.reason,
        "scenario": c.spec.to_dict(),
        "body": asdict(c.body),
        "world": c.world.to_dict(),
        "fps": c.clip.fps,
        "n_frames": len(c.clip.frames),
        "label_counts": c.clip.label_counts() if c.accepted else None,
    }


@dataclass
class GeneratedDataset:
    clips: list[ClipRecord]
    manifest: list[dict]
    split: dict[str, list[str]]


def split_clips(clip_ids: list[str], fractions, seed: int) -> dict[str, list[str]]:
    n = len(clip_ids)
    order = rngs.stream(seed, "split").permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(n - n_train, int(round(fractions[1] * n)))
    pick = lambda sl: sorted(clip_ids[i] for i in order[sl])
    return {"train": pick(slice(0, n_train)), "val": pick(slice(n_train, n_train + n_val)),
            "test": pick(slice(n_train + n_val, n))}


def generate_dataset(cfg: GeneratorConfig) -> GeneratedDataset:
    """Generate until ``clip_count`` clips pass validation.

    Raises GenerationError after ``retry_limit`` consecutive rejections.
    """
    clips, manifest = [], []
    streak: Counter = Counter()
    for cand in _candidates(cfg):
        if cand.accepted:
            clip_id = f"clip_{len(clips):05d}"
            cand.clip.clip_id = clip_id
            clips.append(cand.clip)
            manifest.append(manifest_entry(cand, clip_id))
            streak.clear()
            if len(clips) == cfg.clip_count:
                break
        else:
            manifest.append(manifest_entry(cand, None))
            streak[cand.reason] += 1
            if sum(streak.values()) >= cfg.retry_limit:
                reason, count = streak.most_common(1)[0]
                raise GenerationError(
                    f"{cfg.retry_limit} consecutive rejections; dominant reason "
                    f"{reason!r} ({count} clips)")
    split = split_clips([c.clip_id for c in clips], cfg.split, cfg.seed)
    return GeneratedDataset(clips, manifest, split)


def write_dataset(ds: GeneratedDataset, out_dir) -> dict:
    """Write per-split clip streams, the manifest and the split file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_id = {c.clip_id: c for c in ds.clips}
    counts = {}
    for part, ids in ds.split.items():
        write_clips(out / f"{part}.jsonl", (by_id[i] for i in ids))
        c = Counter()
        for i in ids:
            c.update(by_id[i].label_counts())
        counts[part] = {"C": c["C"], "NC": c["NC"]}
    with open(out / "manifest.jsonl", "w") as fh:
        for entry in ds.manifest:
            fh.write(json.dumps(entry) + "\n")
    split_doc = {"split": ds.split, "label_counts": counts}
    (out / "split.json").write_text(json.dumps(split_doc, indent=2) + "\n")
    return split_doc


def rederive_labels(entry: dict) -> list[str]:
    """Recompute a manifest entry's per-frame labels from its scenario."""
    spec = ScenarioSpec.from_dict(entry["scenario"])
    world = WorldSpec.from_dict(entry["world"])
    return label_sequence(world, spec, entry["n_frames"], entry["fps"])
