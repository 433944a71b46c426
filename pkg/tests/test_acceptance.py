"""End-to-end acceptance gate: one test per criterion, each printing a
PASS/FAIL line (collected again in the terminal summary)."""
import hashlib
import random
import time

import numpy as np

from pedintent.cli import bench_latency, main
from pedintent.clips import ClipRecord, FrameRecord, PedestrianObs
from pedintent.evaluate import compute_metrics, stream_predict, window_set_events
from pedintent.model import FOOTPRINT_BUDGET_BYTES, PedGnnConfig, PedGnnParams, count_params
from pedintent.model import loss_and_grad
from pedintent.skeleton import normalize_joints
from pedintent.synthgen import GeneratorConfig, NoiseModel, generate_dataset, rederive_labels
from pedintent.train import TrainPlan, sweep, train_one
from pedintent.windows import build_window_set, gap_free_segments, window_count

from helpers import toy_clips

LEARNING_MIX = ("perpendicular_cross", "mid_lane_abort", "walk_along_sidewalk", "stand_still")


def test_c01_parameter_budget(criterion):
    params = PedGnnParams.zeros(PedGnnConfig())
    count, nbytes = count_params(params)
    stats = bench_latency(params, PedGnnConfig(), repetitions=1, warmup=0)
    ok = (count, nbytes) == (6010, 24040) and stats["param_bytes"] <= FOOTPRINT_BUDGET_BYTES
    criterion(1, "parameter budget", ok, f"{count} params, {nbytes} bytes <= 27648")


def fd_worst(cfg, seed, eps=1e-5, batch=2):
    rng = np.random.default_rng(seed)
    params = PedGnnParams.init(cfg, rng)
    raw = rng.uniform(0, 500, (batch, cfg.n_frames, 19, 3))
    raw[..., 2] = rng.random(raw.shape[:-1])   # detector confidences live in [0, 1]
    windows = normalize_joints(raw)
    targets = rng.integers(0, 2, batch)
    _, grads = loss_and_grad(windows, targets, params, cfg, train=False)[:2]
    worst = 0.0
    for arr, g in zip(params.arrays(), grads.arrays()):
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = loss_and_grad(windows, targets, params, cfg, train=False)[0]
            flat[i] = old - eps
            down = loss_and_grad(windows, targets, params, cfg, train=False)[0]
            flat[i] = old
            num = (up - down) / (2 * eps)
            worst = max(worst, abs(gflat[i] - num) / max(1.0, abs(gflat[i]), abs(num)))
    return worst


def test_c02_gradient_correctness(criterion):
    configs = {
        "H1K1": PedGnnConfig(n_frames=3, hidden=1, cheb_order=1, fc_dims=(1, 1, 2)),
        "H3K3": PedGnnConfig(n_frames=3, hidden=3, cheb_order=3, fc_dims=(6, 4, 2)),
        "default": PedGnnConfig(n_frames=3),
    }
    t0 = time.perf_counter()
    worst = {name: max(fd_worst(cfg, seed) for seed in range(10)) for name, cfg in configs.items()}
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-5 and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    criterion(2, "finite-difference gradients", ok, f"worst rel err {detail}; {elapsed:.0f}s")


def test_c03_desk_scale_learning(criterion):
    t0 = time.perf_counter()
    gcfg = GeneratorConfig(clip_count=200, clip_duration_s=8.0, seed=0,
                           noise=NoiseModel(enabled=False),
                           scenario_mix={k: 1.0 for k in LEARNING_MIX})
    ds = generate_dataset(gcfg)
    by_id = {c.clip_id: c for c in ds.clips}
    part = {name: [by_id[i] for i in ids] for name, ids in ds.split.items()}
    plan = TrainPlan((8, 16), (0.001, 0.0005), max_epochs=15, batch_size=500, seed=0,
                     strict=False)
    result = sweep(plan, {"S": part["train"]}, {"S": part["val"]})
    best = result.best
    config = PedGnnConfig(n_frames=best.n_frames)
    test_ws = build_window_set(part["test"], best.n_frames, "test")
    m = compute_metrics(window_set_events(test_ws, best.best_params, config))
    elapsed = time.perf_counter() - t0
    ok = m.f1 >= 0.85 and elapsed < 30 * 60
    criterion(3, "desk-scale learning", ok,
              f"best N_F={best.n_frames} lr={best.lr} val F1 {best.best_f1:.4f}, "
              f"test F1 {m.f1:.4f} (P {m.precision:.4f} R {m.recall:.4f}); {elapsed:.0f}s")


def test_c04_overfit_sanity(criterion):
    t0 = time.perf_counter()
    clips = toy_clips(50, seed=4)
    config = PedGnnConfig(n_frames=8)
    ws = build_window_set(clips, 8, "train")
    r = train_one(config, 0.001, [ws], ws, max_epochs=100, seed=0)
    elapsed = time.perf_counter() - t0
    ok = r.best_f1 == 1.0 and elapsed < 300
    criterion(4, "overfit sanity", ok,
              f"training F1 {r.best_f1:.4f} at epoch {r.best_epoch}; {elapsed:.0f}s")


def test_c05_inference_latency(criterion):
    config = PedGnnConfig(n_frames=32)
    params = PedGnnParams.init(config, np.random.default_rng(0))
    stats = bench_latency(params, config, repetitions=1000, warmup=50)
    ok = stats["median_ms"] < 5.0
    criterion(5, "inference latency", ok,
              f"median {stats['median_ms']:.3f} ms, p99 {stats['p99_ms']:.3f} ms at N_F=32")


def transformed(clip, rng):
    # power-of-two scales and 1/1024-grid offsets keep the arithmetic exact
    a, c = 2.0 ** rng.integers(-4, 5, 2)
    b, d = rng.integers(-2**20, 2**20, 2) / 1024
    frames = []
    for f in clip.frames:
        peds = []
        for p in f.pedestrians:
            j = p.joints.copy()
            j[:, 0] = a * j[:, 0] + b
            j[:, 1] = c * j[:, 1] + d
            peds.append(PedestrianObs(p.pedestrian_id, p.label, j))
        frames.append(FrameRecord(f.frame_index, peds))
    return ClipRecord(clip.clip_id, clip.fps, clip.width, clip.height, frames)


def test_c06_normalization_invariance(criterion):
    t0 = time.perf_counter()
    ds = generate_dataset(GeneratorConfig(clip_count=100, clip_duration_s=1.5, seed=6))
    config = PedGnnConfig(n_frames=16)
    params = PedGnnParams.init(config, np.random.default_rng(6))
    rng = np.random.default_rng(60)
    mismatched = events = 0
    for clip in ds.clips:
        ref = stream_predict(clip, params, config)
        got = stream_predict(transformed(clip, rng), params, config)
        events += len(ref)
        mismatched += sum(x != y for x, y in zip(ref, got)) + abs(len(ref) - len(got))
    elapsed = time.perf_counter() - t0
    ok = mismatched == 0 and events > 0 and len(ds.clips) == 100 and elapsed < 60
    criterion(6, "normalization invariance", ok,
              f"{len(ds.clips)} clips, {events} predictions, {mismatched} differ; {elapsed:.0f}s")


def brute_metrics(pairs):
    scored = [(p, g) for p, g in pairs if g is not None]
    tp = len([1 for p, g in scored if p == "C" and g == "C"])
    fp = len([1 for p, g in scored if p == "C" and g == "NC"])
    fn = len([1 for p, g in scored if p == "NC" and g == "C"])
    tn = len(scored) - tp - fp - fn
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    degenerate = tp + fp == 0 or tp + fn == 0 or prec + rec == 0
    return ((tp + tn) / len(scored), prec, rec, f1, degenerate)


def test_c07_metric_oracle(criterion):
    rng = random.Random(7)
    kinds = [("C", "NC"), ("C",), ("NC",)]
    failures = degenerate = 0
    for i in range(1000):
        n = rng.randint(1, 60)
        preds, gts = rng.choice(kinds), rng.choice(kinds)
        pairs = [(rng.choice(preds), rng.choice(gts + (None,) if i % 5 == 0 else gts))
                 for _ in range(n)]
        if all(g is None for _, g in pairs):
            pairs.append(("NC", "C"))
        m = compute_metrics(pairs)
        expect = brute_metrics(pairs)
        degenerate += expect[4]
        failures += (m.accuracy, m.precision, m.recall, m.f1, m.degenerate) != expect
    ok = failures == 0 and degenerate > 0
    criterion(7, "metric oracle", ok, f"1000 lists ({degenerate} degenerate), {failures} mismatches")


def random_gappy_clip(rng, clip_id):
    frames = {}
    for pid in range(rng.integers(1, 4)):
        present = rng.random(80) > rng.uniform(0.0, 0.15)
        for f in np.flatnonzero(present):
            frames.setdefault(int(f), []).append(
                PedestrianObs(pid, "NC", rng.uniform(0, 500, (19, 3))))
    return ClipRecord(clip_id, 30.0, 1600, 600,
                      [FrameRecord(f, frames[f]) for f in sorted(frames)])


def test_c08_window_count_law(criterion):
    rng = np.random.default_rng(8)
    checked = bad = 0
    for k in range(60):
        n_frames = int(rng.integers(1, 12))
        cfg = PedGnnConfig(n_frames=n_frames, hidden=2, fc_dims=(4, 4, 2))
        params = PedGnnParams.init(cfg, rng)
        clip = random_gappy_clip(rng, f"g{k}")
        events = stream_predict(clip, params, cfg)
        for pid in {p.pedestrian_id for f in clip.frames for p in f.pedestrians}:
            idx = np.array([f.frame_index for f in clip.frames
                            if any(p.pedestrian_id == pid for p in f.pedestrians)])
            emitted = {e.frame for e in events if e.pedestrian_id == pid}
            for start, stop in gap_free_segments(idx):
                seg = set(idx[start:stop].tolist())
                checked += 1
                bad += len(emitted & seg) != window_count(stop - start, n_frames)
    criterion(8, "sliding-window count law", bad == 0, f"{checked} segments, {bad} wrong")


def test_c09_generator_auditability(criterion):
    mix = {"perpendicular_cross": 1.0, "diagonal_cross": 1.0, "mid_lane_abort": 2.0,
           "walk_along_sidewalk": 1.0, "stand_still": 1.0}
    ds = generate_dataset(GeneratorConfig(clip_count=40, clip_duration_s=10.0, seed=9,
                                          scenario_mix=mix))
    by_id = {c.clip_id: c for c in ds.clips}
    bad = aborts = missing_transition = 0
    for entry in ds.manifest:
        if not entry["accepted"]:
            continue
        derived = rederive_labels(entry)
        clip = by_id[entry["clip_id"]]
        bad += any(p.label != derived[f.frame_index] for f in clip.frames for p in f.pedestrians)
        if entry["kind"] == "mid_lane_abort":
            aborts += 1
            missing_transition += not any(a == "C" and b == "NC"
                                          for a, b in zip(derived, derived[1:]))
    ok = bad == 0 and aborts > 0 and missing_transition == 0
    criterion(9, "generator auditability", ok,
              f"{len(ds.clips)} clips, {bad} label mismatches, {aborts} aborts, "
              f"{missing_transition} without a C->NC transition")


PIPELINE = [
    "generate.clip_count=40", "generate.clip_duration_s=6.0",
    "train.n_frames=8", "train.max_epochs=3",
]
ARTIFACTS = ["data/train.jsonl", "data/val.jsonl", "data/test.jsonl", "data/manifest.jsonl",
             "checkpoint.json", "report.txt", "report.csv", "events.jsonl"]


def pipeline_hashes(out):
    sets = [a for s in PIPELINE for a in ("--set", s)]
    for cmd in ("generate", "train", "eval"):
        assert main([cmd, "--out", str(out), "--seed", "10"] + sets) == 0
    return {a: hashlib.sha256((out / a).read_bytes()).hexdigest() for a in ARTIFACTS}


def test_c10_determinism(criterion, tmp_path):
    first = pipeline_hashes(tmp_path / "a")
    second = pipeline_hashes(tmp_path / "b")
    differ = [a for a in ARTIFACTS if first[a] != second[a]]
    criterion(10, "determinism", not differ,
              f"{len(ARTIFACTS)} artifacts compared, differing: {differ or 'none'}")
