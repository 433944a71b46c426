"""AdamW training with per-source balanced batches, best-epoch selection
on validation F1, and the (N_F, learning rate) sweep."""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from . import rng as rngs
from .clips import ClipRecord
from .evaluate import ConfusionCounts, Metrics, metrics_from_counts, predict_window_set
from .gconv import NumericFault
from .model import PedGnnConfig, PedGnnParams, loss_and_grad
from .windows import WindowSet, build_window_set

log = logging.getLogger(__name__)

N_FRAMES_GRID = tuple(range(4, 33, 2))
LR_GRID = (0.001, 0.005, 0.0002, 0.0005)


class TrainConfigError(ValueError):
    pass


class SweepError(RuntimeError):
    pass


@dataclass
class OptimState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float, **kw) -> "OptimState":
        return cls(lr=lr, m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], **kw)


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
               state: OptimState) -> None:
    """In-place AdamW update with decoupled weight decay."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must align")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericFault("non-finite gradient passed to adamw_step")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        p *= 1.0 - state.lr * state.weight_decay
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def make_batches(sizes: Sequence[int], batch_size: int,
                 rng: np.random.Generator) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of batches as ``(source index, sample index)`` arrays.

    A single source is shuffled without replacement. Several sources are
    drawn with replacement, each source with equal probability, for
    ``ceil(total / batch_size)`` batches totalling ``sum(sizes)`` draws.
    """
    sizes = [int(s) for s in sizes]
    if not sizes:
        raise TrainConfigError("make_batches needs at least one dataset")
    if any(s <= 0 for s in sizes):
        raise TrainConfigError(f"empty dataset among sizes {sizes}")
    if batch_size < 1:
        raise TrainConfigError("batch_size must be >= 1")
    total = sum(sizes)
    if len(sizes) == 1:
        order = rng.permutation(total)
        for lo in range(0, total, batch_size):
            idx = order[lo:lo + batch_size]
            yield np.zeros(len(idx), dtype=np.int64), idx
        return
    sizes_arr = np.asarray(sizes)
    for lo in range(0, total, batch_size):
        n = min(batch_size, total - lo)
        src = rng.integers(0, len(sizes), n)
        yield src, np.floor(rng.random(n) * sizes_arr[src]).astype(np.int64)


@dataclass
class TrainResult:
    n_frames: int
    lr: float
    best_params: PedGnnParams | None
    best_f1: float
    best_epoch: int            # 1-based; 0 when no epoch completed
    best_metrics: Metrics | None
    history: list[float]
    status: str = "ok"
    error: str | None = None


def validation_metrics(val: WindowSet, params: PedGnnParams, config: PedGnnConfig) -> Metrics:
    _, pred = predict_window_set(val, params, config)
    return metrics_from_counts(ConfusionCounts.from_arrays(pred, val.labels))


def train_one(config: PedGnnConfig, lr: float, train_sets: Sequence[WindowSet], val: WindowSet,
              max_epochs: int = 100, batch_size: int = 500, seed: int = 0) -> TrainResult:
    """Train from scratch and keep the snapshot with the best validation F1
    (earliest epoch on ties)."""
    train_sets = [ws.labeled() for ws in train_sets]
    val = val.labeled()
    if len(val) == 0:
        raise TrainConfigError("validation set has no labeled windows")
    if not train_sets or any(len(ws) == 0 for ws in train_sets):
        raise TrainConfigError("every training source needs labeled windows")
    for ws in list(train_sets) + [val]:
        if ws.n_frames != config.n_frames:
            raise TrainConfigError(f"window set {ws.name!r} has n_frames {ws.n_frames}, "
                                   f"config expects {config.n_frames}")

    run = ("train", config.n_frames, repr(float(lr)))
    params = PedGnnParams.init(config, rngs.stream(seed, *run, "init"))
    sampler = rngs.stream(seed, *run, "sampler")
    dropout = rngs.stream(seed, *run, "dropout")
    state = OptimState.for_params(params.arrays(), lr)

    result = TrainResult(config.n_frames, lr, None, -math.inf, 0, None, [])
    try:
        for epoch in range(1, max_epochs + 1):
            for src, idx in make_batches([len(ws) for ws in train_sets], batch_size, sampler):
                xs, ys = [], []
                for s in np.unique(src):
                    pick = idx[src == s]
                    xs.append(train_sets[s].windows(pick))
                    ys.append(train_sets[s].labels[pick])
                windows = xs[0] if len(xs) == 1 else np.concatenate(xs)
                targets = ys[0] if len(ys) == 1 else np.concatenate(ys)
                _, grads, _ = loss_and_grad(windows, targets, params, config, rng=dropout)
                adamw_step(params.arrays(), grads.arrays(), state)
            m = validation_metrics(val, params, config)
            result.history.append(m.f1)
            log.info("N_F=%d lr=%g epoch %d val F1 %.4f", config.n_frames, lr, epoch, m.f1)
            if m.f1 > result.best_f1:
                result.best_f1, result.best_epoch, result.best_metrics = m.f1, epoch, m
                result.best_params = params.copy()
    except (NumericFault, FloatingPointError) as exc:
        result.status, result.error = "failed", str(exc)
        log.warning("run N_F=%d lr=%g failed: %s", config.n_frames, lr, exc)
    if result.best_params is None:
        result.best_f1 = float("nan")
    return result


@dataclass
class TrainPlan:
    n_frames_grid: tuple[int, ...] = N_FRAMES_GRID
    lr_grid: tuple[float, ...] = LR_GRID
    max_epochs: int = 100
    batch_size: int = 500
    seed: int = 0
    strict: bool = True   # keep grids inside the published ranges

    def __post_init__(self):
        self.n_frames_grid = tuple(int(n) for n in self.n_frames_grid)
        self.lr_grid = tuple(float(x) for x in self.lr_grid)
        if not self.n_frames_grid or not self.lr_grid:
            raise TrainConfigError("sweep grids must be nonempty")
        if self.strict:
            bad = [n for n in self.n_frames_grid if n not in N_FRAMES_GRID]
            bad += [x for x in self.lr_grid if x not in LR_GRID]
            if bad:
                raise TrainConfigError(f"grid values outside the allowed ranges: {bad} "
                                       "(set strict: false to override)")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise TrainConfigError("max_epochs and batch_size must be >= 1")

    def pairs(self) -> list[tuple[int, float]]:
        return [(n, lr) for n in self.n_frames_grid for lr in self.lr_grid]


@dataclass
class SweepResult:
    runs: list[TrainResult]
    best: TrainResult

    def ranked(self) -> list[TrainResult]:
        ok = [r for r in self.runs if r.best_params is not None]
        failed = [r for r in self.runs if r.best_params is None]
        return sorted(ok, key=lambda r: (-r.best_f1, r.n_frames, r.lr)) + failed


def _train_point(args):
    config, lr, train_clips, val_clips, plan = args
    train_sets = [build_window_set(clips, config.n_frames, name)
                  for name, clips in train_clips.items()]
    val = build_window_set([c for clips in val_clips.values() for c in clips],
                           config.n_frames, "val")
    return train_one(config, lr, train_sets, val, plan.max_epochs, plan.batch_size, plan.seed)


def sweep(plan: TrainPlan, train_clips: dict[str, list[ClipRecord]],
          val_clips: dict[str, list[ClipRecord]], base: PedGnnConfig = PedGnnConfig(),
          workers: int = 1) -> SweepResult:
    """Train every (N_F, lr) pair; the best run maximizes validation F1."""
    if not train_clips or not val_clips:
        raise TrainConfigError("sweep needs training and validation clips")
    jobs = [(replace(base, n_frames=n), lr, train_clips, val_clips, plan)
            for n, lr in plan.pairs()]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_train_point, jobs))
    else:
        runs = [_train_point(job) for job in jobs]
    ok = [r for r in runs if r.best_params is not None]
    if not ok:
        raise SweepError("every sweep run failed: " + "; ".join(str(r.error) for r in runs))
    # max F1, then the earliest grid point
    best = max(ok, key=lambda r: r.best_f1)
    return SweepResult(runs, best)


SWEEP_COLUMNS = ("N_F", "lr", "best_epoch", "Accuracy", "Precision", "Recall", "F1-score",
                 "status")


def sweep_rows(result: SweepResult) -> list[list[str]]:
    rows = []
    for r in result.ranked():
        m = r.best_metrics
        vals = ([f"{100 * v:.2f}" for v in (m.accuracy, m.precision, m.recall, m.f1)]
                if m is not None else ["", "", "", ""])
        rows.append([f"{r.n_frames:02d}", repr(r.lr), str(r.best_epoch), *vals, r.status])
    return rows


def sweep_table_text(result: SweepResult) -> str:
    table = [list(SWEEP_COLUMNS)] + sweep_rows(result)
    widths = [max(len(row[i]) for row in table) for i in range(len(SWEEP_COLUMNS))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def sweep_table_csv(result: SweepResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    writer.writerows(sweep_rows(result))
    return buf.getvalue()
