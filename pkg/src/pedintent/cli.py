"""Command-line entry point: ``pedintent <subcommand> [options]``.

Every subcommand reads an optional YAML config, applies ``--set
dotted.key=value`` overrides on top, validates the result against the
known schema, echoes it to ``<out>/effective_config.yaml`` and runs.

Exit status: 0 success, 2 configuration error, 3 input/output error,
4 run failure (numeric fault, exhausted retries, failed sweep).
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import rng as rngs
from .clips import ClipFormatError, iter_clips, import_coco17_records, read_clips
from .evaluate import (EvaluationError, ReportRow, StreamPredictor, compute_metrics,
                       events_jsonl, format_report, report_csv, stream_predict)
from .gconv import NumericFault
from .model import (FOOTPRINT_BUDGET_BYTES, PedGnnConfig, PedGnnParams, count_params, forward,
                    load_checkpoint, save_checkpoint)
from .skeleton import normalize_joints
from .synthgen import (SCENARIO_KINDS, GenerationError, GeneratorConfig, generate_dataset,
                       write_dataset)
from .train import (LR_GRID, N_FRAMES_GRID, SweepError, TrainConfigError, TrainPlan, sweep,
                    sweep_table_csv, sweep_table_text, train_one)
from .windows import build_window_set

log = logging.getLogger("pedintent")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_RUN = 0, 2, 3, 4
SUBCOMMANDS = ("generate", "import17", "train", "sweep", "eval", "infer", "bench", "inspect")

DEFAULTS: dict = {
    "seed": 0,
    "out": "runs/default",
    "workers": 1,
    "log_level": "INFO",
    "generate": {
        "clip_count": 947,
        "clip_duration_s": 20.0,
        "fps": 30.0,
        "width": 1600,
        "height": 600,
        "focal_px": 1000.0,
        "camera_height_m": 1.4,
        "body_scale_range": [0.85, 1.1],
        "speed_range": [1.0, 1.8],
        "ego_speed_range": [0.0, 0.5],
        "depth_range": [15.0, 30.0],
        "noise": {"enabled": True, "jitter_px": 1.0, "confidence_cap_px": 3.0,
                  "dropout_prob": 0.02},
        "scenario_mix": {k: 1.0 for k in SCENARIO_KINDS},
        "retry_limit": 50,
        "split": [0.8, 0.1, 0.1],
    },
    "model": {"hidden": 8, "cheb_order": 2, "fc_dims": [32, 16, 2], "dropout_rate": 0.5},
    "train": {"n_frames": 16, "lr": 0.001, "max_epochs": 100, "batch_size": 500},
    "sweep": {"n_frames_grid": list(N_FRAMES_GRID), "lr_grid": list(LR_GRID), "strict": True},
    # named sources; a null path means <out>/data/<part>.jsonl
    "data": {"train": {"S": None}, "val": {"S": None}, "test": {"S": None}},
    "eval": {"checkpoint": None, "train_name": "S"},
    "infer": {"checkpoint": None, "input": "-"},
    "bench": {"checkpoint": None, "n_frames": 32, "repetitions": 1000, "warmup": 50},
    "import17": {"input": None, "output": None},
    "inspect": {"path": None},
}
# mappings whose keys are user-chosen names
FREE_KEYS = {"data.train", "data.val", "data.test", "generate.scenario_mix"}


class ConfigError(ValueError):
    pass


# -- config ------------------------------------------------------------------

def _check_keys(cfg: dict, schema: dict, prefix: str = "") -> None:
    for key, value in cfg.items():
        dotted = f"{prefix}{key}"
        if key not in schema:
            raise ConfigError(f"unknown configuration key {dotted!r}")
        if isinstance(schema[key], dict) and dotted not in FREE_KEYS:
            if not isinstance(value, dict):
                raise ConfigError(f"configuration key {dotted!r} must be a mapping")
            _check_keys(value, schema[key], dotted + ".")


def _merge(base: dict, extra: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        dotted = f"{prefix}{key}"
        # user-named mappings are replaced wholesale so default entries do not leak in
        if (isinstance(value, dict) and isinstance(out.get(key), dict)
                and dotted not in FREE_KEYS):
            out[key] = _merge(out[key], value, dotted + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    dotted, raw = assignment.split("=", 1)
    parts = dotted.strip().split(".")
    node, schema, path = cfg, DEFAULTS, ""
    for i, part in enumerate(parts):
        path = f"{path}.{part}" if path else part
        free = path in FREE_KEYS or path.rsplit(".", 1)[0] in FREE_KEYS
        if not free and (not isinstance(schema, dict) or part not in schema):
            raise ConfigError(f"unknown configuration key {dotted.strip()!r}")
        if i == len(parts) - 1:
            node[part] = yaml.safe_load(raw) if raw.strip() else None
        else:
            node = node.setdefault(part, {})
            schema = schema.get(part, {}) if isinstance(schema, dict) else {}


def load_config(path: str | None, overrides: list[str], seed: int | None = None,
                out: str | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise OSError(f"cannot read config file {path}: {exc.strerror}") from exc
        try:
            loaded = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        _check_keys(loaded, DEFAULTS)
        cfg = _merge(cfg, loaded)
    for assignment in overrides:
        apply_override(cfg, assignment)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    _check_keys(cfg, DEFAULTS)
    return cfg


def generator_config(cfg: dict) -> GeneratorConfig:
    g = dict(cfg["generate"])
    g["seed"] = cfg["seed"]
    g["workers"] = cfg["workers"]
    try:
        return GeneratorConfig.from_dict(g)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"generate: {exc}") from exc


def model_config(cfg: dict, n_frames: int | None = None) -> PedGnnConfig:
    try:
        return PedGnnConfig(n_frames=int(n_frames or cfg["train"]["n_frames"]), **cfg["model"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from exc


def _out(cfg: dict) -> Path:
    return Path(cfg["out"])


def _source_paths(cfg: dict, part: str) -> dict[str, Path]:
    sources = cfg["data"][part]
    if not sources:
        raise ConfigError(f"data.{part} needs at least one source")
    return {name: Path(p) if p else _out(cfg) / "data" / f"{part}.jsonl"
            for name, p in sources.items()}


def _load_sources(cfg: dict, part: str) -> dict[str, list]:
    out = {}
    for name, path in _source_paths(cfg, part).items():
        if not path.exists():
            raise FileNotFoundError(f"data.{part}.{name}: no such file {path}")
        out[name] = read_clips(path)
    return out


def _checkpoint_path(cfg: dict, section: str) -> Path:
    given = cfg[section].get("checkpoint")
    if given:
        path = Path(given)
    else:
        candidates = [_out(cfg) / "best.json", _out(cfg) / "checkpoint.json"]
        path = next((p for p in candidates if p.exists()), candidates[0])
    if not path.exists():
        raise FileNotFoundError(f"{section}.checkpoint: no such file {path}")
    return path


def _write_effective(cfg: dict) -> None:
    out = _out(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))


# -- subcommands -------------------------------------------------------------

def cmd_generate(cfg: dict) -> int:
    gcfg = generator_config(cfg)
    _write_effective(cfg)
    t0 = time.perf_counter()
    ds = generate_dataset(gcfg)
    split = write_dataset(ds, _out(cfg) / "data")
    rejected = sum(1 for m in ds.manifest if not m["accepted"])
    print(f"generated {len(ds.clips)} clips ({rejected} rejected) in "
          f"{time.perf_counter() - t0:.1f}s")
    for part, counts in split["label_counts"].items():
        print(f"  {part:5s} clips={len(split['split'][part]):4d} C={counts['C']} NC={counts['NC']}")
    return EXIT_OK


def cmd_import17(cfg: dict) -> int:
    src, dest = cfg["import17"]["input"], cfg["import17"]["output"]
    if not src:
        raise ConfigError("import17.input is required")
    dest = Path(dest) if dest else _out(cfg) / "imported.jsonl"
    if src != "-" and not Path(src).exists():
        raise FileNotFoundError(f"import17.input: no such file {src}")
    _write_effective(cfg)
    dest.parent.mkdir(parents=True, exist_ok=True)
    n = import_coco17_records(src, dest)
    print(f"imported {n} clips -> {dest}")
    return EXIT_OK


def _train_val(cfg: dict, n_frames: int):
    train_sets = [build_window_set(clips, n_frames, name)
                  for name, clips in _load_sources(cfg, "train").items()]
    val_clips = [c for clips in _load_sources(cfg, "val").values() for c in clips]
    return train_sets, build_window_set(val_clips, n_frames, "val")


def cmd_train(cfg: dict) -> int:
    t = cfg["train"]
    config = model_config(cfg)
    train_sets, val = _train_val(cfg, config.n_frames)
    _write_effective(cfg)
    result = train_one(config, float(t["lr"]), train_sets, val, int(t["max_epochs"]),
                       int(t["batch_size"]), int(cfg["seed"]))
    out = _out(cfg)
    lines = ["epoch,val_f1"] + [f"{i},{f1!r}" for i, f1 in enumerate(result.history, start=1)]
    (out / "train_history.csv").write_text("\n".join(lines) + "\n")
    if result.best_params is None:
        raise NumericFault(f"training failed before any epoch completed: {result.error}")
    save_checkpoint(out / "checkpoint.json", result.best_params, config)
    print(f"N_F={config.n_frames} lr={result.lr} best epoch {result.best_epoch} "
          f"val F1 {result.best_f1:.4f} ({result.status})")
    return EXIT_OK


def cmd_sweep(cfg: dict) -> int:
    s, t = cfg["sweep"], cfg["train"]
    base = model_config(cfg)
    try:
        plan = TrainPlan(tuple(s["n_frames_grid"]), tuple(s["lr_grid"]), int(t["max_epochs"]),
                         int(t["batch_size"]), int(cfg["seed"]), bool(s["strict"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sweep: {exc}") from exc
    train_clips, val_clips = _load_sources(cfg, "train"), _load_sources(cfg, "val")
    _write_effective(cfg)
    result = sweep(plan, train_clips, val_clips, base, workers=int(cfg["workers"]))
    out = _out(cfg)
    ck = out / "checkpoints"
    ck.mkdir(exist_ok=True)
    for r in result.runs:
        if r.best_params is not None:
            save_checkpoint(ck / f"nf{r.n_frames:02d}_lr{r.lr!r}.json", r.best_params,
                            replace(base, n_frames=r.n_frames))
    best = result.best
    save_checkpoint(out / "best.json", best.best_params, replace(base, n_frames=best.n_frames))
    (out / "sweep.txt").write_text(sweep_table_text(result))
    (out / "sweep.csv").write_text(sweep_table_csv(result))
    sys.stdout.write(sweep_table_text(result))
    print(f"best: N_F={best.n_frames} lr={best.lr} val F1 {best.best_f1:.4f}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    path = _checkpoint_path(cfg, "eval")
    tests = _load_sources(cfg, "test")
    params, config = load_checkpoint(path)
    _write_effective(cfg)
    rows, all_events, summary = [], [], {}
    for name in sorted(tests):
        events = [e for clip in tests[name] for e in stream_predict(clip, params, config)]
        m = compute_metrics(events)
        rows.append(ReportRow.from_metrics(cfg["eval"]["train_name"], name, config.n_frames, m))
        all_events.extend(events)
        summary[name] = {"accuracy": m.accuracy, "precision": m.precision, "recall": m.recall,
                         "f1": m.f1, "degenerate": m.degenerate,
                         "counts": {"tp": m.counts.tp, "fp": m.counts.fp,
                                    "tn": m.counts.tn, "fn": m.counts.fn}}
    out = _out(cfg)
    (out / "events.jsonl").write_text(events_jsonl(all_events))
    (out / "report.txt").write_text(format_report(rows))
    (out / "report.csv").write_text(report_csv(rows))
    (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    sys.stdout.write(format_report(rows))
    return EXIT_OK


def cmd_infer(cfg: dict) -> int:
    params, config = load_checkpoint(_checkpoint_path(cfg, "infer"))
    source = cfg["infer"]["input"] or "-"
    if source != "-" and not Path(source).exists():
        raise FileNotFoundError(f"infer.input: no such file {source}")
    for clip in iter_clips(source):
        predictor = StreamPredictor(params, config, clip.clip_id)
        for frame in sorted(clip.frames, key=lambda f: f.frame_index):
            for event in predictor.push(frame):
                sys.stdout.write(json.dumps(event.to_dict()) + "\n")
        sys.stdout.flush()
    return EXIT_OK


def bench_latency(params: PedGnnParams, config: PedGnnConfig, repetitions: int,
                  warmup: int = 50, seed: int = 0) -> dict:
    """Median and p99 wall-clock time of a single-window infer forward."""
    if repetitions < 1:
        raise ConfigError("bench.repetitions must be >= 1")
    rng = rngs.stream(seed, "bench")
    window = normalize_joints(rng.random((config.n_frames, 19, 3)) * 100.0)
    for _ in range(warmup):
        forward(window, params, config)
    times = np.empty(repetitions)
    clock = time.perf_counter
    for i in range(repetitions):
        t0 = clock()
        forward(window, params, config)
        times[i] = clock() - t0
    count, nbytes = count_params(params)
    return {"n_frames": config.n_frames, "repetitions": repetitions,
            "median_ms": float(np.median(times) * 1e3),
            "p99_ms": float(np.percentile(times, 99) * 1e3),
            "param_count": count, "param_bytes": nbytes,
            "budget_bytes": FOOTPRINT_BUDGET_BYTES,
            "within_budget": nbytes <= FOOTPRINT_BUDGET_BYTES}


def cmd_bench(cfg: dict) -> int:
    b = cfg["bench"]
    reps = int(b["repetitions"])
    if reps < 1:
        raise ConfigError("bench.repetitions must be >= 1")
    if b.get("checkpoint"):
        params, config = load_checkpoint(_checkpoint_path(cfg, "bench"))
    else:
        config = model_config(cfg)
        params = PedGnnParams.init(config, rngs.stream(cfg["seed"], "bench", "init"))
    config = replace(config, n_frames=int(b["n_frames"] or config.n_frames))
    _write_effective(cfg)
    stats = bench_latency(params, config, reps, int(b["warmup"]), int(cfg["seed"]))
    (_out(cfg) / "bench.json").write_text(json.dumps(stats, indent=2) + "\n")
    print(f"params {stats['param_count']} ({stats['param_bytes']} bytes at f32, "
          f"budget {FOOTPRINT_BUDGET_BYTES}): {'ok' if stats['within_budget'] else 'OVER'}")
    print(f"N_F={config.n_frames} forward median {stats['median_ms']:.3f} ms, "
          f"p99 {stats['p99_ms']:.3f} ms over {reps} reps")
    return EXIT_OK


def cmd_inspect(cfg: dict) -> int:
    target = cfg["inspect"]["path"]
    if not target:
        raise ConfigError("inspect.path is required")
    path = Path(target)
    if not path.exists():
        raise FileNotFoundError(f"inspect.path: no such file {path}")
    if path.suffix == ".json":
        params, config = load_checkpoint(path)
        count, nbytes = count_params(params)
        print(f"checkpoint {path}")
        print(f"  config: {json.dumps(config.to_dict())}")
        print(f"  parameters: {count} ({nbytes} bytes at f32)")
        for name, arr in params.named():
            print(f"  {name:28s} {tuple(arr.shape)}")
        return EXIT_OK
    n_clips = n_frames = 0
    labels = {"C": 0, "NC": 0}
    for clip in iter_clips(path):
        n_clips += 1
        n_frames += len(clip.frames)
        for k, v in clip.label_counts().items():
            labels[k] += v
    print(f"clips {n_clips}, frames {n_frames}, labeled C={labels['C']} NC={labels['NC']}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate, "import17": cmd_import17, "train": cmd_train, "sweep": cmd_sweep,
    "eval": cmd_eval, "infer": cmd_infer, "bench": cmd_bench, "inspect": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pedintent",
                                     description="Pedestrian crossing-intention pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", help="YAML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted-key override, repeatable")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        if name in ("eval", "infer", "bench"):
            p.add_argument("--checkpoint")
        if name in ("infer", "import17", "inspect"):
            p.add_argument("input", nargs="?", help="input path ('-' for stdin)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    if getattr(args, "checkpoint", None):
        overrides.append(f"{args.command}.checkpoint={json.dumps(args.checkpoint)}")
    if getattr(args, "input", None):
        key = "path" if args.command == "inspect" else "input"
        overrides.append(f"{args.command}.{key}={json.dumps(args.input)}")
    try:
        cfg = load_config(args.config, overrides, args.seed, args.out)
        logging.basicConfig(level=getattr(logging, str(cfg["log_level"]).upper(), logging.INFO),
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return COMMANDS[args.command](cfg)
    except (ConfigError, TrainConfigError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ClipFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericFault, GenerationError, SweepError, EvaluationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
