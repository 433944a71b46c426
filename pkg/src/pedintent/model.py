"""Crossing-intention network: a GConvGRU over the skeleton window, the
flattened final hidden state, three (ReLU -> Linear) blocks and a two-way
softmax. Class index 0 is C (crossing), index 1 is NC.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .gconv import (GATES, GConvGruParams, GruTape, NumericFault, SpectralBasis,
                    build_basis, gru_backward, gru_sequence)
from .skeleton import NUM_CHANNELS, NUM_JOINTS

LABELS = ("C", "NC")
LABEL_INDEX = {"C": 0, "NC": 1}
FOOTPRINT_BUDGET_BYTES = 27 * 1024
CHECKPOINT_FORMAT = "pedintent-checkpoint/1"


@dataclass(frozen=True)
class PedGnnConfig:
    n_frames: int = 16
    hidden: int = 8
    cheb_order: int = 2
    fc_dims: tuple[int, int, int] = (32, 16, 2)
    dropout_rate: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "fc_dims", tuple(int(d) for d in self.fc_dims))
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if len(self.fc_dims) != 3 or self.fc_dims[-1] != 2:
            raise ValueError(f"fc_dims must be three widths ending in 2, got {self.fc_dims}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.hidden < 1 or self.cheb_order < 1:
            raise ValueError("hidden and cheb_order must be >= 1")

    @property
    def flat_dim(self) -> int:
        return NUM_JOINTS * self.hidden

    def basis(self) -> SpectralBasis:
        return _basis_cache(self.cheb_order)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fc_dims"] = list(self.fc_dims)
        return d


_BASES: dict[int, SpectralBasis] = {}


def _basis_cache(K: int) -> SpectralBasis:
    if K not in _BASES:
        _BASES[K] = build_basis(K)
    return _BASES[K]


@dataclass
class PedGnnParams:
    gru: GConvGruParams
    fc: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    @classmethod
    def zeros(cls, config: PedGnnConfig) -> "PedGnnParams":
        dims = (config.flat_dim,) + config.fc_dims
        return cls(
            gru=GConvGruParams.zeros(config.cheb_order, config.hidden),
            fc=[(np.zeros((dims[i], dims[i + 1])), np.zeros(dims[i + 1])) for i in range(3)],
        )

    @classmethod
    def init(cls, config: PedGnnConfig, rng: np.random.Generator) -> "PedGnnParams":
        params = cls.zeros(config)
        params.gru = GConvGruParams.init(config.cheb_order, config.hidden, rng)
        for W, b in params.fc:
            bound = 1.0 / np.sqrt(W.shape[0])
            W[...] = rng.uniform(-bound, bound, W.shape)
            b[...] = rng.uniform(-bound, bound, b.shape)
        return params

    def named(self):
        """Leaf tensors in canonical order."""
        yield from self.gru.named()
        for i, (W, b) in enumerate(self.fc, start=1):
            yield f"fc{i}.weight", W
            yield f"fc{i}.bias", b

    def arrays(self) -> list[np.ndarray]:
        return [a for _, a in self.named()]

    def copy(self) -> "PedGnnParams":
        return PedGnnParams(
            gru=GConvGruParams(
                input={g: a.copy() for g, a in self.gru.input.items()},
                hidden={g: a.copy() for g, a in self.gru.hidden.items()},
                bias={g: a.copy() for g, a in self.gru.bias.items()},
            ),
            fc=[(W.copy(), b.copy()) for W, b in self.fc],
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def set_flat(self, vec: np.ndarray) -> None:
        pos = 0
        for a in self.arrays():
            a[...] = vec[pos:pos + a.size].reshape(a.shape)
            pos += a.size


@dataclass(frozen=True)
class Prediction:
    p_cross: float
    p_nocross: float
    logits: tuple[float, float]

    @property
    def label(self) -> str:
        return "C" if self.p_cross >= self.p_nocross else "NC"


@dataclass
class ForwardTape:
    gru: GruTape
    h_final: np.ndarray
    inputs: list[np.ndarray]     # block inputs before dropout
    masks: list[np.ndarray | None]
    acts: list[np.ndarray]       # ReLU outputs
    pre: list[np.ndarray]        # dropped-out block inputs (ReLU pre-activations)
    logits: np.ndarray


def count_params(params: PedGnnParams) -> tuple[int, int]:
    count = sum(a.size for a in params.arrays())
    return count, 4 * count


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-sample ``-log p(target)`` computed from logits."""
    logits = np.atleast_2d(logits)
    targets = np.atleast_1d(targets)
    return -log_softmax(logits)[np.arange(len(targets)), targets]


def loss(pred: Prediction, label: str) -> float:
    return float(cross_entropy(np.asarray(pred.logits), np.array([LABEL_INDEX[label]]))[0])


def _channel_first(windows: np.ndarray) -> np.ndarray:
    """(B, N_F, 19, 3) -> (3, N_F, 19, B)."""
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim == 3:
        windows = windows[None]
    if windows.shape[2:] != (NUM_JOINTS, NUM_CHANNELS):
        raise ValueError(f"expected windows of shape (B, N_F, 19, 3), got {windows.shape}")
    return np.ascontiguousarray(windows.transpose(3, 1, 2, 0))


def forward_batch(windows: np.ndarray, params: PedGnnParams, config: PedGnnConfig,
                  train: bool = False, rng: np.random.Generator | None = None,
                  masks: list[np.ndarray] | None = None, record: bool = False):
    """Logits for a batch of normalized windows ``(B, N_F, 19, 3)``.

    In train mode dropout masks are drawn from ``rng`` (or taken from
    ``masks``) with inverted scaling. Returns ``(logits, tape)``; the tape
    is None unless ``record``.
    """
    x = _channel_first(windows)
    if x.shape[1] != config.n_frames:
        raise ValueError(f"window length {x.shape[1]} != n_frames {config.n_frames}")
    h, gru_tape = gru_sequence(x, params.gru, config.basis(), record=record)
    H, n, b = h.shape
    u = h.transpose(2, 1, 0).reshape(b, n * H)

    keep = 1.0 - config.dropout_rate
    inputs, used_masks, acts, pres = [], [], [], []
    for i, (W, bias) in enumerate(params.fc):
        inputs.append(u)
        mask = None
        if train and config.dropout_rate > 0:
            if masks is not None:
                mask = masks[i]
            else:
                if rng is None:
                    raise ValueError("train mode with dropout needs an rng")
                mask = (rng.random(u.shape) < keep) / keep
            u = u * mask
        used_masks.append(mask)
        pres.append(u)
        a = np.maximum(u, 0.0)
        acts.append(a)
        u = a @ W + bias
    if not np.all(np.isfinite(u)):
        raise NumericFault("non-finite logits")
    tape = ForwardTape(gru_tape, h, inputs, used_masks, acts, pres, u) if record else None
    return u, tape


def backward_batch(tape: ForwardTape, d_logits: np.ndarray, params: PedGnnParams,
                   config: PedGnnConfig, input_grad: bool = False):
    """Gradients of a scalar loss given ``dL/dlogits`` (B, 2).

    Returns ``(grads, d_windows)`` where grads is a PedGnnParams and
    d_windows has the (B, N_F, 19, 3) layout, or None.
    """
    grads_fc = []
    d = d_logits
    for i in reversed(range(len(params.fc))):
        W, _ = params.fc[i]
        grads_fc.append((tape.acts[i].T @ d, d.sum(axis=0)))
        d = (d @ W.T) * (tape.pre[i] > 0)
        if tape.masks[i] is not None:
            d = d * tape.masks[i]
    grads_fc.reverse()
    H, n, b = tape.h_final.shape
    d_h = np.ascontiguousarray(d.reshape(b, n, H).transpose(2, 1, 0))
    gru_grads, d_x = gru_backward(tape.gru, d_h, config.basis(), input_grad=input_grad)
    if not all(np.all(np.isfinite(a)) for _, a in gru_grads.named()):
        raise NumericFault("non-finite gradient")
    d_windows = d_x.transpose(3, 1, 2, 0) if d_x is not None else None
    return PedGnnParams(gru=gru_grads, fc=grads_fc), d_windows


def loss_and_grad(windows: np.ndarray, targets: np.ndarray, params: PedGnnParams,
                  config: PedGnnConfig, train: bool = True,
                  rng: np.random.Generator | None = None,
                  masks: list[np.ndarray] | None = None, input_grad: bool = False):
    """Mean cross-entropy over the batch and its gradients."""
    logits, tape = forward_batch(windows, params, config, train=train, rng=rng,
                                 masks=masks, record=True)
    targets = np.asarray(targets)
    b = len(targets)
    value = float(cross_entropy(logits, targets).mean())
    d_logits = softmax(logits)
    d_logits[np.arange(b), targets] -= 1.0
    d_logits /= b
    grads, d_windows = backward_batch(tape, d_logits, params, config, input_grad=input_grad)
    return value, grads, d_windows


def predict_proba(windows: np.ndarray, params: PedGnnParams, config: PedGnnConfig) -> np.ndarray:
    """Infer-mode class probabilities, shape (B, 2)."""
    logits, _ = forward_batch(windows, params, config)
    return softmax(logits)


def forward(window: np.ndarray, params: PedGnnParams, config: PedGnnConfig,
            mode: str = "infer", rng: np.random.Generator | None = None) -> Prediction:
    """Single-window prediction; ``window`` is a SkeletonWindow or a
    normalized ``(N_F, 19, 3)`` array."""
    window = getattr(window, "joints", window)
    logits, _ = forward_batch(window, params, config, train=(mode == "train"), rng=rng)
    p = softmax(logits)[0]
    return Prediction(float(p[0]), float(p[1]), (float(logits[0, 0]), float(logits[0, 1])))


# -- checkpoints -------------------------------------------------------------

def _checkpoint_entries(params: PedGnnParams):
    for g in GATES:
        for role, tensors in (("input", params.gru.input), ("hidden", params.gru.hidden)):
            for k, mat in enumerate(tensors[g]):
                yield f"gru.{g}.{role}.k{k}", mat
        yield f"gru.{g}.bias", params.gru.bias[g]
    for i, (W, b) in enumerate(params.fc, start=1):
        yield f"fc{i}.weight", W
        yield f"fc{i}.bias", b


def checkpoint_dict(params: PedGnnParams, config: PedGnnConfig) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "config": config.to_dict(),
        "tensors": [
            {"name": name, "shape": list(a.shape), "values": a.ravel().tolist()}
            for name, a in _checkpoint_entries(params)
        ],
    }


def checkpoint_from_dict(data: dict) -> tuple[PedGnnParams, PedGnnConfig]:
    if data.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {data.get('format')!r}")
    config = PedGnnConfig(**data["config"])
    params = PedGnnParams.zeros(config)
    targets = dict(_checkpoint_entries(params))
    seen = set()
    for entry in data["tensors"]:
        name = entry["name"]
        if name not in targets:
            raise ValueError(f"unknown tensor {name!r} in checkpoint")
        dest = targets[name]
        if list(dest.shape) != list(entry["shape"]):
            raise ValueError(f"tensor {name}: shape {entry['shape']} != expected {list(dest.shape)}")
        dest[...] = np.asarray(entry["values"], dtype=np.float64).reshape(dest.shape)
        seen.add(name)
    missing = set(targets) - seen
    if missing:
        raise ValueError(f"checkpoint is missing tensors: {sorted(missing)}")
    return params, config


def save_checkpoint(path, params: PedGnnParams, config: PedGnnConfig) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(params, config)))


def load_checkpoint(path) -> tuple[PedGnnParams, PedGnnConfig]:
    return checkpoint_from_dict(json.loads(Path(path).read_text()))
