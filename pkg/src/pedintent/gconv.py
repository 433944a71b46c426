"""Chebyshev spectral filtering on the skeleton graph and the graph
convolutional GRU cell, with hand-written reverse-mode gradients.

Internally the recurrent code keeps activations node-major, ``(N, B, C)``
per time step, so both node mixing (``T_k @ x``) and channel mixing
(``x @ W``) become a single matrix product over the whole batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .skeleton import NUM_CHANNELS, SkeletonTopology, build_topology

GATES = ("update", "reset", "candidate")


class NumericFault(FloatingPointError):
    """A non-finite value appeared in a forward or backward pass."""


@dataclass(frozen=True)
class SpectralBasis:
    laplacian: np.ndarray = field(repr=False)
    cheb: np.ndarray = field(repr=False)  # (K, N, N)

    @property
    def K(self) -> int:
        return self.cheb.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.cheb.shape[1]


def normalized_laplacian(adjacency: np.ndarray) -> np.ndarray:
    """``I - D^-1/2 A D^-1/2``; isolated nodes get a zero row."""
    deg = adjacency.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    inv_sqrt[deg > 0] = deg[deg > 0] ** -0.5
    return np.eye(len(deg)) - inv_sqrt[:, None] * adjacency * inv_sqrt[None, :]


def build_basis(K: int = 2, topology: SkeletonTopology | None = None) -> SpectralBasis:
    """Chebyshev polynomials T_0..T_{K-1} of the scaled Laplacian ``L - I``
    (lambda_max fixed at 2)."""
    if K < 1:
        raise ValueError(f"Chebyshev order must be >= 1, got {K}")
    topology = topology or build_topology()
    lap = normalized_laplacian(topology.adjacency)
    n = lap.shape[0]
    scaled = lap - np.eye(n)
    cheb = np.empty((K, n, n))
    cheb[0] = np.eye(n)
    if K > 1:
        cheb[1] = scaled
    for k in range(2, K):
        cheb[k] = 2.0 * scaled @ cheb[k - 1] - cheb[k - 2]
    lap.setflags(write=False)
    cheb.setflags(write=False)
    return SpectralBasis(laplacian=lap, cheb=cheb)


def cheb_conv(x: np.ndarray, W: np.ndarray, basis: SpectralBasis) -> np.ndarray:
    """``sum_k T_k @ x @ W[k]`` for a single graph signal ``x`` of shape (N, C)."""
    x = np.asarray(x, dtype=np.float64)
    if W.shape[0] != basis.K or x.shape != (basis.num_nodes, W.shape[1]):
        raise ValueError(
            f"shape mismatch: x {x.shape}, W {W.shape}, basis K={basis.K}")
    out = x @ W[0]
    for k in range(1, basis.K):
        out = out + basis.cheb[k] @ x @ W[k]
    return out


@dataclass
class GConvGruParams:
    """Per-gate weights: ``input[g]`` (K, C_in, H), ``hidden[g]`` (K, H, H),
    ``bias[g]`` (H,)."""

    input: dict[str, np.ndarray]
    hidden: dict[str, np.ndarray]
    bias: dict[str, np.ndarray]

    @property
    def K(self) -> int:
        return self.input["update"].shape[0]

    @property
    def in_channels(self) -> int:
        return self.input["update"].shape[1]

    @property
    def hidden_channels(self) -> int:
        return self.input["update"].shape[2]

    @classmethod
    def zeros(cls, K: int, hidden: int, in_channels: int = NUM_CHANNELS) -> "GConvGruParams":
        return cls(
            input={g: np.zeros((K, in_channels, hidden)) for g in GATES},
            hidden={g: np.zeros((K, hidden, hidden)) for g in GATES},
            bias={g: np.zeros(hidden) for g in GATES},
        )

    @classmethod
    def init(cls, K: int, hidden: int, rng: np.random.Generator,
             in_channels: int = NUM_CHANNELS) -> "GConvGruParams":
        p = cls.zeros(K, hidden, in_channels)
        for g in GATES:
            for tensor in (p.input[g], p.hidden[g]):
                bound = 1.0 / np.sqrt(tensor.size)
                tensor[...] = rng.uniform(-bound, bound, tensor.shape)
        return p

    def named(self):
        for g in GATES:
            yield f"gru.{g}.input", self.input[g]
            yield f"gru.{g}.hidden", self.hidden[g]
            yield f"gru.{g}.bias", self.bias[g]

    def stacked(self):
        """Channel-mixing matrices for the batched kernels.

        Row ``k*G*H + g*H + j`` of a stack holds output channel ``j`` of
        gate ``g`` for Chebyshev term ``k``.
        """
        K = self.K
        wx = np.concatenate([self.input[g][k].T for k in range(K) for g in GATES])
        wh_zr = np.concatenate(
            [self.hidden[g][k].T for k in range(K) for g in ("update", "reset")])
        wh_c = np.concatenate([self.hidden["candidate"][k].T for k in range(K)])
        b = np.concatenate([self.bias[g] for g in GATES])
        return wx, wh_zr, wh_c, b


def sigmoid(a: np.ndarray) -> np.ndarray:
    # tanh form never overflows.
    return 0.5 + 0.5 * np.tanh(0.5 * a)


def _node_mix(m: np.ndarray, cheb: np.ndarray) -> np.ndarray:
    """``sum_k T_k @ m[k]`` over the node axis; m is (K, F, ..., N, B)."""
    K = cheb.shape[0]
    out = m[0].copy()
    for k in range(1, K):
        mk = m[k]
        out += (cheb[k] @ mk.reshape(-1, *mk.shape[-2:])).reshape(mk.shape)
    return out


def _node_spread(d: np.ndarray, cheb: np.ndarray) -> np.ndarray:
    """Adjoint of ``_node_mix``: d (F, ..., N, B) -> (K, F, ..., N, B)."""
    K = cheb.shape[0]
    out = np.empty((K,) + d.shape)
    out[0] = d
    flat = d.reshape(-1, *d.shape[-2:])
    for k in range(1, K):
        np.matmul(cheb[k].T, flat, out=out[k].reshape(flat.shape))
    return out


def gru_step(x_t: np.ndarray, h_prev: np.ndarray, params: GConvGruParams,
             basis: SpectralBasis) -> np.ndarray:
    """One cell update for a single graph: x_t (N, C_in), h_prev (N, H)."""
    def conv(x, W):
        return cheb_conv(x, W, basis)

    z = sigmoid(conv(x_t, params.input["update"]) + conv(h_prev, params.hidden["update"])
                + params.bias["update"])
    r = sigmoid(conv(x_t, params.input["reset"]) + conv(h_prev, params.hidden["reset"])
                + params.bias["reset"])
    cand = np.tanh(conv(x_t, params.input["candidate"])
                   + conv(r * h_prev, params.hidden["candidate"]) + params.bias["candidate"])
    h = z * h_prev + (1.0 - z) * cand
    if not np.all(np.isfinite(h)):
        raise NumericFault("non-finite hidden state in gru_step")
    return h


@dataclass
class GruTape:
    x: np.ndarray                # (C, T, N, B)
    h_prev: list[np.ndarray]     # per step (H, N, B)
    z: list[np.ndarray]
    r: list[np.ndarray]
    cand: list[np.ndarray]
    stacked: tuple


def gru_sequence(x: np.ndarray, params: GConvGruParams, basis: SpectralBasis,
                 record: bool = False):
    """Run the cell from a zero state over a channel-first sequence ``x`` of
    shape (C_in, T, N, B), B independent sequences at once.

    Returns the final hidden state (H, N, B) and, if ``record``, the tape
    needed by :func:`gru_backward`.
    """
    cheb = basis.cheb
    K = cheb.shape[0]
    C, T, n, b = x.shape
    H = params.hidden_channels
    stacked = params.stacked()
    wx, wh_zr, wh_c, bias = stacked
    mx = (wx @ x.reshape(C, -1)).reshape(K, 3 * H, T, n, b)
    ax = _node_mix(mx, cheb)
    ax += bias[:, None, None, None]

    h = np.zeros((H, n, b))
    tape = GruTape(x, [], [], [], [], stacked) if record else None
    for t in range(T):
        m = (wh_zr @ h.reshape(H, -1)).reshape(K, 2 * H, n, b)
        zr = sigmoid(ax[:2 * H, t] + _node_mix(m, cheb))
        z, r = zr[:H], zr[H:]
        m = (wh_c @ (r * h).reshape(H, -1)).reshape(K, H, n, b)
        cand = np.tanh(ax[2 * H:, t] + _node_mix(m, cheb))
        if record:
            tape.h_prev.append(h)
            tape.z.append(z)
            tape.r.append(r)
            tape.cand.append(cand)
        h = z * h + (1.0 - z) * cand
    if not np.all(np.isfinite(h)):
        raise NumericFault("non-finite hidden state")
    return h, tape


def gru_backward(tape: GruTape | None, d_h_final: np.ndarray, basis: SpectralBasis,
                 input_grad: bool = False):
    """Backpropagate ``dL/dh_T`` (H, N, B) through the recorded sequence.

    Returns ``(grads, d_x)``: ``grads`` is a GConvGruParams of parameter
    gradients summed over time and batch; ``d_x`` is the gradient for the
    input (C_in, T, N, B), or None unless ``input_grad``.
    """
    if tape is None or not tape.h_prev:
        raise ValueError("gru_backward needs a tape recorded by gru_sequence(record=True)")
    cheb = basis.cheb
    K = cheb.shape[0]
    wx, wh_zr, wh_c, _ = tape.stacked
    H = wh_c.shape[1]
    C, T, n, b = tape.x.shape

    d_wh_zr = np.zeros_like(wh_zr)
    d_wh_c = np.zeros_like(wh_c)
    d_ax = np.empty((3 * H, T, n, b))
    dh = d_h_final
    for t in reversed(range(T)):
        hp, z, r, cand = tape.h_prev[t], tape.z[t], tape.r[t], tape.cand[t]
        d_ac = dh * (1.0 - z) * (1.0 - cand * cand)
        d_az = dh * (hp - cand) * z * (1.0 - z)
        dhp = dh * z

        dm = _node_spread(d_ac, cheb).reshape(K * H, -1)
        d_wh_c += dm @ (r * hp).reshape(H, -1).T
        d_rh = (wh_c.T @ dm).reshape(H, n, b)
        dhp += d_rh * r

        d_ax[:H, t] = d_az
        d_ax[H:2 * H, t] = d_rh * hp * r * (1.0 - r)
        d_ax[2 * H:, t] = d_ac
        dm = _node_spread(d_ax[:2 * H, t], cheb).reshape(2 * K * H, -1)
        d_wh_zr += dm @ hp.reshape(H, -1).T
        dhp += (wh_zr.T @ dm).reshape(H, n, b)
        dh = dhp

    dm = _node_spread(d_ax, cheb).reshape(3 * K * H, -1)
    d_wx = dm @ tape.x.reshape(C, -1).T
    d_b = d_ax.reshape(3 * H, -1).sum(axis=1)

    def unstack(d, gates, width):
        rows = d.reshape(K, len(gates), H, width)
        return {g: rows[:, i].transpose(0, 2, 1).copy() for i, g in enumerate(gates)}

    grads = GConvGruParams(
        input=unstack(d_wx, GATES, C),
        hidden={**unstack(d_wh_zr, ("update", "reset"), H),
                **unstack(d_wh_c, ("candidate",), H)},
        bias={g: d_b[i * H:(i + 1) * H].copy() for i, g in enumerate(GATES)},
    )
    d_x = (wx.T @ dm).reshape(C, T, n, b) if input_grad else None
    return grads, d_x
