import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pedintent.model import (
    FOOTPRINT_BUDGET_BYTES, PedGnnConfig, PedGnnParams, Prediction, checkpoint_dict,
    checkpoint_from_dict, count_params, cross_entropy, forward, forward_batch, load_checkpoint,
    loss, loss_and_grad, save_checkpoint, softmax,
)
from pedintent.skeleton import SkeletonWindow, normalize_joints
from pedintent.train import OptimState, adamw_step


def rand_windows(rng, b, n):
    return normalize_joints(rng.uniform(0, 500, (b, n, 19, 3)))


def test_default_param_count_hand_tally():
    cfg = PedGnnConfig()
    hand = 3 * (2 * 3 * 8 + 2 * 8 * 8 + 8) + (152 * 32 + 32) + (32 * 16 + 16) + (16 * 2 + 2)
    assert hand == 6010
    assert count_params(PedGnnParams.zeros(cfg)) == (6010, 24040)
    assert 24040 <= FOOTPRINT_BUDGET_BYTES == 27648


def test_tiny_param_count():
    cfg = PedGnnConfig(hidden=1, cheb_order=1, fc_dims=(1, 1, 2))
    hand = 3 * (3 + 1 + 1) + (19 * 1 + 1) + (1 * 1 + 1) + (1 * 2 + 2)
    assert count_params(PedGnnParams.zeros(cfg)) == (hand, 4 * hand) == (41, 164)


@pytest.mark.parametrize("bad", [dict(n_frames=0), dict(fc_dims=(4, 4, 3)),
                                 dict(dropout_rate=1.0), dict(hidden=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        PedGnnConfig(**bad)


def test_zero_params_uniform_prediction():
    cfg = PedGnnConfig(n_frames=5)
    w = rand_windows(np.random.default_rng(0), 1, 5)[0]
    pred = forward(w, PedGnnParams.zeros(cfg), cfg)
    assert pred.logits == (0.0, 0.0)
    assert pred.p_cross == pred.p_nocross == 0.5
    assert math.isclose(loss(pred, "C"), math.log(2), rel_tol=1e-15)
    assert math.isclose(loss(pred, "NC"), math.log(2), rel_tol=1e-15)


def test_loss_values():
    assert math.isclose(loss(Prediction(0.0, 0.0, (2.0, 0.0)), "C"),
                        math.log1p(math.exp(-2)), rel_tol=1e-14)
    assert abs(loss(Prediction(0, 0, (2.0, 0.0)), "C") - 0.126928) < 1e-6
    assert loss(Prediction(0, 0, (800.0, 0.0)), "C") == 0.0
    # no overflow in the other direction either
    assert math.isclose(loss(Prediction(0, 0, (-800.0, 0.0)), "C"), 800.0)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (7, 2), elements=st.floats(-700, 700)))
def test_softmax_sums_to_one(logits):
    p = softmax(logits)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    expect = np.logaddexp(logits[:, 0], logits[:, 1]) - logits[:, 0]
    np.testing.assert_allclose(cross_entropy(logits, np.zeros(7, int)), expect,
                               rtol=1e-9, atol=1e-12)


def test_infer_deterministic_and_accepts_window_type():
    cfg = PedGnnConfig(n_frames=6)
    params = PedGnnParams.init(cfg, np.random.default_rng(1))
    w = rand_windows(np.random.default_rng(2), 1, 6)[0]
    a, b = forward(w, params, cfg), forward(w, params, cfg)
    assert a == b
    assert forward(SkeletonWindow(w, range(6)), params, cfg) == a
    assert math.isclose(a.p_cross + a.p_nocross, 1.0, abs_tol=1e-12)


def test_train_mode_uses_dropout():
    cfg = PedGnnConfig(n_frames=4)
    params = PedGnnParams.init(cfg, np.random.default_rng(3))
    w = rand_windows(np.random.default_rng(4), 1, 4)[0]
    outs = {forward(w, params, cfg, "train", np.random.default_rng(s)).logits for s in range(5)}
    assert len(outs) > 1
    with pytest.raises(ValueError):
        forward(w, params, cfg, "train")


def test_batch_equals_single():
    cfg = PedGnnConfig(n_frames=5)
    params = PedGnnParams.init(cfg, np.random.default_rng(5))
    ws = rand_windows(np.random.default_rng(6), 4, 5)
    logits, _ = forward_batch(ws, params, cfg)
    for i in range(4):
        np.testing.assert_allclose(logits[i], forward(ws[i], params, cfg).logits, rtol=1e-12)


def test_window_length_checked():
    cfg = PedGnnConfig(n_frames=5)
    with pytest.raises(ValueError):
        forward(np.zeros((4, 19, 3)), PedGnnParams.zeros(cfg), cfg)


def fd_model(cfg, seed, eps=1e-5, train=False):
    rng = np.random.default_rng(seed)
    params = PedGnnParams.init(cfg, rng)
    ws = rand_windows(rng, 3, cfg.n_frames)
    ys = rng.integers(0, 2, 3)
    masks = None
    if train:
        keep = 1 - cfg.dropout_rate
        dims = (cfg.flat_dim,) + cfg.fc_dims[:2]
        masks = [(rng.random((3, d)) < keep) / keep for d in dims]
    _, grads, dw = loss_and_grad(ws, ys, params, cfg, train=train, masks=masks, input_grad=True)

    def f():
        return loss_and_grad(ws, ys, params, cfg, train=train, masks=masks)[0]

    worst = 0.0
    pairs = list(zip(params.arrays(), grads.arrays())) + [(ws, dw)]
    for arr, g in pairs:
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            up = f()
            arr[idx] = old - eps
            down = f()
            arr[idx] = old
            worst = max(worst, abs(g[idx] - (up - down) / (2 * eps)) / max(1.0, abs(g[idx])))
    return worst


@pytest.mark.parametrize("cfg", [
    PedGnnConfig(n_frames=3, hidden=1, cheb_order=1, fc_dims=(1, 1, 2)),
    PedGnnConfig(n_frames=3, hidden=2, cheb_order=2, fc_dims=(4, 3, 2)),
])
def test_end_to_end_gradients(cfg):
    assert fd_model(cfg, 0) < 1e-5


def test_gradients_with_fixed_dropout_masks():
    cfg = PedGnnConfig(n_frames=2, hidden=2, cheb_order=2, fc_dims=(4, 3, 2))
    assert fd_model(cfg, 1, train=True) < 1e-5


def test_overfit_single_sample():
    cfg = PedGnnConfig(n_frames=4, dropout_rate=0.0)
    params = PedGnnParams.init(cfg, np.random.default_rng(7))
    w = rand_windows(np.random.default_rng(8), 1, 4)
    y = np.array([0])
    state = OptimState.for_params(params.arrays(), lr=0.01)
    for _ in range(200):
        value, grads, _ = loss_and_grad(w, y, params, cfg)
        adamw_step(params.arrays(), grads.arrays(), state)
    assert loss_and_grad(w, y, params, cfg)[0] < 1e-3


def test_checkpoint_roundtrip(tmp_path):
    cfg = PedGnnConfig(n_frames=10, hidden=3, cheb_order=3, fc_dims=(5, 4, 2))
    params = PedGnnParams.init(cfg, np.random.default_rng(9))
    path = tmp_path / "ck.json"
    save_checkpoint(path, params, cfg)
    p2, c2 = load_checkpoint(path)
    assert c2 == cfg
    for (n1, a1), (n2, a2) in zip(params.named(), p2.named()):
        assert n1 == n2 and np.array_equal(a1, a2)
    names = [t["name"] for t in checkpoint_dict(params, cfg)["tensors"]]
    assert names[:3] == ["gru.update.input.k0", "gru.update.input.k1", "gru.update.input.k2"]
    assert "fc3.bias" in names


def test_checkpoint_rejects_bad_data():
    cfg = PedGnnConfig()
    d = checkpoint_dict(PedGnnParams.zeros(cfg), cfg)
    with pytest.raises(ValueError):
        checkpoint_from_dict({**d, "format": "other"})
    broken = {**d, "tensors": d["tensors"][:-1]}
    with pytest.raises(ValueError, match="missing"):
        checkpoint_from_dict(broken)
    bad_shape = {**d, "tensors": [dict(d["tensors"][0], shape=[9, 9])] + d["tensors"][1:]}
    with pytest.raises(ValueError):
        checkpoint_from_dict(bad_shape)


def test_flat_roundtrip():
    cfg = PedGnnConfig()
    p = PedGnnParams.init(cfg, np.random.default_rng(10))
    q = PedGnnParams.zeros(cfg)
    q.set_flat(p.flat())
    assert np.array_equal(q.flat(), p.flat())
    c = p.copy()
    c.fc[0][0][0, 0] += 1
    assert c.fc[0][0][0, 0] != p.fc[0][0][0, 0]
