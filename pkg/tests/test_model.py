import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from focuslab.camera import MotionModel, start_episode, synthetic_stack
from focuslab.model import layers
from focuslab.model.checkpoint import CheckpointError, load_params, save_params
from focuslab.model.network import (ModelConfig, ModelParams, NumericError, RecurrentState, backward,
                                    episode_losses, forward_step, loss_focus, loss_heatmap, loss_total,
                                    param_shapes, run_sequence)
from focuslab.model.train import TrainConfig, rollout, train, write_log_csv
from focuslab.optics import LensConfig

SMALL = ModelConfig(input_size=(16, 16), encoder_channels=(2, 4, 8), recurrent_width=8)


def perturbed(cfg, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    p = ModelParams.init(cfg, seed)
    for _, v in p.items():
        v += scale * rng.standard_normal(v.shape)
    return p


# ------------------------------------------------------------------ forward

def test_zero_network():
    cfg = ModelConfig()
    act = forward_step(ModelParams.zeros(cfg), np.random.default_rng(0).uniform(size=(64, 64)))
    assert act.delta_f.tolist() == [0.0]
    np.testing.assert_allclose(act.heatmap, 0.5)
    assert act.feature_map.shape == (1, 64, 8, 8) and act.attention.shape == (1, 8, 8)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        forward_step(ModelParams.zeros(SMALL), np.zeros((15, 16)))
    with pytest.raises(ValueError):
        forward_step(ModelParams.zeros(SMALL), np.zeros((16, 16)), RecurrentState.zeros(ModelConfig(), 1))
    with pytest.raises(ValueError):
        ModelConfig(input_size=(20, 16))
    with pytest.raises(ValueError):
        ModelParams(SMALL, {})


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_names_layer():
    p = perturbed(SMALL, 0)
    p.tensors["enc2_w"][0, 0, 0, 0] = 1e308
    with pytest.raises(NumericError, match="enc2"):
        forward_step(p, np.random.default_rng(0).uniform(size=(16, 16)) + 5)


def test_attention_gating_and_bilinearity():
    p = perturbed(SMALL, 1)
    img = np.random.default_rng(2).uniform(size=(16, 16))
    assert np.all(forward_step(p, img, attention_override=0.0).pooled == 0.0)
    tau = np.random.default_rng(3).uniform(size=(2, 2))
    a = forward_step(p, img, attention_override=tau)
    q = p.copy()
    # relu and max-pool are positively homogeneous: doubling the last encoder layer doubles phi
    q.tensors["enc3_w"] *= 2
    q.tensors["enc3_b"] *= 2
    b = forward_step(q, img, attention_override=tau)
    np.testing.assert_allclose(b.feature_map, 2 * a.feature_map, rtol=1e-12)
    np.testing.assert_allclose(b.pooled, 2 * a.pooled, rtol=1e-12)


def test_forward_deterministic_and_reset():
    p = perturbed(SMALL, 4)
    rng = np.random.default_rng(5)
    img, other = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
    a, b = forward_step(p, img), forward_step(p, img)
    assert np.array_equal(a.delta_f, b.delta_f) and np.array_equal(a.heatmap, b.heatmap)
    assert np.array_equal(a.state.h, b.state.h)
    # a fresh zero state ignores whatever ran before
    run_sequence(p, [other, other])
    assert np.array_equal(forward_step(p, img, None).delta_f, a.delta_f)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_heatmap_normalized(seed):
    p = perturbed(SMALL, seed % 97, scale=1.0)
    img = np.random.default_rng(seed).uniform(size=(16, 16))
    act = forward_step(p, img)
    np.testing.assert_allclose(act.heatmap.sum(axis=1), 1.0, atol=1e-6)
    assert act.attention.min() >= 0 and act.attention.max() <= 1


def test_batch_matches_single():
    p = perturbed(SMALL, 6)
    imgs = np.random.default_rng(7).uniform(size=(3, 16, 16))
    batch = forward_step(p, imgs)
    for i in range(3):
        np.testing.assert_allclose(forward_step(p, imgs[i]).delta_f, batch.delta_f[i:i + 1], rtol=1e-12)


# ------------------------------------------------------------------ losses

def test_loss_examples():
    assert loss_focus([0.3], [1.0], [0.7]) == pytest.approx(0.0, abs=1e-15)
    assert loss_focus([0.0], [0.5], [0.0]) == 0.25
    assert loss_focus([0.1, -0.3], [0.0, 0.0], [0.0, 0.0]) == pytest.approx(0.05)
    labels = np.random.default_rng(0).integers(0, 2, size=(4, 4))
    uniform = np.full((2, 4, 4), 0.5)
    assert loss_heatmap(uniform, labels) == pytest.approx(np.log(2))
    onehot = np.stack([labels == 0, labels == 1]).astype(float)
    assert loss_heatmap(onehot, labels) <= -np.log(1 - 1e-12) + 1e-15
    half = uniform.copy()
    half[:, :2] = onehot[:, :2]
    assert loss_heatmap(half, labels) == pytest.approx(np.log(2) / 2, rel=1e-9)
    assert loss_total(0.05, 0.69, 1.0) == pytest.approx(0.74)
    assert loss_total(0.3, 0.69, 0.0) == 0.3
    assert loss_total(0.0, 0.0, 5.0) == 0.0


# ------------------------------------------------------------------ gradients

def finite_difference_errors(cfg, seed, T=3, N=2, h=1e-6):
    # small h: larger steps cross ReLU and max-pool kinks
    rng = np.random.default_rng(seed + 100)
    p = perturbed(cfg, seed)
    W, H = cfg.input_size
    frames = rng.uniform(size=(T, N, H, W))
    targets = rng.normal(size=(T, N))
    labels = (rng.uniform(size=(T, N, H, W)) > 0.5).astype(int)

    def loss(params):
        return episode_losses(run_sequence(params, frames), targets, labels, 1.0)[0]

    acts = run_sequence(p, frames)
    _, _, _, d_f, d_h = episode_losses(acts, targets, labels, 1.0)
    grads = backward(p, acts, d_f, d_h)
    errors = {}
    for name, arr in p.items():
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            lp = loss(p)
            arr[idx] = old - h
            lm = loss(p)
            arr[idx] = old
            fd[idx] = (lp - lm) / (2 * h)
        denom = max(np.linalg.norm(fd), 1e-30)
        errors[name] = np.linalg.norm(grads[name] - fd) / denom
    return errors


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(seed):
    errors = finite_difference_errors(SMALL, seed)
    assert set(errors) == {n for n, _ in param_shapes(SMALL)}
    bad = {k: v for k, v in errors.items() if not v < 1e-3}
    assert not bad, bad


def test_zero_loss_zero_gradients():
    p = perturbed(SMALL, 3)
    frames = np.random.default_rng(0).uniform(size=(2, 1, 16, 16))
    acts = run_sequence(p, frames)
    grads = backward(p, acts, [np.zeros(1), np.zeros(1)], None)
    assert all(np.all(g == 0) for g in grads.values())


def test_single_step_recurrent_gradients_analytic():
    p = perturbed(SMALL, 8)
    img = np.random.default_rng(9).uniform(size=(1, 16, 16))
    act = forward_step(p, img)
    d = np.array([0.7])
    g = backward(p, [act], [d], None)
    nh = SMALL.recurrent_width
    z = act.pooled @ p["lstm_wx"].T + p["lstm_b"]        # h_prev = 0
    sig = lambda v: 1 / (1 + np.exp(-v))
    i, f, gg, o = sig(z[:, :nh]), sig(z[:, nh:2 * nh]), np.tanh(z[:, 2 * nh:3 * nh]), sig(z[:, 3 * nh:])
    c = i * gg
    h = o * np.tanh(c)
    np.testing.assert_allclose(g["focus_w"], d[0] * h[0], rtol=1e-9, atol=1e-15)
    np.testing.assert_allclose(g["focus_b"], d, rtol=1e-12)
    dh = d[0] * p["focus_w"]
    dc = dh * o[0] * (1 - np.tanh(c[0]) ** 2)
    dz = np.concatenate([dc * gg[0] * i[0] * (1 - i[0]), np.zeros(nh),
                         dc * i[0] * (1 - gg[0] ** 2), dh * np.tanh(c[0]) * o[0] * (1 - o[0])])
    np.testing.assert_allclose(g["lstm_b"], dz, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(g["lstm_wx"], np.outer(dz, act.pooled[0]), rtol=1e-10, atol=1e-14)
    assert np.all(g["lstm_wh"] == 0)


def test_layer_adjoints():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 4, 6))
    out, idx = layers.maxpool2(x)
    dout = rng.normal(size=out.shape)
    assert np.sum(out * dout) == pytest.approx(np.sum(x * layers.maxpool2_backward(dout, idx)))
    u = layers.upsample2(x)
    du = rng.normal(size=u.shape)
    assert np.sum(u * du) == pytest.approx(np.sum(x * layers.upsample2_backward(du)))


# ------------------------------------------------------------------ training

def _episodes(n=2, motion=None, size=16):
    lens = LensConfig()
    stacks = [synthetic_stack(300 + i, lens=lens, size=size, n_positions=40) for i in range(n)]
    return [start_episode(s, motion, lens, initial_focus_dpt=-1.0 + i) for i, s in enumerate(stacks)], stacks


def test_rollout_targets_follow_commands():
    p = perturbed(SMALL, 0, 0.1)
    eps, stacks = _episodes()
    acts, targets, labels, cmds = rollout(p, eps, 3)
    assert targets.shape == (3, 2) and labels.shape == (3, 2, 16, 16) and cmds.shape == (3, 2)
    for i, s in enumerate(stacks):
        assert targets[0, i] == pytest.approx(abs(s.best_focus_dpt - eps[i].current_focus_dpt))
        assert targets[1, i] == pytest.approx(s.best_focus_dpt - cmds[0, i])


def test_overfit_single_static_episode():
    cfg = ModelConfig(input_size=(32, 32), encoder_channels=(4, 8, 16), recurrent_width=16)
    eps, _ = _episodes(1, size=32)
    tc = TrainConfig(epochs=500, updates_per_epoch=1, batch_episodes=1, steps_per_episode=3, curriculum=(),
                     optimizer="adam", learning_rate=3e-3, seed=0)
    res = train(cfg, tc, params=ModelParams.init(cfg, 0), episodes=lambda rng, n: [eps[0]] * n)
    assert not res.aborted
    assert min(row[2] for row in res.log) < 1e-3, res.log[-5:]


def _tiny_train(lam, epochs=30, seed=0):
    cfg = ModelConfig(input_size=(16, 16), encoder_channels=(2, 4, 8), recurrent_width=8, lambda_heatmap=lam)
    _, stacks = _episodes(3)
    tc = TrainConfig(epochs=epochs, updates_per_epoch=2, batch_episodes=2, steps_per_episode=2, curriculum=(),
                     optimizer="adam", learning_rate=1e-2, seed=seed)
    return train(cfg, tc, stacks=stacks)


def test_curriculum_schedule():
    cfg = ModelConfig(input_size=(16, 16), encoder_channels=(2, 4, 8), recurrent_width=8)
    _, stacks = _episodes(2)
    tc = TrainConfig(curriculum=((2, 1, 2, 1e-2), (1, 2, 1, 1e-2)), epochs=1, steps_per_episode=3,
                     batch_episodes=1, updates_per_epoch=1, optimizer="adam", seed=0)
    res = train(cfg, tc, stacks=stacks)
    assert [row[0] for row in res.log] == [0, 1, 2, 3]
    with pytest.raises(ValueError, match="curriculum"):
        TrainConfig(curriculum=((1, 0, 1, 1e-3),))


def test_training_log_deterministic(tmp_path):
    a, b = _tiny_train(1.0, 3), _tiny_train(1.0, 3)
    assert a.log == b.log
    write_log_csv(tmp_path / "a.csv", a.log)
    write_log_csv(tmp_path / "b.csv", b.log)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "epoch,mean_loss_total,mean_loss_f,mean_loss_heatmap"


def test_heatmap_ablation():
    trained, ablated = _tiny_train(1.0), _tiny_train(0.0)
    first = trained.log[0][3]
    assert np.mean([r[3] for r in trained.log[-5:]]) < 0.8 * first
    assert np.mean([r[3] for r in ablated.log[-5:]]) >= 0.95 * ablated.log[0][3]


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergence_aborts_with_last_good_params():
    cfg = ModelConfig(input_size=(16, 16), encoder_channels=(2, 4, 8), recurrent_width=8)
    _, stacks = _episodes(2)
    tc = TrainConfig(epochs=20, updates_per_epoch=1, batch_episodes=1, steps_per_episode=2, curriculum=(),
                     optimizer="sgd", learning_rate=1e200, clip_norm=0, seed=0)
    res = train(cfg, tc, stacks=stacks)
    assert res.aborted and "diverged" in res.message
    assert all(np.all(np.isfinite(v)) for _, v in res.params.items())


# ------------------------------------------------------------------ checkpoints

def test_checkpoint_round_trip(tmp_path):
    p = perturbed(SMALL, 11)
    save_params(tmp_path / "m.ckpt", p)
    q = load_params(tmp_path / "m.ckpt")
    assert q.config == p.config
    for name, v in p.items():
        np.testing.assert_array_equal(q[name], v.astype(np.float32).astype(np.float64))
    data = (tmp_path / "m.ckpt").read_bytes()
    assert data[:8] == b"FOCUSLAB"
    n_float = sum(int(np.prod(s)) for _, s in param_shapes(SMALL))
    assert len(data) > 4 * n_float


def test_checkpoint_errors(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOTACKPT" + bytes(40))
    with pytest.raises(CheckpointError):
        load_params(tmp_path / "bad")
    save_params(tmp_path / "m.ckpt", perturbed(SMALL, 0))
    data = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "trunc").write_bytes(data[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_params(tmp_path / "trunc")
