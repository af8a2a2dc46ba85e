import math

import numpy as np
import pytest

from raysr.dataset import PairBatch, affine_samples, fit_norm
from raysr.interp import interpolate_array
from raysr.mll import (
    CHECKPOINT_VERSION,
    AdamState,
    ELBSpec,
    ModelError,
    Targets,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    forward,
    gradients,
    hidden_dims,
    init_model,
    load_model,
    loss_and_gradients,
    make_targets,
    network_forward,
    predict,
    save_model,
    toy_model,
    train,
    weighted_loss,
)


def batch(n=8, n_slots=2, scale=4, seed=0):
    return PairBatch.from_samples(affine_samples(n, n_slots, seed), scale)


# ---------------------------------------------------------------- init / shapes


def test_default_dims_at_scale_4():
    m = init_model(4, 10)
    assert m.input_dim == 680 and m.output_dim == 12 * 10 * 4 == 480
    assert m.specs[0].layer_dims == (680, 512, 384, 256, 128, 64, 480)
    assert m.specs[1].layer_dims == m.specs[2].layer_dims == (480, 512, 384, 256, 128, 64, 480)
    assert len(m.params) == 36


def test_hidden_profile():
    assert hidden_dims(512) == (512, 384, 256, 128, 64)
    assert hidden_dims(32) == (32, 24, 16, 8, 4)


def test_elb_spec_validation():
    with pytest.raises(ModelError):
        ELBSpec((4, 8, 8, 8, 8, 8))
    with pytest.raises(ModelError):
        ELBSpec((4, 8, 16, 8, 8, 8, 4))
    with pytest.raises(ModelError):
        ELBSpec((4, 8, 8, 8, 8, 0, 4))
    with pytest.raises(ModelError):
        ELBSpec((4, 8, 8, 8, 8, 8, 4), "gelu")


def test_init_deterministic_and_bounded():
    a, b = init_model(8, 3, seed=4), init_model(8, 3, seed=4)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    c = init_model(8, 3, seed=5)
    assert not np.array_equal(a.params[0], c.params[0])
    for w in a.params[::2]:
        assert np.abs(w).max() <= 1 / math.sqrt(w.shape[0])
    assert all(np.all(bias == 0) for bias in a.params[1::2])


@pytest.mark.parametrize("scale,n_pred", [(2, 8), (4, 12), (8, 14), (16, 15)])
def test_output_shape_every_scale(scale, n_pred):
    b = batch(3, 2, scale)
    m = init_model(scale, 2, max_dim=16)
    assert predict(m, b).shape == (3, n_pred, 2, 4)
    assert m.output_dim == n_pred * 2 * 4


def test_zero_model_outputs_channel_means():
    b = batch(4)
    norm = fit_norm(b)
    m = init_model(4, 2, zero=True, max_dim=16, norm=norm)
    out = predict(m, b)
    np.testing.assert_allclose(out, np.broadcast_to(norm.mean, out.shape), rtol=0, atol=1e-12)


def test_scale_mismatch_rejected():
    m = init_model(4, 2, max_dim=16)
    with pytest.raises(ModelError):
        predict(m, batch(2, 2, 8))
    with pytest.raises(ModelError):
        predict(m, batch(2, 3, 4))
    with pytest.raises(ModelError):
        network_forward(m, np.zeros((1, 5)))


def scalar_block(x, block):
    """Plain-loop evaluation of one ELB: ReLU on all but the last layer."""
    a = list(x)
    for layer in range(6):
        w, b = block[2 * layer], block[2 * layer + 1]
        z = [b[j] + sum(a[i] * w[i][j] for i in range(len(a))) for j in range(len(b))]
        a = z if layer == 5 else [max(0.0, v) for v in z]
    return a


@pytest.mark.parametrize("residual", [True, False])
def test_forward_matches_scalar_evaluation(residual):
    m = toy_model(3, 2, hidden=(2, 2, 2, 2, 2), seed=7, residual=residual)
    rng = np.random.default_rng(0)
    for p in m.params[1::2]:
        p[:] = rng.normal(scale=0.5, size=p.shape)
    x = rng.normal(size=(4, 3))
    y = network_forward(m, x)
    blocks = [[p.tolist() for p in m.block_params(b)] for b in range(3)]
    for row, out in zip(x, y):
        h1 = scalar_block(row, blocks[0])
        h2 = scalar_block(h1, blocks[1])
        h3 = scalar_block(h2, blocks[2])
        ref = [a + b + c for a, b, c in zip(h1, h2, h3)] if residual else h3
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_model_input_equals_lr_at_known_positions():
    b = batch(3)
    full = interpolate_array(b.lr, b.known_indices, b.rx)
    assert np.array_equal(full[:, b.known_indices], b.lr)


# ---------------------------------------------------------------- loss


def test_loss_examples():
    z = np.zeros((1, 1, 4))
    assert weighted_loss(z, z, np.ones((1, 1))) == 0.0
    e = z.copy()
    e[0, 0, 3] = 2.0
    assert weighted_loss(e, z, np.ones((1, 1))) == 4.0
    assert weighted_loss(e, z, np.full((1, 1), 1e-2)) == pytest.approx(4e-4, rel=1e-12)
    with pytest.raises(ModelError):
        weighted_loss(e, np.zeros((1, 2, 4)), np.ones((1, 1)))


def test_loss_weight_scaling_is_quadratic():
    rng = np.random.default_rng(2)
    p, t = rng.normal(size=(6, 3, 4)), rng.normal(size=(6, 3, 4))
    w = np.ones((6, 3))
    base = weighted_loss(p, t, w)
    w2 = w.copy()
    w2[:, 1] *= 7.0
    part = weighted_loss(p[:, 1:2], t[:, 1:2], w[:, 1:2])
    assert weighted_loss(p, t, w2) == pytest.approx(base + 48 * part, rel=1e-12)


# ---------------------------------------------------------------- gradients


def toy_targets(m, n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, m.input_dim))
    t = rng.normal(size=(n, m.output_dim))
    w = rng.choice([1.0, 1e-2, 0.0], size=(n, m.output_dim), p=[0.6, 0.2, 0.2])
    return Targets(x, t, w)


def finite_difference_check(m, data, n_probe, seed, h=1e-5):
    """Largest relative disagreement between analytic and central-difference gradients."""
    _, grads = loss_and_gradients(m, data)
    rng = np.random.default_rng(seed)
    sizes = np.array([p.size for p in m.params])
    flat = rng.choice(sizes.sum(), size=n_probe, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for f in flat:
        k = int(np.searchsorted(offsets, f, side="right") - 1)
        idx = np.unravel_index(f - offsets[k], m.params[k].shape)
        old = m.params[k][idx]
        m.params[k][idx] = old + h
        up = loss_and_gradients(m, data)[0]
        m.params[k][idx] = old - h
        down = loss_and_gradients(m, data)[0]
        m.params[k][idx] = old
        num = (up - down) / (2 * h)
        ana = grads[k][idx]
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-7))
    return worst


def conditioned_toy(activation="relu", residual=True, seed=3):
    """Toy net with doubled weights and random biases.

    At the default init the h3-only path has gradients near 1e-7, where
    central differences are dominated by roundoff rather than the derivative.
    """
    m = toy_model(8, 4, hidden=(8, 8, 8, 8, 8), seed=seed, activation=activation, residual=residual)
    rng = np.random.default_rng(1)
    for w, b in zip(m.params[0::2], m.params[1::2]):
        w *= 2.0
        b[:] = rng.normal(scale=0.3, size=b.shape)
    return m


@pytest.mark.parametrize("activation", ["relu", "tanh"])
@pytest.mark.parametrize("residual", [True, False])
def test_gradients_match_finite_differences(activation, residual):
    m = conditioned_toy(activation, residual)
    assert finite_difference_check(m, toy_targets(m, 5, 0), 120, seed=9) < 1e-4


def test_zero_weights_give_zero_gradients():
    m = toy_model(8, 4, seed=1)
    d = toy_targets(m, 3, 0)
    d.w[:] = 0.0
    assert all(np.all(g == 0) for g in loss_and_gradients(m, d)[1])


def test_batch_gradient_is_sum_of_sample_gradients():
    m = toy_model(8, 4, seed=2, activation="tanh")
    d = toy_targets(m, 6, 5)
    total = gradients(m, d)
    acc = [np.zeros_like(p) for p in m.params]
    for i in range(len(d)):
        for a, g in zip(acc, gradients(m, d.subset([i]))):
            a += g
    for a, g in zip(acc, total):
        np.testing.assert_allclose(g, a, rtol=1e-10, atol=1e-12)


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_is_noop():
    p = [np.array([1.0, -2.0])]
    new, state = adam_step(p, [np.zeros(2)], AdamState.zeros_like(p), TrainConfig())
    assert np.array_equal(new[0], p[0]) and state.t == 1


def test_adam_first_step_magnitude():
    cfg = TrainConfig(learning_rate=1e-3)
    p = [np.array([0.5, 0.5])]
    g = [np.array([4.0, -0.25])]
    new, _ = adam_step(p, g, AdamState.zeros_like(p), cfg)
    # t=1: m_hat = g, v_hat = g^2, step = lr * g / (|g| + eps)
    expected = p[0] - 1e-3 * g[0] / (np.abs(g[0]) + 1e-8)
    np.testing.assert_allclose(new[0], expected, rtol=1e-15)
    assert np.all(np.sign(new[0] - p[0]) == -np.sign(g[0]))


def test_adam_deterministic():
    rng = np.random.default_rng(0)
    p = [rng.normal(size=3)]
    runs = []
    for _ in range(2):
        q, s = p, AdamState.zeros_like(p)
        for k in range(5):
            q, s = adam_step(q, [np.sin(q[0] + k)], s, TrainConfig(learning_rate=0.1))
        runs.append(q[0])
    assert np.array_equal(runs[0], runs[1])


# ---------------------------------------------------------------- training


def small_sets():
    samples = affine_samples(50, 2, seed=11)
    for k, s in enumerate(samples):
        s.features[:, :, 3] += 3.0 * np.sin(np.arange(17) * 0.7 + k)[:, None]
    tr = PairBatch.from_samples(samples[:40], 4)
    va = PairBatch.from_samples(samples[40:], 4)
    return tr, va, fit_norm(samples[:40])


def test_training_reduces_loss():
    tr, va, norm = small_sets()
    m = init_model(4, 2, seed=0, max_dim=64, norm=norm)
    res = train(m, tr, va, TrainConfig(epochs=15, learning_rate=1e-3))
    assert len(res.train_loss) == len(res.val_loss) == 15
    assert res.train_loss[-1] < res.initial_train_loss
    assert 1 <= res.best_epoch <= 15 and res.model.epoch == 15


def test_default_schedule_lowers_train_loss():
    tr, va, norm = small_sets()
    res = train(init_model(4, 2, seed=0, norm=norm), tr, va, TrainConfig())
    assert len(res.train_loss) == 80
    assert res.train_loss[-1] < res.initial_train_loss


def test_zero_learning_rate_keeps_parameters():
    tr, va, norm = small_sets()
    m = init_model(4, 2, seed=0, max_dim=32, norm=norm)
    res = train(m, tr, va, TrainConfig(epochs=3, learning_rate=0.0))
    assert all(np.array_equal(a, b) for a, b in zip(m.params, res.model.params))


def test_training_deterministic():
    tr, va, norm = small_sets()
    m = init_model(4, 2, seed=0, max_dim=32, norm=norm)
    a = train(m, tr, va, TrainConfig(epochs=3, learning_rate=1e-3))
    b = train(m, tr, va, TrainConfig(epochs=3, learning_rate=1e-3))
    assert a.train_loss == b.train_loss
    assert all(np.array_equal(x, y) for x, y in zip(a.model.params, b.model.params))


def test_divergence_reported():
    tr, va, norm = small_sets()
    m = init_model(4, 2, seed=0, max_dim=32, norm=norm)
    m.params[0][0, 0] = np.nan
    with pytest.raises(TrainingDiverged):
        train(m, tr, va, TrainConfig(epochs=1))


def test_bad_config():
    with pytest.raises(ModelError):
        TrainConfig(epochs=0)
    with pytest.raises(ModelError):
        TrainConfig(learning_rate=-1.0)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    tr, va, norm = small_sets()
    m = init_model(4, 2, seed=3, max_dim=32, norm=norm, residual=False)
    m.epoch = 12
    save_model(m, tmp_path / "m.npz")
    back = load_model(tmp_path / "m.npz")
    assert (back.scale, back.n_slots, back.seed, back.residual, back.epoch) == (4, 2, 3, False, 12)
    assert back.specs == m.specs
    assert all(np.array_equal(a, b) for a, b in zip(m.params, back.params))
    np.testing.assert_array_equal(predict(back, va), predict(m, va))


def test_checkpoint_version_mismatch(tmp_path):
    import json

    m = init_model(4, 2, max_dim=16)
    save_model(m, tmp_path / "m.npz")
    with np.load(tmp_path / "m.npz") as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(bytes(arrays["meta"]).decode())
    meta["version"] = CHECKPOINT_VERSION + 1
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(tmp_path / "bad.npz", **arrays)
    with pytest.raises(ModelError):
        load_model(tmp_path / "bad.npz")


def test_forward_single_window():
    b = batch(2)
    m = init_model(4, 2, max_dim=16)
    one = forward(m, b.lr[0], b.rx[0])
    np.testing.assert_allclose(one, predict(m, b)[0], rtol=1e-12)
    t = make_targets(m, b)
    assert t.x.shape == (2, m.input_dim) and t.t.shape == (2, m.output_dim)
