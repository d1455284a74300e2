import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctbias.errors import ShapeError, StateError, ValidationError
from ctbias.tinynn import (
    Adam,
    ArchSpec,
    ArrayDataset,
    Network,
    TrainConfig,
    batchnorm_forward,
    build_model,
    conv_forward,
    dense_forward,
    load_checkpoint,
    loss_and_gradients,
    loss_bce,
    loss_dice,
    numerical_gradient,
    param_count,
    pool_backward,
    pool_forward,
    predict,
    preset,
    rel_error,
    save_checkpoint,
    sigmoid,
    train,
)
from ctbias.tinynn.layers import Activation, Conv, Dense, Sequential
from ctbias.tinynn.losses import dice_with_logits
from ctbias.tinynn.models import DESK_PRESETS, PAPER_PRESETS
from ctbias.tinynn.ops import activation_forward, conv_output_size
from ctbias.tinynn.train import evaluate, write_history_csv

from gradcases import LAYER_CASES, LOSS_CASES, TOL, layer_errors, loss_error

# --- gradient fidelity (a few seeds here; the acceptance suite runs 20 each)


@pytest.mark.parametrize("name", sorted(LAYER_CASES))
def test_layer_gradients(name):
    for seed in range(3):
        errs = layer_errors(name, seed)
        assert max(errs.values()) < TOL, errs


@pytest.mark.parametrize("name", sorted(LOSS_CASES))
def test_loss_gradients(name):
    for seed in range(3):
        assert loss_error(name, seed) < TOL


class SkewedDense(Dense):
    """A dense layer whose weight gradient is off by 0.1%."""

    def backward(self, dout):
        dx = super().backward(dout)
        self.grads["w"] = self.grads["w"] * 1.001
        return dx


def test_check_module_flags_small_errors():
    from ctbias.tinynn.gradcheck import check_module

    rng = np.random.default_rng(0)
    errs = check_module(SkewedDense(5, 3, rng), rng.normal(size=(4, 5)), rng)
    assert errs["w"] > TOL and errs["input"] < TOL


@pytest.mark.parametrize("kind", ["shallow_cnn", "resnet3d", "unet3d"])
def test_whole_network_gradients(kind):
    shapes = {"shallow_cnn": (8, 8), "resnet3d": (8, 8, 4), "unet3d": (8, 8, 4)}
    spec = preset(kind, input_shape=shapes[kind], channels=(2, 2, 2) if kind != "resnet3d" else (2, 2))
    if kind == "resnet3d":
        spec = ArchSpec("resnet3d", (2, 3), shapes[kind], stem_kernel=3, head_width=4, blocks_per_stage=1)
    model = build_model(spec, 0)
    rng = np.random.default_rng(1)
    # zero-initialized biases put a unit fed by all-zero features exactly on its ReLU kink
    for name, p in model.parameters().items():
        if name.endswith(".b"):
            p += rng.normal(0.0, 0.1, p.shape)
    x = rng.normal(size=(3, spec.in_channels) + spec.input_shape)
    loss = "dice" if kind == "unet3d" else "bce"
    y = (rng.random((3,) + ((1,) + spec.input_shape if kind == "unet3d" else ())) < 0.5).astype(float)
    _, grads = loss_and_gradients(model, x, y, loss)
    f = lambda: loss_and_gradients(model, x, y, loss)[0]
    for name, p in model.parameters().items():
        # a small step keeps ReLU and max-pool kinks from being crossed
        numeric = numerical_gradient(f, p, 1e-6)
        if np.abs(grads[name]).max() < 1e-12:
            # conv biases feeding batchnorm have a structurally zero gradient
            assert np.abs(numeric).max() < 1e-8, name
        else:
            assert rel_error(grads[name], numeric) < TOL, name


def test_backward_without_forward():
    with pytest.raises(StateError):
        Conv(1, 1, 3, 2, np.random.default_rng(0)).backward(np.zeros((1, 1, 3, 3)))


# --- convolution

def test_conv_scalar_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 4, 5))
    out, _ = conv_forward(x, np.full((1, 1, 1, 1), 2.0), np.array([0.5]))
    np.testing.assert_allclose(out, 2 * x + 0.5)


@pytest.mark.parametrize("shape", [(1, 1, 5, 5), (2, 1, 4, 3, 6)])
def test_conv_delta_kernel(shape):
    x = np.random.default_rng(1).normal(size=shape)
    nd = len(shape) - 2
    w = np.zeros((1, 1) + (3,) * nd)
    w[(0, 0) + (1,) * nd] = 1.0
    out, _ = conv_forward(x, w, np.array([-1.0]))
    np.testing.assert_allclose(out, x - 1.0)


def test_conv_valid_sum():
    out, _ = conv_forward(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1), padding="valid")
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 9.0


def direct_correlation(x, w, b, stride, pads):
    """Loop oracle for 2D cross-correlation with explicit zero padding."""
    xp = np.pad(x, [(0, 0), (0, 0), pads[0], pads[1]])
    n, _, hp, wp = xp.shape
    f, _, kh, kw = w.shape
    oh, ow = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    out = np.zeros((n, f, oh, ow))
    for i in range(oh):
        for j in range(ow):
            patch = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            out[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3])) + b
    return out


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.sampled_from([1, 3]), st.integers(1, 2),
       st.sampled_from(["same", "valid"]), st.integers(0, 2**32))
def test_conv_matches_loop_oracle(h, w, k, stride, padding, seed):
    if padding == "valid" and (h < k or w < k):
        return
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 2, h, w))
    kern = rng.normal(size=(3, 2, k, k))
    b = rng.normal(size=3)
    out, _ = conv_forward(x, kern, b, stride, padding)
    assert out.shape[2:] == (conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding))
    if padding == "same":
        from ctbias.tinynn.ops import same_pads
        pads = (same_pads(h, k, stride), same_pads(w, k, stride))
    else:
        pads = ((0, 0), (0, 0))
    np.testing.assert_allclose(out, direct_correlation(x, kern, b, stride, pads), atol=1e-10)


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        conv_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError):
        conv_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 2, 3, 3)), np.zeros(2))


# --- pooling

def test_pool_examples():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    assert pool_forward(x, "max", 2)[0].item() == 4.0
    assert pool_forward(x, "avg", 2)[0].item() == 2.5


def test_max_pool_constant_routes_to_single_argmax():
    x = np.full((1, 1, 4, 4), 3.0)
    out, cache = pool_forward(x, "max", 2)
    assert np.all(out == 3.0)
    dx = pool_backward(np.ones_like(out), cache)
    assert dx.sum() == 4.0
    for i in range(2):
        for j in range(2):
            window = dx[0, 0, 2 * i:2 * i + 2, 2 * j:2 * j + 2]
            assert (window == 1.0).sum() == 1 and window[0, 0] == 1.0


# --- batchnorm

def test_batchnorm_normalizes():
    x = np.random.default_rng(0).normal(3.0, 2.0, size=(8, 3, 4, 4))
    out, _ = batchnorm_forward(x, np.ones(3), np.zeros(3), eps=1e-5)
    mean = out.mean(axis=(0, 2, 3))
    var = out.var(axis=(0, 2, 3))
    assert np.all(np.abs(mean) < 1e-10)
    assert np.all(np.abs(var - 1) < 10 * 1e-5)


def test_batchnorm_beta_shift():
    x = np.random.default_rng(1).normal(size=(4, 2, 3))
    out, _ = batchnorm_forward(x, np.ones(2), np.full(2, 5.0))
    np.testing.assert_allclose(out.mean(axis=(0, 2)), 5.0, atol=1e-10)


def test_batchnorm_constant_channel():
    x = np.full((4, 1, 3), 7.0)
    out, _ = batchnorm_forward(x, np.full(1, 2.0), np.full(1, -1.5))
    # (x - mu) / sqrt(0 + eps) * gamma + beta with x == mu
    np.testing.assert_array_equal(out, -1.5)


def test_batchnorm_needs_two():
    with pytest.raises(ValidationError):
        batchnorm_forward(np.zeros((1, 2, 3)), np.ones(2), np.zeros(2))


# --- dense and activations

def test_dense_examples():
    x = np.array([[1.0, 2.0]])
    assert np.array_equal(dense_forward(x, np.eye(2), np.zeros(2))[0], x)
    assert np.array_equal(dense_forward(x, np.zeros((2, 2)), np.full(2, 4.0))[0], [[4.0, 4.0]])
    out, _ = dense_forward(x, np.array([[1.0, 0.0], [0.0, 3.0]]), np.array([0.0, -1.0]))
    np.testing.assert_array_equal(out, [[1.0, 5.0]])


def test_activations():
    assert sigmoid(np.array(0.0)) == 0.5
    assert activation_forward(np.array([-3.0, 3.0]), "relu")[0].tolist() == [0.0, 3.0]
    s = sigmoid(np.array([-710.0]))[0]
    assert np.isfinite(s) and 0.0 < s <= 1e-300


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=20))
def test_sigmoid_codomain(values):
    s = sigmoid(np.asarray(values))
    assert np.all((s >= 0) & (s <= 1)) and np.all(np.isfinite(s))


# --- losses

def test_bce_examples():
    assert loss_bce(np.array([0.5]), np.array([1.0]))[0] == pytest.approx(math.log(2))
    assert loss_bce(np.array([1 - 1e-7]), np.array([1.0]))[0] == pytest.approx(1e-7, rel=1e-3)
    v, _ = loss_bce(np.array([0.9, 0.2]), np.array([1.0, 0.0]))
    assert v == pytest.approx((-math.log(0.9) - math.log(0.8)) / 2)
    assert v == pytest.approx(0.1643, abs=1e-4)


def test_dice_examples():
    ones = np.ones(100)
    assert loss_dice(ones, ones, 1.0)[0] == pytest.approx(0.0, abs=1e-15)
    p = np.concatenate([np.ones(100), np.zeros(100)])
    y = p[::-1].copy()
    assert loss_dice(p, y, 1.0)[0] == pytest.approx(1 - 1 / 201)
    assert loss_dice(np.zeros(10), np.zeros(10), 1.0)[0] == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**32))
def test_loss_bounds(n, seed):
    rng = np.random.default_rng(seed)
    p = rng.random(n)
    y = (rng.random(n) < 0.5).astype(float)
    assert loss_bce(p, y)[0] >= 0
    assert 0.0 <= loss_dice(p, y)[0] <= 1.0


def test_stationary_dice_gradient():
    y = (np.random.default_rng(0).random((2, 1, 4, 4)) < 0.5).astype(float)
    z = np.where(y > 0, 40.0, -40.0)
    _, dz, _ = dice_with_logits(z, y, 1e-6)
    assert np.linalg.norm(dz) < 1e-8


def test_single_unit_chain_rule():
    spec = ArchSpec("shallow_cnn", (1,), (1, 1), in_channels=1)
    net = Network(spec, Sequential(Dense(1, 1, np.random.default_rng(0), zero=True)), 0)
    _, grads = loss_and_gradients(net, np.ones((1, 1, 1, 1)), np.ones(1), "bce")
    assert grads["0.w"][0, 0] == pytest.approx(-0.5)


def test_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        loss_bce(np.zeros(3), np.zeros(4))


# --- Adam

def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    opt = Adam(0.1)
    for _ in range(3):
        opt.step(p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step():
    p = {"w": np.array([0.0])}
    Adam(0.1).step(p, {"w": np.array([1.0])})
    # m_hat = 1, v_hat = 1: step = -0.1 / (1 + eps)
    assert p["w"][0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)


def test_adam_two_steps_no_blowup():
    p = {"w": np.array([0.0])}
    opt = Adam(0.1)
    opt.step(p, {"w": np.array([1.0])})
    d1 = p["w"][0]
    opt.step(p, {"w": np.array([1.0])})
    d2 = p["w"][0] - d1
    assert abs(d2) <= abs(d1) * 1.01
    assert opt.t == 2 and opt.m["w"].shape == (1,)


def test_adam_validation():
    with pytest.raises(ValidationError):
        Adam(0.1, beta1=1.0)
    with pytest.raises(ShapeError):
        Adam(0.1).step({"w": np.zeros(2)}, {"w": np.zeros(3)})


# --- architectures

def test_paper_shallow_conv_counts():
    spec = PAPER_PRESETS["shallow_cnn"]
    assert spec.channels == (32, 64, 128) and spec.kernel == 3 and spec.pool == 2
    model = build_model(spec, 0)
    convs = [m for m in model.body.modules() if isinstance(m, Conv)]
    counts = [m.params["w"].size + m.params["b"].size for m in convs]
    assert counts == [3 * 3 * 3 * 32 + 32, 3 * 3 * 32 * 64 + 64, 3 * 3 * 64 * 128 + 128]


def test_desk_shallow_conv_counts():
    model = build_model(DESK_PRESETS["shallow_cnn"], 0)
    convs = [m for m in model.body.modules() if isinstance(m, Conv)]
    counts = [m.params["w"].size + m.params["b"].size for m in convs]
    assert counts == [3 * 3 * 3 * 4 + 4, 3 * 3 * 4 * 8 + 8, 3 * 3 * 8 * 16 + 16]


def test_paper_presets_encode_architecture():
    r = PAPER_PRESETS["resnet3d"]
    assert (r.stem_kernel, r.stem_stride, r.channels, r.blocks_per_stage, r.head_width) == (7, 2, (32, 64, 128, 256), 2, 1000)
    u = PAPER_PRESETS["unet3d"]
    assert (u.channels, u.kernel, u.pool) == ((8, 16, 32, 64, 128), 3, 2)


@pytest.mark.parametrize("scale,kind", [(s, k) for s in ("paper", "desk") for k in ("shallow_cnn", "resnet3d", "unet3d")])
def test_param_count_matches_allocation(scale, kind):
    spec = preset(kind, scale)
    assert param_count(spec) == build_model(spec, 0).n_params()


def test_same_seed_same_weights():
    a = build_model(DESK_PRESETS["resnet3d"], 5).parameters()
    b = build_model(DESK_PRESETS["resnet3d"], 5).parameters()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_resnet_downsampling_capped():
    # 4 slices cannot halve through the pool and two strided stages; exhausted axes keep stride 1
    model = build_model(preset("resnet3d", input_shape=(32, 32, 4)), 0)
    x = np.zeros((2, 1, 32, 32, 4))
    assert model.forward(x).shape == (2, 1)


def test_network_input_check():
    model = build_model(DESK_PRESETS["shallow_cnn"], 0)
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 3, 32, 32)))


def test_unknown_kind():
    with pytest.raises(ValidationError):
        ArchSpec("mlp", (1,), (2, 2))


# --- training

def toy_net(seed=0):
    spec = ArchSpec("shallow_cnn", (1,), (2, 1), in_channels=1)
    rng = np.random.default_rng(seed)
    body = Sequential(Dense(2, 8, rng), Activation("relu"), Dense(8, 1, rng))
    return Network(spec, body, seed)


def blobs(n=40, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.normal(size=(n, 2)) * 0.5 + np.where(y[:, None] == 1, 2.0, -2.0)
    return x.reshape(n, 1, 2, 1), y.astype(float)


def test_train_separable_blobs():
    x, y = blobs()
    # logistic-regression oracle: the class means' bisector separates the set
    w = x[y == 1].mean(axis=0).ravel() - x[y == 0].mean(axis=0).ravel()
    assert np.all(((x.reshape(len(x), 2) @ w) > 0) == (y == 1))
    model = toy_net()
    res = train(model, ArrayDataset(x, y), TrainConfig(learning_rate=0.05, batch_size=8, max_epochs=200, patience=200))
    assert res.history[-1].train_metric == 1.0 or max(h.train_metric for h in res.history) == 1.0
    _, acc, _ = evaluate(model, ArrayDataset(x, y), TrainConfig())
    assert acc == 1.0


def test_zero_learning_rate():
    x, y = blobs()
    model = toy_net()
    before = model.snapshot()
    res = train(model, ArrayDataset(x, y), TrainConfig(learning_rate=0.0, max_epochs=5, patience=10))
    after = model.snapshot()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert len({h.val_loss for h in res.history}) == 1
    assert max(h.train_loss for h in res.history) - min(h.train_loss for h in res.history) < 1e-12


def test_training_deterministic():
    x, y = blobs()
    cfg = TrainConfig(learning_rate=0.01, batch_size=8, max_epochs=10, seed=3)
    h1 = train(toy_net(1), ArrayDataset(x, y), cfg).history
    h2 = train(toy_net(1), ArrayDataset(x, y), cfg).history
    assert h1 == h2


def test_early_stopping_and_best_restore():
    x, y = blobs()
    model = toy_net()
    res = train(model, ArrayDataset(x, y), TrainConfig(learning_rate=0.0, max_epochs=50, patience=3))
    assert res.converged and res.stopped_epoch == 4 and res.best_epoch == 1


def test_divergence_detected():
    from ctbias.errors import DivergenceError

    x, y = blobs()
    x[3, 0, 1, 0] = np.nan
    with pytest.raises(DivergenceError) as info:
        train(toy_net(), ArrayDataset(x, y), TrainConfig(max_epochs=3))
    assert info.value.epoch == 1


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValidationError):
        TrainConfig(loss="mse")
    with pytest.raises(ValidationError):
        TrainConfig(beta2=1.0)


def test_shallow_cnn_batchnorm_training_runs():
    rng = np.random.default_rng(0)
    spec = preset("shallow_cnn", input_shape=(8, 8))
    x = rng.normal(size=(12, 3, 8, 8))
    y = (np.arange(12) % 2).astype(float)
    x[y == 1] += 0.5
    res = train(build_model(spec, 0), ArrayDataset(x, y), TrainConfig(learning_rate=1e-2, batch_size=4, max_epochs=3))
    assert len(res.history) == 3 and all(np.isfinite(h.val_loss) for h in res.history)


# --- inference

def test_zero_head_gives_half():
    model = build_model(DESK_PRESETS["shallow_cnn"], 0)
    for v in model.head().params.values():
        v[...] = 0.0
    p = predict(model, np.random.default_rng(0).normal(size=(3, 3, 64, 64)))
    np.testing.assert_array_equal(p, 0.5)


def test_repeated_case_identical_scores():
    model = build_model(preset("resnet3d", input_shape=(16, 16, 4)), 2)
    one = np.random.default_rng(1).normal(size=(1, 1, 16, 16, 4))
    p = predict(model, np.repeat(one, 3, axis=0))
    assert p.shape == (3,) and np.all((p >= 0) & (p <= 1))
    assert p[0] == p[1] == p[2]


def test_unet_predicts_mask_shape():
    model = build_model(preset("unet3d", input_shape=(16, 16, 8)), 0)
    p = predict(model, np.zeros((2, 1, 16, 16, 8)))
    assert p.shape == (2, 16, 16, 8)


# --- persistence

def test_checkpoint_roundtrip(tmp_path):
    x, y = blobs()
    rng = np.random.default_rng(0)
    spec = preset("shallow_cnn", input_shape=(8, 8))
    xs = rng.normal(size=(8, 3, 8, 8))
    ys = (np.arange(8) % 2).astype(float)
    model = build_model(spec, 4)
    cfg = TrainConfig(learning_rate=1e-2, batch_size=4, max_epochs=2)
    train(model, ArrayDataset(xs, ys), cfg)
    save_checkpoint(model, tmp_path / "ck", cfg)
    back = load_checkpoint(tmp_path / "ck")
    np.testing.assert_array_equal(predict(back, xs), predict(model, xs))
    assert back.optimizer.t == model.optimizer.t
    for k in model.optimizer.m:
        np.testing.assert_array_equal(back.optimizer.m[k], model.optimizer.m[k])


def test_checkpoint_truncated(tmp_path):
    from ctbias.errors import FormatError

    model = build_model(preset("shallow_cnn", input_shape=(8, 8)), 0)
    save_checkpoint(model, tmp_path)
    blob = tmp_path / "weights.f64"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path)


def test_history_csv(tmp_path):
    x, y = blobs()
    res = train(toy_net(), ArrayDataset(x, y), TrainConfig(max_epochs=2))
    text = write_history_csv(res.history, tmp_path / "h.csv").read_text().splitlines()
    assert text[0] == "epoch,train_loss,val_loss,train_metric,val_metric" and len(text) == 3
