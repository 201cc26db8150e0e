import numpy as np
import pytest

from chromoseg import network as nw
from chromoseg import tensor_core as tc
from chromoseg.dataset import Dataset
from chromoseg.errors import ConfigError, FormatError, NumericalDivergenceError, StructuralError
from chromoseg.gradcheck import numerical_gradient, relative_error


@pytest.fixture
def toy():
    cfg = nw.NetConfig(depth=1, base_filters=2, input_size=(8, 8))
    rng = np.random.default_rng(0)
    params = nw.init_params(cfg, rng, dtype=np.float64)
    # nonzero biases so that no ReLU sits exactly at its kink
    for k in params.kernels:
        k.bias[:] = rng.normal(0, 0.1, k.bias.shape)
    x = rng.random((2, 1, 8, 8))
    y = rng.integers(0, 4, (2, 8, 8))
    return params, x, y


def test_default_param_count():
    cfg = nw.NetConfig()
    assert len(cfg.layer_shapes()) == 13
    assert cfg.param_count() == nw.DEFAULT_PARAM_COUNT == 129_604


def test_config_validation():
    with pytest.raises(ConfigError):
        nw.NetConfig(depth=4, input_size=(88, 88))  # 88 / 16 is not whole
    with pytest.raises(ConfigError):
        nw.NetConfig(num_classes=3)
    nw.NetConfig(depth=3)


def test_init_deterministic_and_zero_bias():
    cfg = nw.NetConfig()
    a, b = nw.init_params(cfg, 5), nw.init_params(cfg, 5)
    assert a.flatten().tobytes() == b.flatten().tobytes()
    assert all(not k.bias.any() for k in a.kernels)
    assert a.flatten().tobytes() != nw.init_params(cfg, 6).flatten().tobytes()


def test_init_he_scale():
    params = nw.init_params(nw.NetConfig(), 1)
    for k in params.kernels:
        if k.weights.size >= 1000:
            target = np.sqrt(2.0 / k.fan_in)
            assert abs(k.weights.std() / target - 1) < 0.2


def test_forward_shape():
    params = nw.init_params(nw.NetConfig(), 2)
    x = np.random.default_rng(0).random((2, 1, 88, 88)).astype(np.float32)
    assert nw.forward(params, x).shape == (2, 4, 88, 88)


def test_forward_rejects_bad_shapes():
    params = nw.init_params(nw.NetConfig(), 2)
    with pytest.raises(StructuralError):
        nw.forward(params, np.zeros((1, 1, 90, 90), np.float32))
    with pytest.raises(StructuralError):
        nw.forward(params, np.zeros((1, 2, 88, 88), np.float32))


def test_zero_params_uniform_probabilities():
    params = nw.zero_params(nw.NetConfig())
    logits = nw.forward(params, np.random.default_rng(0).random((1, 1, 88, 88)).astype(np.float32))
    assert not logits.any()
    np.testing.assert_allclose(tc.softmax(logits), 0.25)


def test_forward_matches_op_composition(toy):
    params, x, _ = toy
    k = params.kernels
    relu, conv = tc.relu_forward, tc.conv2d_forward
    e = relu(conv(relu(conv(x, k[0])), k[1]))
    b, _ = tc.maxpool2x2_forward(e)
    b = relu(conv(relu(conv(b, k[2])), k[3]))
    u = relu(conv(tc.upsample2x_nearest(b), k[4]))
    d = relu(conv(relu(conv(tc.concat_channels(e, u), k[5])), k[6]))
    expected = conv(d, k[7])
    np.testing.assert_array_equal(nw.forward(params, x), expected)


def test_backward_finite_differences(toy):
    params, x, y = toy
    weights = [0.7, 1.3, 1.1, 2.0]
    loss, grads = nw.backward(params, x, y, weights)
    arrays = params.arrays()
    flat_grads = [g for pair in grads for g in pair]
    rng = np.random.default_rng(1)
    f = lambda: nw.backward(params, x, y, weights)[0]
    checked = 0
    for arr, g in zip(arrays, flat_grads):
        idx = rng.choice(arr.size, size=min(arr.size, 12), replace=False)
        num = numerical_gradient(f, arr, step=1e-6, indices=idx)
        assert relative_error(g.ravel()[idx], num) < 1e-4
        checked += len(idx)
    assert checked >= 100


def test_backward_loss_matches_forward(toy):
    params, x, y = toy
    loss, _ = nw.backward(params, x, y)
    ref, _ = tc.softmax_cross_entropy(nw.forward(params, x), y)
    assert loss == ref


def test_zero_class_weight_kills_gradient(toy):
    params, x, _ = toy
    y = np.full((2, 8, 8), 2)
    loss, grads = nw.backward(params, x, y, [1.0, 1.0, 0.0, 1.0])
    assert loss == 0
    assert all(not gw.any() and not gb.any() for gw, gb in grads)


def test_inverse_frequency_weights():
    labels = np.array([0] * 70 + [1] * 20 + [2] * 8 + [3] * 2)
    w = nw.inverse_frequency_weights(labels)
    assert w.mean() == pytest.approx(1.0)
    assert w[3] / w[0] == pytest.approx(35.0)
    assert np.all(np.isfinite(nw.inverse_frequency_weights(np.zeros(5, int))))


def _one_sample():
    from chromoseg import datagen as dg, preprocess as pp
    ds = pp.clean_dataset(dg.generate_dataset(dg.GenConfig(n_samples=2, seed=4)))
    return ds.subset([0]), ds.subset([1])


def test_train_zero_epochs():
    params = nw.init_params(nw.NetConfig(), 0)
    tr, va = _one_sample()
    out, hist = nw.train(params, tr, va, nw.TrainConfig(epochs=0))
    assert hist == []
    assert out.flatten().tobytes() == params.flatten().tobytes()


def test_train_config_validation():
    with pytest.raises(ConfigError):
        nw.TrainConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        nw.TrainConfig(optimizer="rmsprop")
    with pytest.raises(ConfigError):
        nw.TrainConfig(class_weights=[1, 1, 0, 1])


def test_single_sample_overfit():
    tr, _ = _one_sample()
    params = nw.init_params(nw.NetConfig(), 0)
    tcfg = nw.TrainConfig(epochs=200, batch_size=1, seed=0)
    _, hist = nw.train(params, tr, Dataset.empty(88, 88), tcfg)
    losses = np.array([h["train_loss"] for h in hist])
    assert losses[-1] < 0.05
    window_means = losses.reshape(-1, 10).mean(axis=1)
    assert np.all(np.diff(window_means) <= 0)


def test_train_deterministic():
    tr, va = _one_sample()
    tcfg = nw.TrainConfig(epochs=2, batch_size=1, seed=3)
    a, ha = nw.train(nw.init_params(nw.NetConfig(), 0), tr, va, tcfg)
    b, hb = nw.train(nw.init_params(nw.NetConfig(), 0), tr, va, tcfg)
    assert nw.encode_checkpoint(a) == nw.encode_checkpoint(b)
    assert ha == hb
    assert len(ha) == 2 and set(ha[0]) == {"epoch", "train_loss", "val_loss", "val_iou"}


def test_train_sgd_runs():
    tr, va = _one_sample()
    _, hist = nw.train(nw.init_params(nw.NetConfig(), 0), tr, va,
                       nw.TrainConfig(epochs=1, optimizer="sgd", learning_rate=0.01))
    assert np.isfinite(hist[0]["train_loss"])


def test_train_divergence_names_batch():
    tr, va = _one_sample()
    tr.images[0, 5, 5] = np.nan
    with pytest.raises(NumericalDivergenceError) as info:
        nw.train(nw.init_params(nw.NetConfig(), 0), tr, va, nw.TrainConfig(epochs=1))
    assert info.value.epoch == 0 and info.value.batch == 0


def test_adam_matches_reference_update():
    cfg = nw.NetConfig(depth=1, base_filters=1, input_size=(2, 2))
    params = nw.init_params(cfg, 0, dtype=np.float64)
    opt = nw.Adam(params, lr=0.1)
    a = params.arrays()[0]
    before = a.copy()
    g = np.ones_like(a)
    grads = [np.zeros_like(x) for x in params.arrays()]
    grads[0] = g
    opt.step(params.arrays(), grads)
    # first Adam step moves every coordinate by lr * g / (|g| + eps')
    np.testing.assert_allclose(before - a, 0.1, rtol=1e-6)


def test_checkpoint_roundtrip(tmp_path):
    params = nw.init_params(nw.NetConfig(), 7)
    path = tmp_path / "m.ckpt"
    nw.save_checkpoint(params, path)
    assert path.stat().st_size == nw.CKPT_HEADER.size + 4 * nw.DEFAULT_PARAM_COUNT
    assert nw.CKPT_HEADER.size == 25
    back, state = nw.load_checkpoint(path)
    assert state is None
    assert back.config == params.config
    assert back.flatten().tobytes() == params.flatten().tobytes()


def test_checkpoint_with_optimizer_state(tmp_path):
    params = nw.init_params(nw.NetConfig(depth=1, base_filters=4), 7)
    n = params.config.param_count()
    state = (np.arange(n, dtype=np.float32), np.ones(n, np.float32))
    buf = nw.encode_checkpoint(params, state)
    assert len(buf) == 25 + 12 * n
    back, st = nw.decode_checkpoint(buf)
    np.testing.assert_array_equal(st[0], state[0])
    np.testing.assert_array_equal(st[1], state[1])


def test_checkpoint_errors():
    buf = nw.encode_checkpoint(nw.init_params(nw.NetConfig(), 7))
    with pytest.raises(FormatError):
        nw.decode_checkpoint(b"CHRCKPT2" + buf[8:])
    with pytest.raises(FormatError):
        nw.decode_checkpoint(buf[:-4])
    with pytest.raises(FormatError):
        nw.decode_checkpoint(buf[:10])


def test_history_csv():
    text = nw.history_csv([{"epoch": 0, "train_loss": 1.0, "val_loss": 2.0,
                            "val_iou": [0.5, None, 0.25, 1.0]}])
    assert text.splitlines() == ["epoch,train_loss,val_loss,iou_0,iou_1,iou_2,iou_3",
                                 "0,1.000000,2.000000,0.500000,,0.250000,1.000000"]


def test_predict_batches_consistent():
    params = nw.init_params(nw.NetConfig(), 3)
    imgs = np.random.default_rng(0).random((5, 88, 88)).astype(np.float32)
    a = nw.predict(params, imgs, batch_size=2)
    b = nw.predict(params, imgs, batch_size=5)
    assert a.shape == (5, 88, 88) and a.dtype == np.uint8
    np.testing.assert_array_equal(a, b)
