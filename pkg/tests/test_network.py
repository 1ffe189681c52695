import numpy as np
import pytest

from nowcast.cells import CellState, ModelConfig, convlstm_step, init_params, layer_params
from nowcast.network import EncoderForecaster, copy_states
from nowcast.tensor import Tape, Tensor, conv2d, concat, parameter, sigmoid
from oracles import central_differences, grad_close, naive_bce


def tiny(cell="conv", hidden=(4,), h=4, w=4, kx=3, kh=3, patch=1):
    return ModelConfig(cell=cell, frame_height=h, frame_width=w, patch_size=patch, hidden=hidden,
                       input_kernel=kx, state_kernel=kh)


def randomize(model, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    return model.with_values([rng.normal(scale=scale, size=p.shape) for p in model.parameters])


def test_zero_model_predicts_half():
    model = EncoderForecaster(tiny(hidden=(3, 2)))
    model = model.with_values([np.zeros(p.shape) for p in model.parameters])
    out = model.predict_sequence(np.random.default_rng(0).uniform(size=(2, 3, 1, 4, 4)), 4)
    assert out.shape == (2, 4, 1, 4, 4)
    assert np.all(out == 0.5)


def test_single_step_matches_manual_composition():
    cfg = tiny(h=1, w=1, kx=1, kh=1)
    model = randomize(EncoderForecaster(cfg), 1)
    x = np.random.default_rng(2).uniform(size=(1, 3, 1, 1, 1))
    enc = layer_params(cfg, model.params, "enc", 0)
    dec = layer_params(cfg, model.params, "dec", 0)
    s = CellState(Tensor(np.zeros((4, 1, 1))), Tensor(np.zeros((4, 1, 1))))
    for t in range(3):
        s = convlstm_step(enc, Tensor(x[0, t]), s)
    s = convlstm_step(dec, None, CellState(Tensor(s.hidden.data.copy()), Tensor(s.cell.data.copy())))
    manual = sigmoid(conv2d(s.hidden, model.params["readout.w"], model.params["readout.b"])).data
    got = model.predict_sequence(x, 1)
    assert np.max(np.abs(got[0, 0] - manual)) <= 1e-12


@pytest.mark.slow
def test_full_scale_shapes():
    cfg = ModelConfig(hidden=(128, 64, 64), input_kernel=5, state_kernel=5)
    model = EncoderForecaster(cfg, seed=0)
    frames = np.random.default_rng(0).uniform(size=(1, 10, 1, 64, 64))
    preds = model.forward(frames, 10)
    assert len(preds) == 10 and all(p.shape == (1, 16, 16, 16) for p in preds)
    out = model.predict_sequence(frames[0], 10)
    assert out.shape == (10, 1, 64, 64)


def test_forward_and_predict_agree_bitwise_and_repeat():
    model = randomize(EncoderForecaster(tiny(hidden=(3, 2), h=8, w=8, patch=2)), 3)
    x = np.random.default_rng(4).uniform(size=(2, 3, 1, 8, 8))
    with Tape():
        taped = np.stack([p.data for p in model.forward(x, 2)], axis=1)
    a, b = model.predict_sequence(x, 2), model.predict_sequence(x, 2)
    np.testing.assert_array_equal(model.from_model_space(taped), a)
    np.testing.assert_array_equal(a, b)
    assert np.all((a > 0) & (a < 1))


def test_copy_states_is_independent():
    rng = np.random.default_rng(5)
    src = [CellState(Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 3)))) for _ in range(2)]
    dst = copy_states(src, 2)
    for s, d in zip(src, dst):
        np.testing.assert_array_equal(s.hidden.data, d.hidden.data)
        np.testing.assert_array_equal(s.cell.data, d.cell.data)
        assert d.hidden is not s.hidden and not np.shares_memory(d.cell.data, s.cell.data)
    with pytest.raises(ValueError):
        copy_states(src, 3)


def test_copy_states_does_not_alias_encoder():
    model = randomize(EncoderForecaster(tiny()), 6)
    x = np.random.default_rng(6).uniform(size=(1, 2, 1, 4, 4))
    enc = model.encode(x)
    before = [s.cell.data.copy() for s in enc]
    model.forecast(enc, 3)
    for b, s in zip(before, enc):
        np.testing.assert_array_equal(b, s.cell.data)


def test_loss_matches_naive_bce():
    model = randomize(EncoderForecaster(tiny(hidden=(2,))), 7)
    rng = np.random.default_rng(7)
    x, y = rng.uniform(size=(2, 2, 1, 4, 4)), rng.uniform(size=(2, 3, 1, 4, 4))
    preds = model.predict_sequence(x, 3)
    assert model.loss(x, y).item() == pytest.approx(naive_bce(preds, y) / 2, rel=1e-12)


def test_input_validation():
    model = EncoderForecaster(tiny())
    with pytest.raises(ValueError):
        model.predict_sequence(np.zeros((1, 2, 1, 5, 5)), 1)
    with pytest.raises(ValueError):
        model.predict_sequence(np.zeros((1, 2, 1, 4, 4)), 0)
    with pytest.raises(ValueError):
        model.predict_sequence(np.zeros((1, 0, 1, 4, 4)), 1)


def test_causality():
    model = randomize(EncoderForecaster(tiny(hidden=(3,), h=6, w=6)), 8)
    rng = np.random.default_rng(8)
    x = rng.uniform(size=(1, 3, 1, 6, 6))
    base = model.predict_sequence(x, 3)
    for j in range(3):
        xp = x.copy()
        xp[0, j, 0, 3, 3] += 0.5
        assert np.abs(model.predict_sequence(xp, 3) - base).max() > 0
    enc = model.encode(x)
    zeroed = [CellState(Tensor(np.zeros(s.hidden.shape)), Tensor(np.zeros(s.cell.shape))) for s in enc]
    a = np.stack([p.data for p in model.forecast(enc, 3)])
    b = np.stack([p.data for p in model.forecast(zeroed, 3)])
    assert all(np.abs(a[k] - b[k]).max() > 0 for k in range(3))


@pytest.mark.parametrize("kh", [1, 3])
def test_receptive_field_growth(kh):
    n = 11
    model = randomize(EncoderForecaster(tiny(hidden=(3,), h=n, w=n, kx=1, kh=kh)), 9)
    x = np.random.default_rng(9).uniform(size=(1, 2, 1, n, n))
    base = model.predict_sequence(x, 4)
    xp = x.copy()
    xp[0, -1, 0, 5, 5] += 0.3
    diff = np.abs(model.predict_sequence(xp, 4) - base)[0, :, 0]
    for k in range(4):
        rows, cols = np.nonzero(diff[k] > 0)
        radius = max(np.abs(rows - 5).max(), np.abs(cols - 5).max())
        # The perturbation enters the last encoder step; each forecast step widens it by (kh-1)/2.
        assert radius == (k + 1) * (kh - 1) // 2


@pytest.mark.parametrize("cell", ["conv", "fc"])
def test_end_to_end_gradients(cell):
    cfg = tiny(cell=cell, hidden=(4,), h=4, w=4)
    model = randomize(EncoderForecaster(cfg), 10, scale=0.3)
    rng = np.random.default_rng(10)
    x, y = rng.uniform(size=(1, 2, 1, 4, 4)), rng.uniform(size=(1, 2, 1, 4, 4))
    with Tape() as tape:
        loss = model.loss(x, y)
    analytic = tape.gradient(loss, model.parameters)
    numeric = central_differences(lambda arrs: model.with_values(arrs).loss(x, y).item(),
                                  [p.data.copy() for p in model.parameters])
    for name, a, n in zip(model.params, analytic, numeric):
        assert grad_close(a, n), name


def test_forecaster_first_layer_has_no_input_weights():
    params = init_params(tiny(hidden=(2, 2)), 0)
    assert "enc0.w_xi" in params and "dec0.w_xi" not in params and "dec1.w_xi" in params


def test_checkpoint_roundtrip(tmp_path):
    model = randomize(EncoderForecaster(tiny(hidden=(2, 3))), 11)
    path = tmp_path / "m.ckpt"
    model.save(path, {"iteration": 5})
    loaded, header, _ = EncoderForecaster.load(path)
    assert header["iteration"] == 5 and loaded.config == model.config
    for a, b in zip(model.parameters, loaded.parameters):
        np.testing.assert_allclose(a.data, b.data, rtol=1e-6)
