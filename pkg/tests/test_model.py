import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cnnsvs.model import (
    AcousticModel,
    BaselineConfig,
    BaselineFFNN,
    ModelConfig,
    cnn_specs,
    load_config_file,
    model_macs,
    preset_config,
    receptive_field,
)

from oracles import fd_grad


def _tiny(split=False, dropout=0.0, **kw):
    return ModelConfig(n_context=5, n_frame=2, out_dim=4, ffnn_units=(6, 5), dropout=dropout, cnn_channels=4,
                       res_blocks=1, cnn1_outputs=(0, 2) if split else (), cnn1_channels=3, cnn1_res_blocks=1, **kw)


def _randomize(model, seed):
    rng = np.random.default_rng(seed)
    for name in model.store.names():
        p = model.params[name]
        model.params[name] = rng.uniform(-0.6, 0.6, p.shape) + (0.05 if ".b" in name else 0.0)


def _state_inputs(seed, n_states=5, dmax=4):
    rng = np.random.default_rng(seed)
    d = rng.integers(1, dmax + 1, n_states)
    T = int(d.sum())
    pad = (-T) % 4
    d[-1] += pad
    T += pad
    return rng.uniform(0, 1, (n_states, 5)), d, rng.uniform(0, 1, (T, 2))


def test_cnn_layout():
    specs = cnn_specs(10, 8, 2, 3)
    kinds = [s.kind for s in specs]
    assert kinds == ["down2", "relu", "down2", "relu", "residual", "residual", "up2", "relu", "up2", "sigmoid"]
    assert specs[-2].cout == 3


def test_output_range_and_shape():
    m = AcousticModel(_tiny(split=True), seed=1)
    ctx, d, f = _state_inputs(0)
    y = m.forward_state_mode(ctx, d, f)
    assert y.shape == (f.shape[0], 4)
    assert np.all((y > 0) & (y < 1))


def test_segment_length_must_be_multiple():
    m = AcousticModel(_tiny(), seed=0)
    with pytest.raises(ValueError):
        m.forward(np.zeros((6, 5)), np.zeros((6, 2)))
    with pytest.raises(ValueError):
        m.forward(np.zeros((8, 4)), np.zeros((8, 2)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), split=st.booleans())
def test_state_mode_equals_frame_mode(seed, split):
    m = AcousticModel(_tiny(split=split), seed=seed % 1000)
    ctx, d, f = _state_inputs(seed)
    frame_ctx = np.repeat(ctx, d, axis=0)
    m.ffnn_calls = 0
    a = m.forward_frame_mode(np.hstack([frame_ctx, f]))
    assert m.ffnn_calls == f.shape[0]
    m.ffnn_calls = 0
    b = m.forward_state_mode(ctx, d, f)
    assert m.ffnn_calls == len(d)
    assert np.max(np.abs(a - b)) <= 1e-10


@pytest.mark.parametrize("split,state", [(False, False), (True, False), (True, True)])
def test_model_gradients(split, state):
    m = AcousticModel(_tiny(split=split), seed=3)
    _randomize(m, 4)
    ctx, d, f = _state_inputs(5)
    if not state:
        ctx, d = np.repeat(ctx, d, axis=0), None
    w = np.random.default_rng(6).standard_normal((f.shape[0], 4))

    def loss():
        return float(np.sum(m.forward(ctx, f, d)[0] * w))

    y, tape = m.forward(ctx, f, d)
    grads = m.backward(tape, w)
    for name in m.store.names():
        fd = fd_grad(loss, m.params[name], eps=1e-6)
        err = np.max(np.abs(grads[name] - fd)) / max(1e-3, np.abs(fd).max())
        assert err < 1e-5, name


def test_dropout_only_in_training():
    m = AcousticModel(_tiny(dropout=0.5), seed=0)
    ctx, d, f = _state_inputs(1)
    a = m.forward(ctx, f, d)[0]
    assert np.array_equal(a, m.forward(ctx, f, d)[0])
    b = m.forward(ctx, f, d, train=True, rng=np.random.default_rng(0))[0]
    assert not np.allclose(a, b)


def test_split_outputs_are_independent():
    m = AcousticModel(_tiny(split=True), seed=2)
    ctx, d, f = _state_inputs(3)
    base = m.forward(ctx, f, d)[0]
    for name in m.store.names():
        if name.startswith("cnn2."):
            m.params[name] = m.params[name] + 0.3
    moved = m.forward(ctx, f, d)[0]
    assert np.array_equal(base[:, [0, 2]], moved[:, [0, 2]])
    assert not np.allclose(base[:, [1, 3]], moved[:, [1, 3]])


def test_macs_state_mode_saves_ffnn_work():
    cfg = preset_config("small", 60, 6, 30)
    frame = model_macs(cfg, 1000, 80, "frame")
    state = model_macs(cfg, 1000, 80, "state")
    assert frame["cnn"] == state["cnn"]
    assert frame["ffnn"] == 1000 * (60 * 64 + 64 * 64 * 2)
    assert state["ffnn"] * 1000 == frame["ffnn"] * 80


def test_presets():
    s = preset_config("small", 10, 6, 30, cnn1_outputs=(0, 1))
    assert not s.split and s.cnn_channels == 16 and s.res_blocks == 5
    l = preset_config("large", 10, 6, 30, cnn1_outputs=(0, 1))
    assert l.split and l.cnn_channels == 64 and l.cnn1_channels == 16
    assert receptive_field(l) >= receptive_field(s)


def test_config_errors():
    with pytest.raises(ValueError):
        _tiny(mode="segment")
    with pytest.raises(ValueError):
        ModelConfig(3, 1, 2, cnn1_outputs=(0, 1))
    with pytest.raises(ValueError):
        ModelConfig(3, 1, 2, cnn1_outputs=(5,))
    with pytest.raises(ValueError):
        ModelConfig(3, 1, 2, filter_size=4)


def test_config_round_trip_and_file(tmp_path):
    c = _tiny(split=True)
    assert ModelConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"preset": "small", "res_blocks": 2}))
    c2 = load_config_file(p, n_context=5, n_frame=2, out_dim=4, cnn1_outputs=(0,))
    assert c2.res_blocks == 2 and c2.cnn_channels == 16 and not c2.split


def test_baseline_shapes_and_gradient():
    b = BaselineFFNN(BaselineConfig(4, 2, units=(5,), dropout=0.0), seed=0)
    for name in b.store.names():
        b.params[name] = np.random.default_rng(1).uniform(-0.5, 0.5, b.params[name].shape) + 0.05
    x = np.random.default_rng(2).uniform(0, 1, (7, 4))
    y, tape = b.forward(x)
    assert y.shape == (7, 6)
    w = np.random.default_rng(3).standard_normal(y.shape)
    g = b.backward(tape, w)
    for name in b.store.names():
        fd = fd_grad(lambda: float(np.sum(b.forward(x)[0] * w)), b.params[name], eps=1e-6)
        assert np.allclose(g[name], fd, atol=1e-7)
    assert b.macs(10) == 10 * (4 * 5 + 5 * 6)
