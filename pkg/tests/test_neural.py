"""Tests for neural module."""

import numpy as np
import pytest
from pydantic import ValidationError

from dsp import FeatureStream, NormStats
from errors import DimMismatchError, InvalidArgumentError, LengthMismatchError, ModelFormatError
from metrics import ccc_loss
from neural import (
    MODEL_MAGIC,
    AdamState,
    ModelConfig,
    adam_step,
    backward,
    forward,
    hidden_states,
    init_model,
    load_model,
    parameter_shapes,
    save_model,
)


def _stream(rng, length, dim, scale=1.0):
    return FeatureStream(scale * rng.standard_normal((length, dim)), source="test")


def _batch_loss(model, batch, refs):
    return ccc_loss([forward(model, item) for item in batch], refs)


def _check_gradients(model, batch, refs, h=1e-5):
    _, grads = backward(model, batch, refs)
    for name, param in model.params.items():
        flat = param.reshape(-1)
        analytic = grads[name].reshape(-1)
        for index in range(flat.size):
            original = flat[index]
            flat[index] = original + h
            up = _batch_loss(model, batch, refs)
            flat[index] = original - h
            down = _batch_loss(model, batch, refs)
            flat[index] = original
            numeric = (up - down) / (2 * h)
            tolerance = 1e-4 * max(abs(numeric), abs(analytic[index])) + 1e-7
            assert abs(analytic[index] - numeric) <= tolerance, f"{name}[{index}]"


def test_parameter_count_single_layer():
    """Test a [2]-wide model on 3 inputs has 101 parameters."""
    model = init_model(ModelConfig.single(3, widths=[2]))
    assert model.parameter_count == 101
    assert list(model.params) == [
        "trunk.layer0.fwd.W", "trunk.layer0.fwd.b", "trunk.layer0.bwd.W", "trunk.layer0.bwd.b", "output.W", "output.b",
    ]


def test_initialization_ranges_and_forget_bias():
    """Test weights stay inside +/- 1/sqrt(fan-in) and forget biases start at 1."""
    model = init_model(ModelConfig.single(6, widths=[5, 3], seed=3))
    W = model.params["trunk.layer0.fwd.W"]
    assert W.shape == (20, 11)
    assert np.all(np.abs(W) <= 1.0 / np.sqrt(11))
    b = model.params["trunk.layer1.bwd.b"]
    np.testing.assert_array_equal(b[3:6], 1.0)
    assert np.count_nonzero(b) == 3
    assert model.params["output.b"][0] == 0.0


def test_initialization_deterministic():
    """Test the same seed gives identical parameters and another seed does not."""
    a = init_model(ModelConfig.single(4, widths=[3, 2], seed=5))
    b = init_model(ModelConfig.single(4, widths=[3, 2], seed=5))
    c = init_model(ModelConfig.single(4, widths=[3, 2], seed=6))
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])
    assert not np.array_equal(a.params["output.W"], c.params["output.W"])


def test_halved_widths():
    """Test per_direction=False halves the units of each direction."""
    config = ModelConfig(input_dims=[4], widths=[8, 4], per_direction=False)
    assert config.layer_widths == [4, 2]
    assert parameter_shapes(config)["trunk.layer1.fwd.W"] == (8, 10)


def test_config_validation():
    """Test impossible topologies are rejected."""
    with pytest.raises(ValidationError):
        ModelConfig(input_dims=[4, 5], widths=[3, 2], split=2)
    with pytest.raises(ValidationError):
        ModelConfig(input_dims=[4, 5], widths=[3, 2], split=0)
    with pytest.raises(ValidationError):
        ModelConfig(input_dims=[4], widths=[])


def test_branched_shapes():
    """Test per-modality branches feed a trunk on their concatenation."""
    shapes = parameter_shapes(ModelConfig(input_dims=[4, 5], widths=[3, 2], split=1))
    assert shapes["branch0.layer0.fwd.W"] == (12, 7)
    assert shapes["branch1.layer0.bwd.W"] == (12, 8)
    assert shapes["trunk.layer1.fwd.W"] == (8, 14)
    assert shapes["output.W"] == (4,)


def test_forward_length_and_determinism(rng):
    """Test one prediction per segment, repeatable."""
    model = init_model(ModelConfig.single(3, widths=[4, 2]))
    stream = _stream(rng, 7, 3)
    first = forward(model, stream)
    assert first.shape == (7,)
    np.testing.assert_array_equal(first, forward(model, stream))


def test_zero_parameters_give_output_bias(rng):
    """Test all-zero weights predict the output bias everywhere."""
    model = init_model(ModelConfig.single(3, widths=[4]))
    for param in model.params.values():
        param[...] = 0.0
    model.params["output.b"][0] = 0.3
    np.testing.assert_allclose(forward(model, _stream(rng, 9, 3)), 0.3)


def test_direction_swap_reverses_output(rng):
    """Test swapping directions and reversing time reverses the predictions."""
    model = init_model(ModelConfig.single(3, widths=[4], seed=2))
    swapped = model.copy()
    for part in ("W", "b"):
        swapped.params[f"trunk.layer0.fwd.{part}"] = model.params[f"trunk.layer0.bwd.{part}"].copy()
        swapped.params[f"trunk.layer0.bwd.{part}"] = model.params[f"trunk.layer0.fwd.{part}"].copy()
    swapped.params["output.W"] = np.concatenate([model.params["output.W"][4:], model.params["output.W"][:4]])
    stream = _stream(rng, 11, 3)
    reversed_stream = FeatureStream(stream.segments[::-1].copy(), source="test")
    np.testing.assert_allclose(forward(swapped, reversed_stream)[::-1], forward(model, stream), atol=1e-12)


def test_input_validation(rng):
    """Test dimension, length and emptiness checks."""
    model = init_model(ModelConfig.single(4, widths=[2]))
    with pytest.raises(DimMismatchError):
        forward(model, _stream(rng, 5, 5))
    with pytest.raises(InvalidArgumentError):
        forward(model, FeatureStream(np.zeros((0, 4))))
    branched = init_model(ModelConfig(input_dims=[4, 5], widths=[3, 2], split=1))
    with pytest.raises(LengthMismatchError):
        forward(branched, [_stream(rng, 5, 4), _stream(rng, 6, 5)])
    with pytest.raises(DimMismatchError):
        forward(branched, _stream(rng, 5, 4))


def test_normalization_makes_predictions_affine_invariant(rng):
    """Test rescaled inputs with matching statistics predict the same values."""
    stream = _stream(rng, 10, 3)
    stats = NormStats(stream.segments.mean(axis=0), stream.segments.std(axis=0))
    model = init_model(ModelConfig.single(3, widths=[4, 2], seed=1), norm=[stats])
    scaled = FeatureStream(2.5 * stream.segments + 7.0)
    shifted = init_model(
        ModelConfig.single(3, widths=[4, 2], seed=1),
        norm=[NormStats(2.5 * stats.mean + 7.0, 2.5 * stats.std)],
    )
    np.testing.assert_allclose(forward(shifted, scaled), forward(model, stream), atol=1e-10)


def test_norm_dim_checked():
    """Test normalization statistics must match the input dims."""
    with pytest.raises(DimMismatchError):
        init_model(ModelConfig.single(3, widths=[2]), norm=[NormStats(np.zeros(4), np.ones(4))])


def test_gradient_matches_finite_differences(rng):
    """Test the analytic gradient of a two-layer model."""
    model = init_model(ModelConfig.single(4, widths=[3, 2], seed=7))
    batch = [_stream(rng, 5, 4), _stream(rng, 3, 4)]
    refs = [rng.uniform(0, 1, 5), rng.uniform(0, 1, 3)]
    _check_gradients(model, batch, refs)


def test_single_input_backward_covers_every_parameter(rng):
    """Test backward on an unbranched model returns a finite gradient for each parameter."""
    for widths in ([3], [3, 2]):
        model = init_model(ModelConfig.single(4, widths=widths, seed=2))
        batch = [_stream(rng, 7, 4), _stream(rng, 4, 4)]
        loss, grads = backward(model, batch, [rng.uniform(0, 1, 7), rng.uniform(0, 1, 4)])
        assert np.isfinite(loss)
        assert set(grads) == set(model.params)
        for name, grad in grads.items():
            assert grad.shape == model.params[name].shape
            assert np.all(np.isfinite(grad)), name
        assert np.any(grads["trunk.layer0.fwd.W"])


def test_gradient_threads_match_serial(rng):
    """Test the thread pool sums gradients in batch order."""
    model = init_model(ModelConfig.single(4, widths=[3, 2], seed=7))
    batch = [_stream(rng, n, 4) for n in (6, 4, 5, 3)]
    refs = [rng.uniform(0, 1, len(s)) for s in batch]
    loss_1, grads_1 = backward(model, batch, refs, jobs=1)
    loss_4, grads_4 = backward(model, batch, refs, jobs=4)
    assert loss_1 == loss_4
    for name in grads_1:
        np.testing.assert_array_equal(grads_1[name], grads_4[name])


def test_zero_output_half_blocks_gradient(rng):
    """Test a zeroed backward half of the output weights gives zero backward-direction gradients."""
    model = init_model(ModelConfig.single(3, widths=[4], seed=4))
    model.params["output.W"][4:] = 0.0
    batch = [_stream(rng, 6, 3)]
    _, grads = backward(model, batch, [rng.uniform(0, 1, 6)])
    assert not np.any(grads["trunk.layer0.bwd.W"])
    assert not np.any(grads["trunk.layer0.bwd.b"])
    assert np.any(grads["trunk.layer0.fwd.W"])


def test_hidden_states_bounded_on_long_input(rng):
    """Test 10000 steps of large inputs keep hidden states finite within [-1, 1]."""
    model = init_model(ModelConfig.single(3, widths=[4], seed=8))
    states = hidden_states(model, _stream(rng, 10000, 3, scale=50.0))
    assert len(states) == 1
    assert states[0].shape == (10000, 8)
    assert np.all(np.isfinite(states[0]))
    assert np.all(np.abs(states[0]) <= 1.0)


def test_single_precision_close_to_double(rng):
    """Test the f32 path tracks the f64 path."""
    model = init_model(ModelConfig.single(3, widths=[4, 2], seed=9))
    stream = _stream(rng, 20, 3)
    np.testing.assert_allclose(forward(model, stream, precision="f32"), forward(model, stream, precision="f64"), atol=1e-4)


def test_precision_from_environment(monkeypatch, rng):
    """Test DIMEMO_PRECISION selects the default path."""
    from config import reset_config

    model = init_model(ModelConfig.single(3, widths=[2]))
    stream = _stream(rng, 5, 3)
    monkeypatch.setenv("DIMEMO_PRECISION", "f32")
    reset_config()
    np.testing.assert_array_equal(forward(model, stream), forward(model, stream, precision="f32"))


def test_adam_zero_gradient_keeps_parameters():
    """Test a zero gradient leaves parameters unchanged."""
    model = init_model(ModelConfig.single(3, widths=[2]))
    before = {k: v.copy() for k, v in model.params.items()}
    state = AdamState.for_model(model)
    adam_step(model, {k: np.zeros_like(v) for k, v in model.params.items()}, state)
    assert state.step == 1
    for name in before:
        np.testing.assert_array_equal(model.params[name], before[name])


def test_adam_first_step_and_momentum():
    """Test the bias-corrected first step and momentum on the second."""
    model = init_model(ModelConfig.single(3, widths=[2]))
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    grads["output.b"][0] = 0.5
    state = AdamState.for_model(model, lr=0.01)
    adam_step(model, grads, state)
    assert model.params["output.b"][0] == pytest.approx(-0.01 * 0.5 / (0.5 + 1e-8), abs=1e-15)
    after_first = model.params["output.b"][0]
    adam_step(model, {k: np.zeros_like(v) for k, v in model.params.items()}, state)
    assert model.params["output.b"][0] < after_first


def test_adam_rejects_bad_gradients():
    """Test gradient blocks must match and be finite."""
    model = init_model(ModelConfig.single(3, widths=[2]))
    state = AdamState.for_model(model)
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    with pytest.raises(DimMismatchError):
        adam_step(model, {k: v for k, v in grads.items() if k != "output.b"}, state)
    grads["output.W"] = np.zeros(3)
    with pytest.raises(DimMismatchError):
        adam_step(model, grads, state)
    grads["output.W"] = np.full(4, np.nan)
    with pytest.raises(InvalidArgumentError):
        adam_step(model, grads, state)
    assert state.step == 0


def test_save_load_identical(tmp_path, rng):
    """Test a reloaded model predicts bit-identically and re-saves byte-identically."""
    stats = [NormStats(rng.standard_normal(4), rng.uniform(0.5, 2.0, 4)), NormStats(np.zeros(5), np.ones(5))]
    model = init_model(ModelConfig(input_dims=[4, 5], widths=[3, 2], split=1, seed=12), norm=stats)
    save_model(model, tmp_path / "m.dmdl")
    loaded = load_model(tmp_path / "m.dmdl")
    assert loaded.config == model.config
    assert loaded.norm == model.norm
    item = [_stream(rng, 8, 4), _stream(rng, 8, 5)]
    np.testing.assert_array_equal(forward(loaded, item), forward(model, item))
    save_model(loaded, tmp_path / "again.dmdl")
    assert (tmp_path / "again.dmdl").read_bytes() == (tmp_path / "m.dmdl").read_bytes()


def test_load_rejects_damaged_files(tmp_path):
    """Test magic, truncation and trailing bytes are detected."""
    model = init_model(ModelConfig.single(3, widths=[2]))
    save_model(model, tmp_path / "m.dmdl")
    data = (tmp_path / "m.dmdl").read_bytes()
    assert data.startswith(MODEL_MAGIC)

    (tmp_path / "short.dmdl").write_bytes(data[:-5])
    with pytest.raises(ModelFormatError, match="truncated"):
        load_model(tmp_path / "short.dmdl")
    (tmp_path / "magic.dmdl").write_bytes(b"XXXXX" + data[5:])
    with pytest.raises(ModelFormatError, match="not a DMDL1"):
        load_model(tmp_path / "magic.dmdl")
    (tmp_path / "long.dmdl").write_bytes(data + b"\0")
    with pytest.raises(ModelFormatError, match="trailing"):
        load_model(tmp_path / "long.dmdl")
