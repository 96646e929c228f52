import json
import re
import sys
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from data_pipeline import SyntheticTaskConfig, Vocabulary, encode_dataset, fit_standardizer, generate_synthetic
from encoder import EncoderConfig
from errors import NonFiniteGradientError
import training
from models import FusionClassifier, ModelConfig, loss_and_output
from tensor_autodiff import ParameterSet
from training import (
    OptimizerState,
    TrainConfig,
    adamw_step,
    check_finite_gradients,
    clip_by_global_norm,
    evaluate,
    global_norm,
    train,
    train_step,
)

ENCODER = EncoderConfig(n_layers=1, d_model=8, n_heads=2, d_ff=16, max_len=8, vocab_size=24)


def _encoded(n=24, seed=0):
    dataset = generate_synthetic(SyntheticTaskConfig(n_examples=n, seq_len=5, d_struct=2, seed=seed))
    vocab = Vocabulary.build(dataset.texts, max_size=ENCODER.vocab_size)
    return encode_dataset(dataset, vocab, ENCODER.max_len, fit_standardizer(dataset.aux))


def _model(seed=0):
    return FusionClassifier.initialize(ModelConfig(encoder=ENCODER), d_struct=2, seed=seed)


def test_adamw_first_step_matches_closed_form():
    params = ParameterSet()
    params.add("w", np.array([0.5, -1.0, 2.0]))
    grad = np.array([0.1, -0.2, 0.0])
    config = TrainConfig(learning_rate=0.01, weight_decay=0.1)

    adamw_step(params, {"w": grad}, OptimizerState(), config)

    expected = np.array([0.5, -1.0, 2.0]) * (1 - 0.01 * 0.1) - 0.01 * grad / (np.abs(grad) + 1e-8)
    np.testing.assert_allclose(params["w"].data, expected, rtol=1e-12, atol=1e-15)


def test_adamw_skips_decay_for_excluded_parameters():
    params = ParameterSet()
    params.add("w", np.ones(2))
    params.add("b", np.ones(2), decay=False)
    zeros = {"w": np.zeros(2), "b": np.zeros(2)}

    adamw_step(params, zeros, OptimizerState(), TrainConfig(learning_rate=0.1, weight_decay=0.5))

    np.testing.assert_allclose(params["w"].data, 0.95)
    np.testing.assert_array_equal(params["b"].data, 1.0)


def test_adamw_rejects_non_finite_gradient_before_updating():
    params = ParameterSet()
    params.add("a", np.ones(2))
    params.add("b", np.ones(2))
    state = OptimizerState()

    with pytest.raises(NonFiniteGradientError, match="'b'"):
        adamw_step(params, {"a": np.ones(2), "b": np.array([np.nan, 0.0])}, state, TrainConfig())

    np.testing.assert_array_equal(params["a"].data, 1.0)
    assert state.step == 0 and state.m == {}


def test_clip_by_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert global_norm(grads) == 5.0

    clipped = clip_by_global_norm(grads, 1.0)
    assert global_norm(clipped) == pytest.approx(1.0)
    assert clip_by_global_norm(grads, 10.0) is grads
    assert clip_by_global_norm(grads, None) is grads


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValidationError):
        TrainConfig(epochs=-1)


def test_zero_epochs_leaves_model_unchanged(tmp_path):
    model = _model()
    before = model.params.state_arrays()
    history = train(model, _encoded(), TrainConfig(epochs=0), log_path=tmp_path / "log.jsonl")

    assert history.epochs == []
    assert history.optimizer_steps == 0
    for name, value in model.params.state_arrays().items():
        np.testing.assert_array_equal(value, before[name])
    assert not (tmp_path / "log.jsonl").exists()


def test_training_writes_epoch_log_and_is_reproducible(tmp_path):
    data, held_out = _encoded(seed=1), _encoded(n=12, seed=2)
    config = TrainConfig(epochs=2, batch_size=8, learning_rate=0.01, seed=3)

    first, second = _model(), _model()
    history = train(first, data, config, eval_data=held_out, log_path=tmp_path / "log.jsonl")
    train(second, data, config, eval_data=held_out)

    lines = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [line["epoch"] for line in lines] == [1, 2]
    assert set(lines[0]) == {"epoch", "train_loss", "eval_accuracy", "eval_ece"}
    assert 0.0 <= lines[1]["eval_accuracy"] <= 1.0
    assert history.optimizer_steps == 2 * 3
    for name, value in first.params.state_arrays().items():
        np.testing.assert_array_equal(value, second.params.state_arrays()[name])


def test_training_reduces_loss_on_fixed_batch():
    data = _encoded(n=16, seed=4)
    model = _model(seed=1)
    history = train(model, data, TrainConfig(epochs=30, batch_size=16, learning_rate=0.01))

    assert history.epochs[-1].train_loss < history.epochs[0].train_loss


def test_evaluate_returns_one_record_per_example():
    data = _encoded(n=10)
    records = evaluate(_model(), data, batch_size=4)

    assert len(records) == 10
    assert [r.y for r in records] == data.labels.tolist()
    assert all(0.0 <= r.p <= 1.0 for r in records)


def test_adamw_single_scalar_step():
    params = ParameterSet()
    params.add("w", np.array([1.0]))
    adamw_step(params, {"w": np.array([1.0])}, OptimizerState(), TrainConfig(learning_rate=0.1, weight_decay=0.0))
    assert params["w"].data[0] == pytest.approx(0.9, abs=1e-6)


def test_adamw_zero_gradient_applies_only_decay():
    params = ParameterSet()
    params.add("w", np.array([2.0, -4.0]))
    adamw_step(params, {"w": np.zeros(2)}, OptimizerState(), TrainConfig(learning_rate=0.1, weight_decay=0.0))
    np.testing.assert_array_equal(params["w"].data, [2.0, -4.0])

    adamw_step(params, {"w": np.zeros(2)}, OptimizerState(), TrainConfig(learning_rate=0.1, weight_decay=0.01))
    np.testing.assert_allclose(params["w"].data, np.array([2.0, -4.0]) * (1 - 0.001), rtol=1e-12)


def test_adamw_three_steps_match_reference_recursion():
    lr, wd, beta1, beta2, eps = 0.05, 0.1, 0.9, 0.999, 1e-8
    grads = [np.array([0.3, -1.2]), np.array([-0.5, 0.4]), np.array([0.1, 2.0])]
    params = ParameterSet()
    params.add("w", np.array([1.5, -0.7]))
    state = OptimizerState()
    config = TrainConfig(learning_rate=lr, weight_decay=wd)

    w, m, v = np.array([1.5, -0.7]), np.zeros(2), np.zeros(2)
    for t, g in enumerate(grads, start=1):
        adamw_step(params, {"w": g}, state, config)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g ** 2
        w = w * (1 - lr * wd) - lr * (m / (1 - beta1 ** t)) / (np.sqrt(v / (1 - beta2 ** t)) + eps)
        np.testing.assert_allclose(params["w"].data, w, atol=1e-10)
    assert state.step == 3


def test_gradient_clipping_is_off_by_default():
    assert TrainConfig().grad_clip is None


def test_non_finite_gradient_is_reported_by_name_even_with_clipping():
    grads = {"a": np.ones(2), "b": np.array([np.nan, 0.0])}
    assert clip_by_global_norm(grads, 1.0) is grads
    with pytest.raises(NonFiniteGradientError, match="'b'"):
        check_finite_gradients(grads)


def test_train_step_names_faulty_parameter_before_clipping(monkeypatch):
    model = _model()
    batch = next(_encoded(n=8).iter_batches(8))
    before = model.params.state_arrays()
    names = model.params.names()
    faulty = names[-1]

    def nan_backward(tape, loss, params):
        grads = {name: np.ones(model.params[name].shape) for name in names}
        grads[faulty] = np.full(model.params[faulty].shape, np.nan)
        return grads

    monkeypatch.setattr(training.ad, "backward", nan_backward)
    with pytest.raises(NonFiniteGradientError, match=re.escape(f"'{faulty}'")):
        train_step(model, batch, OptimizerState(), TrainConfig(grad_clip=1.0))
    for name, value in model.params.state_arrays().items():
        np.testing.assert_array_equal(value, before[name])


def test_one_small_step_does_not_increase_batch_loss():
    violations = 0
    for seed in range(20):
        model = _model(seed=seed)
        batch = next(_encoded(n=16, seed=seed).iter_batches(16))
        before, _ = loss_and_output(model, batch)
        train_step(model, batch, OptimizerState(), TrainConfig(learning_rate=1e-4))
        after, _ = loss_and_output(model, batch)
        violations += after.item() > before.item()
    assert violations <= 1
