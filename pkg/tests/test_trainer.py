import math

import numpy as np
import pytest
import torch

from core import series_io
from core.data_model import ForecastConfig, LoraConfig, SynthConfig, TrainConfig
from core.errors import DataUnderflowError, InvalidInputError
from core.evaluation import forecast_metrics, raw_metrics
from core.model import LoraLinear
from core.trainer import (OptimizerState, adamw_step, backward, finetune, forecast_predict, instance_normalize,
                          last_value_forecast, predict_windows, pretrain, train_forecaster)
from core.verification import random_model


def _state(model):
    return {name: tensor.clone() for name, tensor in model.state_dict().items()}


def test_backward():
    x = torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64, requires_grad=True)
    unused = torch.zeros(2, dtype=torch.float64, requires_grad=True)
    grads = backward(0.5 * (x ** 2).sum(), [x, unused])
    torch.testing.assert_close(grads[0], x.detach())
    assert not grads[1].any()
    assert backward(x.sum(), []) == []


def test_adamw_first_step():
    theta = torch.tensor([1.0, -2.0], dtype=torch.float64, requires_grad=True)
    grad = torch.tensor([0.5, 0.1], dtype=torch.float64)
    state = OptimizerState([theta], lr=0.1, weight_decay=0.1)
    adamw_step([theta], [grad], state)
    # Primer paso: m̂ = g y v̂ = g², el paso es lr·g/(|g| + eps)
    expected = torch.tensor([1.0, -2.0], dtype=torch.float64) * (1 - 0.01) - 0.1 * grad / (grad.abs() + 1e-8)
    torch.testing.assert_close(theta.detach(), expected, rtol=0, atol=1e-12)
    assert state.step == 1


def test_adamw_from_known_moments():
    """
    Un único parámetro escalar con m y v conocidos tras 3 pasos: el cuarto paso se calcula a mano.
    """
    theta = torch.tensor([0.7], dtype=torch.float64, requires_grad=True)
    lr, wd, (b1, b2), eps = 0.01, 0.1, (0.9, 0.999), 1e-8
    state = OptimizerState([theta], lr=lr, betas=(b1, b2), eps=eps, weight_decay=wd)
    state.set_moments(theta, 3, torch.tensor([0.2], dtype=torch.float64), torch.tensor([0.05], dtype=torch.float64))
    g = 0.3
    adamw_step([theta], [torch.tensor([g], dtype=torch.float64)], state)

    m = b1 * 0.2 + (1 - b1) * g
    v = b2 * 0.05 + (1 - b2) * g * g
    m_hat = m / (1 - b1 ** 4)
    v_hat = v / (1 - b2 ** 4)
    expected = 0.7 * (1 - lr * wd) - lr * m_hat / (math.sqrt(v_hat) + eps)
    assert abs(theta.item() - expected) < 1e-12
    assert state.step == 4
    assert state.m[0].item() == pytest.approx(m, abs=1e-15)
    assert state.v[0].item() == pytest.approx(v, abs=1e-15)


def test_adamw_zero_gradient_only_decays():
    theta = torch.tensor([2.0, -4.0], dtype=torch.float64, requires_grad=True)
    state = OptimizerState([theta], lr=0.5, weight_decay=0.1)
    adamw_step([theta], [torch.zeros(2, dtype=torch.float64)], state)
    torch.testing.assert_close(theta.detach(), torch.tensor([2.0, -4.0], dtype=torch.float64) * 0.95,
                               rtol=0, atol=1e-15)


def test_adamw_rejects_misaligned_gradients():
    theta = torch.zeros(2, dtype=torch.float64, requires_grad=True)
    state = OptimizerState([theta])
    with pytest.raises(InvalidInputError):
        adamw_step([theta], [], state)
    with pytest.raises(InvalidInputError):
        adamw_step([theta], [torch.zeros(3, dtype=torch.float64)], state)


def test_pretrain_with_zero_lr_keeps_parameters(rng):
    model = random_model(0)
    before = _state(model)
    windows = rng.standard_normal((4, 2, 5, 64))
    result = pretrain(model, windows, TrainConfig(steps=1, batch_size=2, lr=0.0), progress=False)
    assert len(result.trace) == 1
    assert np.isfinite(result.trace["loss"].iloc[0])
    for name, tensor in model.state_dict().items():
        assert torch.equal(tensor, before[name]), name


def test_pretrain_is_deterministic(rng):
    windows = rng.standard_normal((6, 2, 5, 64))
    cfg = TrainConfig(steps=3, batch_size=3, seed=5, lr=1e-3)
    a = pretrain(random_model(1, dropout=0.1), windows, cfg, progress=False)
    b = pretrain(random_model(1, dropout=0.1), windows, cfg, progress=False)
    assert a.trace.equals(b.trace)
    for (name, x), (_, y) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert torch.equal(x, y), name
    assert list(a.trace.columns) == ["step", "loss", "accuracy"]


def test_pretrain_requires_two_windows(rng):
    model = random_model(0)
    with pytest.raises(DataUnderflowError):
        pretrain(model, rng.standard_normal((1, 2, 5, 64)), TrainConfig(steps=1), progress=False)
    with pytest.raises(DataUnderflowError):
        pretrain(model, rng.standard_normal((4, 2, 5, 64)), TrainConfig(steps=1, batch_size=1), progress=False)
    with pytest.raises(InvalidInputError):
        pretrain(model, rng.standard_normal((4, 5, 64)), TrainConfig(steps=1), progress=False)


def test_finetune_trains_only_adapters_and_head(rng):
    model = random_model(2)
    before = _state(model)
    windows = rng.standard_normal((6, 2, 4, 64))
    labels = np.array([0, 1, 0, 1, 1, 0])
    cfg = TrainConfig(mode="finetune", steps=3, batch_size=4, lr=1e-2, lora=LoraConfig(rank=2), freeze_base=True)
    result = finetune(model, windows, labels, cfg, progress=False)
    assert isinstance(model.layers[0].attention.q_proj, LoraLinear)
    for name, tensor in model.state_dict().items():
        if "lora_" in name:
            continue
        key = name.replace(".base.", ".")
        assert torch.equal(tensor, before[key]), name
    assert any(layer.attention.q_proj.lora_b.abs().sum() > 0 for layer in model.layers)

    scores = predict_windows(result.model, result.head, windows)
    assert scores.shape == (6,)
    assert ((scores >= 0) & (scores <= 1)).all()


def test_finetune_rejects_misaligned_labels(rng):
    with pytest.raises(InvalidInputError):
        finetune(random_model(0), rng.standard_normal((3, 2, 4, 64)), np.array([0, 1]), progress=False)


def test_lora_finetune_requires_frozen_base():
    with pytest.raises(ValueError):
        TrainConfig(mode="finetune", lora=LoraConfig(), freeze_base=False)


def test_instance_normalize_and_last_value(rng):
    past = rng.standard_normal((3, 2, 96)) * 5 + 2
    normalized, mean, std = instance_normalize(past)
    np.testing.assert_allclose(normalized.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(normalized * std + mean, past, rtol=0, atol=1e-12)
    baseline = last_value_forecast(past, 4)
    assert baseline.shape == (3, 2, 4)
    np.testing.assert_array_equal(baseline[:, :, 3], past[:, :, -1])


def test_train_forecaster_smoke(rng):
    past = rng.standard_normal((8, 2, 32))
    future = rng.standard_normal((8, 2, 16))
    cfg = ForecastConfig(lookback=32, horizon=16, segment_samples=16, steps=2, batch_size=4)
    result = train_forecaster(past, future, cfg, progress=False)
    assert len(result.trace) == 2
    prediction = forecast_predict(result.model, result.head, past, cfg.segment_samples)
    assert prediction.shape == (8, 2, 16)
    with pytest.raises(DataUnderflowError):
        train_forecaster(np.zeros((0, 2, 32)), np.zeros((0, 2, 16)), cfg, progress=False)
    with pytest.raises(InvalidInputError):
        train_forecaster(past, future, cfg.model_copy(update={"lookback": 24}), progress=False)


@pytest.mark.slow
def test_pretrain_reaches_contrastive_accuracy():
    series = series_io.synth_generate(SynthConfig(n_channels=4, duration_s=1200.0, burst_rate_per_hour=0.0), 0)
    grids = series_io.segment(series, 20.0, 1.0, 10.0)
    windows = np.stack([g.cells for g in grids])
    model = random_model(0)
    result = pretrain(model, windows, TrainConfig(steps=5000, batch_size=8, lr=1e-3, weight_decay=0.0),
                      progress=False)
    assert result.trace["accuracy"].iloc[-100:].mean() > 0.9


@pytest.mark.slow
def test_finetune_detects_bursts():
    series = series_io.synth_generate(SynthConfig(n_channels=4, duration_s=7200.0, burst_rate_per_hour=30.0), 1)
    grids = series_io.segment(series, 20.0, 1.0, 10.0)
    windows = np.stack([g.cells for g in grids])
    labels = np.array([int(g.labels[-1]) for g in grids])
    n_test = len(grids) // 5
    model = random_model(0)
    cfg = TrainConfig(mode="finetune", steps=400, batch_size=16, lr=1e-3, lora=LoraConfig(), freeze_base=True)
    result = finetune(model, windows[:-n_test], labels[:-n_test], cfg, progress=False)
    scores = predict_windows(result.model, result.head, windows[-n_test:])
    assert raw_metrics((scores > 0.5).astype(int), labels[-n_test:]).f1 > 0.8


@pytest.mark.slow
def test_forecast_beats_last_value():
    series = series_io.synth_generate(SynthConfig(n_channels=3, duration_s=3000.0, sample_rate_hz=8.0,
                                                  burst_rate_per_hour=0.0), 2)
    split = int(series.n_samples * 0.8)
    train = series.model_copy(update={"samples": series.samples[:, :split], "labels": None})
    test = series.model_copy(update={"samples": series.samples[:, split:], "labels": None})
    cfg = ForecastConfig()
    past, future = series_io.make_forecast_windows(train, cfg.lookback, cfg.horizon, cfg.stride)
    result = train_forecaster(past, future, cfg, progress=False)
    test_past, test_future = series_io.make_forecast_windows(test, cfg.lookback, cfg.horizon, cfg.horizon)
    model_mse = forecast_metrics(forecast_predict(result.model, result.head, test_past, cfg.segment_samples),
                                 test_future).mse
    baseline_mse = forecast_metrics(last_value_forecast(test_past, cfg.horizon), test_future).mse
    assert model_mse <= 0.8 * baseline_mse
