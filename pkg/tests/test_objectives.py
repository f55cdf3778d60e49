import math

import numpy as np
import pytest
import torch

from core.data_model import ContrastiveConfig
from core.errors import InvalidInputError
from core.objectives import (batch_contrastive, contrastive_loss, cosine_sim, negative_indices, sample_negatives,
                             three_reference_eval)


def test_cosine_sim():
    a = torch.tensor([[1.0, 2.0, 3.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]], dtype=torch.float64)
    b = torch.tensor([[2.0, 4.0, 6.0], [0.0, 5.0, 0.0], [1.0, 1.0, 1.0]], dtype=torch.float64)
    torch.testing.assert_close(cosine_sim(a, b), torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64))
    assert cosine_sim(a[0], -a[0]).item() == pytest.approx(-1.0, abs=1e-15)
    assert cosine_sim(a[0], 3.0 * a[0]).item() <= 1.0


def test_contrastive_closed_forms():
    """
    Objetivo ortogonal a la predicción y 30 confusores ortogonales: ln(31). Predicción perfecta: log(1 + 30·e^-10).
    """
    basis = torch.eye(31, dtype=torch.float64)
    cfg = ContrastiveConfig(temperature=0.1, n_negatives=30)
    assert contrastive_loss(basis[0], basis[1], basis[1:31], cfg).item() == pytest.approx(math.log(31), abs=1e-12)
    perfect = contrastive_loss(basis[0], basis[0], basis[1:31], cfg).item()
    assert perfect == pytest.approx(math.log1p(30 * math.exp(-10)), rel=1e-10)

    excluded = ContrastiveConfig(temperature=0.1, n_negatives=30, include_positive_in_denominator=False)
    assert contrastive_loss(basis[0], basis[1], basis[1:31], excluded).item() == pytest.approx(math.log(30), abs=1e-12)


def test_contrastive_loss_is_stable_at_low_temperature():
    basis = torch.eye(4, dtype=torch.float64)
    cfg = ContrastiveConfig(temperature=1e-4)
    loss = contrastive_loss(basis[0], -basis[0], basis[0:1].expand(3, 4), cfg)
    assert torch.isfinite(loss)
    assert loss.item() == pytest.approx(2.0 / 1e-4 + math.log(3), rel=1e-9)
    with pytest.raises(InvalidInputError):
        contrastive_loss(basis[0], basis[1], torch.zeros(0, 4, dtype=torch.float64), cfg)


def test_negatives_come_from_other_windows():
    window, channel, time = negative_indices(4, 3, 5, 30, seed=7)
    assert window.shape == (4, 3, 4, 30)
    own = np.arange(4)[:, None, None, None]
    assert not (window == own).any()
    assert set(np.unique(window)) == {0, 1, 2, 3}
    assert channel.max() < 3 and time.max() < 5


def test_single_window_negatives_avoid_target():
    window, channel, time = negative_indices(1, 2, 3, 200, seed=1)
    assert not window.any()
    for c in range(2):
        for t in range(2):
            picked = set(zip(channel[0, c, t].tolist(), time[0, c, t].tolist()))
            assert (c, t + 1) not in picked
            assert len(picked) == 5
    with pytest.raises(InvalidInputError):
        negative_indices(1, 1, 1, 3, seed=0)


def test_sample_negatives():
    batch = torch.arange(2 * 3 * 4, dtype=torch.float64).reshape(2, 3, 4, 1).expand(2, 3, 4, 5).clone()
    batch.requires_grad_(True)
    negatives = sample_negatives(batch, (0, 1, 2), 10, seed=3)
    assert negatives.shape == (10, 5)
    assert not negatives.requires_grad
    # Con dos ventanas todos los confusores de la ventana 0 salen de la ventana 1 (valores >= 12)
    assert (negatives[:, 0] >= 12).all()

    single = batch[:1].detach()
    negatives = sample_negatives(single, (0, 1, 2), 50, seed=3)
    assert not (negatives[:, 0] == single[0, 1, 2, 0]).any()
    with pytest.raises(InvalidInputError):
        sample_negatives(single, (0, 1, 0), 5, seed=3)
    with pytest.raises(InvalidInputError):
        sample_negatives(single[0], (0, 1, 1), 5, seed=3)


def test_batch_contrastive(toy_model, rng):
    windows = rng.standard_normal((3, 2, 5, 64))
    with torch.no_grad():
        targets = toy_model.encode(windows)
        outputs = toy_model(windows)
    loss, accuracy = batch_contrastive(outputs, targets, seed=4)
    again, _ = batch_contrastive(outputs, targets, seed=4)
    assert loss.item() == again.item()
    assert 0.0 <= accuracy <= 1.0
    # 3 ventanas × 2 canales × 4 celdas predichas, cada una acotada por ln(31) + 2/τ
    assert 0.0 < loss.item() < 24 * (math.log(31) + 20.0)

    single, _ = batch_contrastive(outputs[:1], targets[:1], seed=4)
    assert torch.isfinite(single)
    with pytest.raises(InvalidInputError):
        batch_contrastive(outputs[:, :, :1], targets[:, :, :1])


def test_batch_contrastive_gradient_skips_negatives():
    outputs = torch.randn(2, 1, 3, 4, dtype=torch.float64)
    targets = torch.randn(2, 1, 3, 4, dtype=torch.float64, requires_grad=True)
    loss, _ = batch_contrastive(outputs, targets, seed=0)
    loss.backward()
    # El instante 0 nunca es positivo y como confusor está desconectado del grafo
    assert not targets.grad[:, :, 0].any()
    assert targets.grad[:, :, 1:].abs().sum() > 0


def test_three_reference_eval(toy_model, rng):
    cells = rng.standard_normal((3, 8, 64))
    result = three_reference_eval(toy_model, cells, segment_seconds=5.0, lookahead_seconds=10.0, seed=2)
    assert result.n_cells == 3 * 6
    assert result.n_skipped == 3 * 2
    for value in (result.sim_true, result.sim_two_step, result.sim_random):
        assert -1.0 <= value <= 1.0
    assert result == three_reference_eval(toy_model, cells, segment_seconds=5.0, lookahead_seconds=10.0, seed=2)


def test_three_reference_eval_short_grid(toy_model, rng):
    result = three_reference_eval(toy_model, rng.standard_normal((2, 2, 64)))
    assert result.n_cells == 0
    assert result.n_skipped == 4
    assert math.isnan(result.sim_true)
