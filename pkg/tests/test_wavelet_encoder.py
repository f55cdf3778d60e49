import math

import numpy as np
import pytest
import pywt
import torch

from core.errors import InvalidInputError
from core.wavelet_encoder import (DB4_SCALING, WaveletCoeffs, WaveletEncoder, dwt_db4, encoder_level, flatten_coeffs,
                                  idwt_db4, max_level, rms_norm)


def test_filter_identities():
    """
    Los coeficientes db4 suman sqrt(2) y son ortonormales frente a sus desplazamientos pares.
    """
    assert abs(DB4_SCALING.sum() - math.sqrt(2)) < 1e-14
    for shift in (0, 2, 4, 6):
        dot = np.dot(DB4_SCALING[shift:], DB4_SCALING[:len(DB4_SCALING) - shift])
        assert abs(dot - (1.0 if shift == 0 else 0.0)) < 1e-14


@pytest.mark.parametrize("length, level", [(64, 3), (256, 5), (2560, 8)])
def test_dwt_matches_pywavelets(length, level):
    x = np.random.default_rng(length).standard_normal(length)
    coeffs = dwt_db4(x, level)
    expected = pywt.wavedec(x, "db4", mode="periodization", level=level)
    assert len(coeffs.bands) == len(expected)
    for band, reference in zip(coeffs.bands, expected):
        np.testing.assert_allclose(band, reference, rtol=0, atol=1e-10)
    assert coeffs.total_length == length


def test_dwt_zero_and_linearity(rng):
    assert not flatten_coeffs(dwt_db4(np.zeros(64), 3)).any()
    x, y = rng.standard_normal((2, 128))
    combined = flatten_coeffs(dwt_db4(2.0 * x - 0.5 * y, 4))
    separate = 2.0 * flatten_coeffs(dwt_db4(x, 4)) - 0.5 * flatten_coeffs(dwt_db4(y, 4))
    np.testing.assert_allclose(combined, separate, rtol=0, atol=1e-9)


def test_round_trip_and_energy(rng):
    """
    Reconstrucción perfecta y conservación de la energía, también en lote sobre ejes iniciales.
    """
    x = rng.standard_normal((3, 4, 256))
    coeffs = dwt_db4(x, 5)
    np.testing.assert_allclose(idwt_db4(coeffs), x, rtol=0, atol=1e-8)
    energy = (x ** 2).sum(axis=-1)
    np.testing.assert_allclose((flatten_coeffs(coeffs) ** 2).sum(axis=-1), energy, rtol=1e-8)

    constant = np.full(16, 3.0)
    np.testing.assert_allclose(idwt_db4(dwt_db4(constant, 1)), constant, rtol=0, atol=1e-10)
    assert not idwt_db4(dwt_db4(np.zeros(32), 2)).any()


def test_level_limits():
    assert max_level(2560) == 8
    assert encoder_level(2560) == 8
    assert encoder_level(64) == 3
    with pytest.raises(InvalidInputError):
        dwt_db4(np.zeros(64), 4)
    with pytest.raises(InvalidInputError):
        dwt_db4(np.zeros(62), 2)


def test_idwt_rejects_inconsistent_bands():
    bands = [np.zeros(4), np.zeros(4), np.zeros(7)]
    with pytest.raises(InvalidInputError):
        idwt_db4(WaveletCoeffs(bands=bands, level=2))


def test_rms_norm():
    y = rms_norm(torch.tensor([3.0, 4.0], dtype=torch.float64), 1.0, eps=1e-12)
    np.testing.assert_allclose(y.numpy(), np.array([3.0, 4.0]) / math.sqrt(12.5), rtol=1e-10)
    assert not rms_norm(torch.zeros(5), torch.ones(5)).any()
    z = rms_norm(torch.randn(10, 64, dtype=torch.float64), 1.0, eps=1e-12)
    np.testing.assert_allclose(z.pow(2).mean(dim=-1).sqrt().numpy(), 1.0, atol=1e-6)


@pytest.fixture(scope="module")
def encoder():
    torch.manual_seed(0)
    return WaveletEncoder(64, 16).double()


def test_encoder_zero_grid(encoder):
    with torch.no_grad():
        encoder.projection.bias.zero_()
        assert not encoder(np.zeros((2, 3, 64))).any()
        encoder.projection.bias.normal_()


def test_encoder_is_cellwise(encoder, rng):
    """
    Cada celda se codifica por separado: cambiar una celda solo cambia su embedding, y escalarla no lo cambia
    (invariancia de escala de la normalización RMS).
    """
    cells = rng.standard_normal((3, 4, 64))
    changed = cells.copy()
    changed[1, 2] = rng.standard_normal(64)
    with torch.no_grad():
        a, b = encoder(cells), encoder(changed)
    diff = (a - b).abs().sum(dim=-1)
    assert diff[1, 2] > 0
    diff[1, 2] = 0
    assert not diff.any()

    scaled = cells.copy()
    scaled[0, 0] *= 2.0
    with torch.no_grad():
        np.testing.assert_allclose(encoder(scaled)[0, 0].numpy(), a[0, 0].numpy(), rtol=1e-5, atol=1e-6)

    permuted = cells[[2, 0, 1]]
    with torch.no_grad():
        torch.testing.assert_close(encoder(permuted), a[[2, 0, 1]])


def test_encoder_rejects_wrong_segment_length(encoder):
    with pytest.raises(InvalidInputError):
        encoder(np.zeros((1, 1, 32)))
