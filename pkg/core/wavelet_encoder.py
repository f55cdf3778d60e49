import math
from typing import List

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict
from torch import nn

from core.errors import InvalidInputError

# Coeficientes de escala de Daubechies-4 (8 taps), definición ortonormal estándar.
# El filtro de análisis paso bajo es el inverso de esta secuencia; el paso alto es su espejo en cuadratura.
DB4_SCALING = np.array([
    0.230377813308896501,
    0.714846570552915647,
    0.630880767929858908,
    -0.027983769416859854,
    -0.187034811719093084,
    0.030841381835560764,
    0.032883011666885200,
    -0.010597401785069032,
])
DEC_LO = DB4_SCALING[::-1].copy()
DEC_HI = np.array([(-1) ** (j + 1) * DEC_LO[len(DEC_LO) - 1 - j] for j in range(len(DEC_LO))])
FILTER_TAPS = len(DEC_LO)


class WaveletCoeffs(BaseModel):
    """
    Coeficientes de una descomposición db4 con bordes periódicos.

    Las bandas se ordenan [approx_L, detail_L, detail_{L-1}, ..., detail_1]; cada banda puede tener ejes
    iniciales arbitrarios (por ejemplo [C × T × n]) y la transformada actúa sobre el último eje.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    bands: List[np.ndarray]
    level: int

    @property
    def total_length(self):
        return sum(band.shape[-1] for band in self.bands)


def max_level(length, filter_taps=FILTER_TAPS):
    """
    Nivel máximo de descomposición admisible: floor(log2(length / (filter_taps - 1))).
    """
    if length < filter_taps - 1:
        return 0
    return int(math.floor(math.log2(length / (filter_taps - 1))))


def encoder_level(segment_samples, requested=None):
    """
    Nivel usado por el codificador: el pedido, o el mayor admisible que divida la longitud del segmento.
    """
    if requested is not None:
        return requested
    level = max_level(segment_samples)
    while level > 0 and segment_samples % (2 ** level) != 0:
        level -= 1
    if level < 1:
        raise InvalidInputError(f"un segmento de {segment_samples} muestras no admite ninguna descomposición db4")
    return level


def _periodic_index(n):
    # idx[o, j] = (2o + F/2 - j) mod n: misma alineación que la periodización habitual de los bancos de filtros
    o = np.arange(n // 2)[:, None]
    j = np.arange(FILTER_TAPS)[None, :]
    return (2 * o + FILTER_TAPS // 2 - j) % n


def _check_level(length, level):
    if level < 1:
        raise InvalidInputError(f"level debe ser >= 1, se recibió {level}")
    admissible = max_level(length)
    if level > admissible:
        raise InvalidInputError(f"level={level} supera el máximo admisible {admissible} para longitud {length}")
    if length % (2 ** level) != 0:
        raise InvalidInputError(f"la longitud {length} no es divisible por 2^{level}")


def dwt_db4(segment, level):
    """
    Descomposición wavelet discreta db4 en cascada (filtrado de análisis + diezmado) con bordes periódicos.

    Parámetros:
    - segment (array): Señal; la transformada se aplica sobre el último eje.
    - level (int): Número de niveles de la cascada.

    Retorna:
    - WaveletCoeffs: Bandas [approx_L, detail_L, ..., detail_1]; el total de coeficientes es igual a la longitud de entrada.
    """
    x = np.asarray(segment, dtype=np.float64)
    _check_level(x.shape[-1], level)
    details = []
    approx = x
    for _ in range(level):
        windows = approx[..., _periodic_index(approx.shape[-1])]
        details.append(windows @ DEC_HI)
        approx = windows @ DEC_LO
    return WaveletCoeffs(bands=[approx] + details[::-1], level=level)


def idwt_db4(coeffs):
    """
    Cascada de síntesis inversa de `dwt_db4`; reconstruye la señal original.

    Parámetros:
    - coeffs (WaveletCoeffs): Coeficientes producidos por `dwt_db4`.

    Retorna:
    - np.ndarray: La señal reconstruida.
    """
    bands = [np.asarray(band, dtype=np.float64) for band in coeffs.bands]
    if len(bands) != coeffs.level + 1:
        raise InvalidInputError(f"se esperaban {coeffs.level + 1} bandas, hay {len(bands)}")
    approx = bands[0]
    for detail in bands[1:]:
        if detail.shape != approx.shape:
            raise InvalidInputError(f"bandas inconsistentes: {approx.shape} frente a {detail.shape}")
        n = 2 * approx.shape[-1]
        index = _periodic_index(n)
        out = np.zeros(approx.shape[:-1] + (n,))
        # La síntesis es la transpuesta del análisis; para un j fijo las posiciones no se repiten
        for j in range(FILTER_TAPS):
            out[..., index[:, j]] += approx * DEC_LO[j] + detail * DEC_HI[j]
        approx = out
    return approx


def flatten_coeffs(coeffs):
    """
    Concatena las bandas en el orden [approx_L, detail_L, ..., detail_1] sobre el último eje.
    """
    return np.concatenate(coeffs.bands, axis=-1)


def rms_norm(x, gain, eps=1e-6):
    """
    Normalización RMS: y_i = gain_i · x_i / sqrt(mean(x²) + eps), sobre el último eje.

    Parámetros:
    - x (torch.Tensor): Entrada.
    - gain (torch.Tensor | float): Ganancia por componente (o escalar).
    - eps (float): Término de estabilidad (> 0); garantiza rms_norm(0) = 0.

    Retorna:
    - torch.Tensor: La entrada normalizada.
    """
    return gain * x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)


class RMSNorm(nn.Module):
    def __init__(self, dim, eps=1e-6):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return rms_norm(x, self.gain, self.eps)


class WaveletEncoder(nn.Module):
    """
    Codificador de segmentos: db4 → RMSNorm → proyección lineal, aplicado a cada celda (c, t) por separado.

    Los parámetros son la proyección [d × n_input] y su sesgo [d].
    """

    def __init__(self, segment_samples, n_embed, level=None, eps=1e-6):
        super().__init__()
        self.segment_samples = segment_samples
        self.level = encoder_level(segment_samples, level)
        _check_level(segment_samples, self.level)
        self.eps = eps
        self.projection = nn.Linear(segment_samples, n_embed)

    def coefficients(self, cells):
        """
        Coeficientes db4 aplanados de cada celda, como tensor [..., n_input].
        """
        cells = np.asarray(cells, dtype=np.float64)
        if cells.shape[-1] != self.segment_samples:
            raise InvalidInputError(
                f"los segmentos tienen {cells.shape[-1]} muestras, el codificador espera {self.segment_samples}")
        flat = flatten_coeffs(dwt_db4(cells, self.level))
        return torch.as_tensor(flat, dtype=self.projection.weight.dtype)

    def forward(self, cells):
        z = self.coefficients(cells)
        return self.projection(rms_norm(z, 1.0, self.eps))


def encode(grid, encoder):
    """
    Codifica una rejilla de segmentos en una rejilla de embeddings [C × T × d].

    Parámetros:
    - grid (SegmentGrid): Rejilla de entrada.
    - encoder (WaveletEncoder): Parámetros del codificador.

    Retorna:
    - torch.Tensor: Embeddings por celda; las celdas son independientes entre sí.
    """
    return encoder(grid.cells)
