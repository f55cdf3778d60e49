import numpy as np
import torch

import config
from core.data_model import ContrastiveConfig, ThreeReferenceResult
from core.errors import InvalidInputError
from core.logger import get_logger
from core.rng import philox

logger = get_logger(__name__)


def cosine_sim(a, b):
    """
    Similitud coseno sobre el último eje; vale 0 cuando alguno de los dos vectores es nulo.

    Parámetros:
    - a (torch.Tensor): [..., d].
    - b (torch.Tensor): [..., d] (difundible con `a`).

    Retorna:
    - torch.Tensor: Similitudes en [-1, 1] con la forma difundida sin el último eje.
    """
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    dot = (a * b).sum(dim=-1)
    denom = torch.linalg.vector_norm(a, dim=-1) * torch.linalg.vector_norm(b, dim=-1)
    nonzero = denom > 0
    safe = torch.where(nonzero, denom, torch.ones_like(denom))
    return torch.where(nonzero, dot / safe, torch.zeros_like(dot)).clamp(-1.0, 1.0)


def negative_indices(n_windows, n_channels, n_time, n_negatives, seed):
    """
    Índices (ventana, canal, instante) de los confusores de cada celda predicha.

    Cada celda (b, c, t) con t < T-1 recibe `n_negatives` confusores muestreados con reemplazo. Con dos o más
    ventanas, los confusores salen siempre de otras ventanas del lote. Con una sola ventana se usan las celdas de
    la misma ventana salvo el objetivo (c, t+1).

    Retorna:
    - tuple[np.ndarray, np.ndarray, np.ndarray]: Índices [B × C × (T-1) × n] de ventana, canal e instante.
    """
    rng = philox(seed, "negatives")
    shape = (n_windows, n_channels, n_time - 1, n_negatives)
    if n_windows >= 2:
        window = rng.integers(0, n_windows - 1, size=shape)
        own = np.arange(n_windows)[:, None, None, None]
        window = window + (window >= own)
        channel = rng.integers(0, n_channels, size=shape)
        time = rng.integers(0, n_time, size=shape)
        return window, channel, time

    n_cells = n_channels * n_time
    if n_cells < 2:
        raise InvalidInputError("no hay celdas para muestrear confusores: se necesitan al menos 2 celdas")
    c = np.arange(n_channels)[:, None, None]
    t = np.arange(n_time - 1)[None, :, None]
    target = (c * n_time + t + 1)[None]
    flat = rng.integers(0, n_cells - 1, size=shape)
    flat = flat + (flat >= target)
    return np.zeros(shape, dtype=np.int64), flat // n_time, flat % n_time


def sample_negatives(batch, target_index, n, seed):
    """
    Muestrea `n` confusores para una celda objetivo, excluidos del grafo de gradientes.

    Parámetros:
    - batch (torch.Tensor): Embeddings del codificador del lote [B × C × T × d].
    - target_index (tuple[int, int, int]): Celda positiva (b, c, t+1).
    - n (int): Número de confusores.
    - seed (int): Semilla del muestreo.

    Retorna:
    - torch.Tensor: Confusores [n × d].
    """
    if batch.dim() != 4:
        raise InvalidInputError(f"se esperaba un lote [B × C × T × d], se recibió {tuple(batch.shape)}")
    b, c, t = target_index
    n_windows, n_channels, n_time, _ = batch.shape
    if n_windows < 2:
        logger.warning("Lote de una sola ventana: los confusores se toman de la misma ventana")
    if not 1 <= t < n_time:
        raise InvalidInputError(f"la celda objetivo debe tener t >= 1, se recibió t={t}")
    window, channel, time = negative_indices(n_windows, n_channels, n_time, n, seed)
    pick = (b, c, t - 1)
    return batch.detach()[window[pick], channel[pick], time[pick]]


def contrastive_loss(o, e_pos, negatives, contrastive_config=None):
    """
    Pérdida contrastiva por celda con estabilización log-sum-exp.

    -log( exp(s⁺/τ) / (exp(s⁺/τ)·[incluir positivo] + Σ_k exp(s_k/τ)) ), con s = similitud coseno.

    Parámetros:
    - o (torch.Tensor): Predicciones [..., d].
    - e_pos (torch.Tensor): Objetivos positivos [..., d].
    - negatives (torch.Tensor): Confusores [..., n, d].
    - contrastive_config (ContrastiveConfig | None): Temperatura y forma del denominador.

    Retorna:
    - torch.Tensor: Pérdida por celda [...].
    """
    cfg = contrastive_config or ContrastiveConfig()
    if negatives.shape[-2] == 0:
        raise InvalidInputError("el conjunto de confusores no puede estar vacío")
    positive = cosine_sim(o, e_pos) / cfg.temperature
    negative = cosine_sim(o.unsqueeze(-2), negatives) / cfg.temperature
    if cfg.include_positive_in_denominator:
        negative = torch.cat([positive.unsqueeze(-1), negative], dim=-1)
    return torch.logsumexp(negative, dim=-1) - positive


def batch_contrastive(outputs, targets, contrastive_config=None, seed=0):
    """
    Objetivo de pre-entrenamiento de un lote: suma de la pérdida de todas las celdas (c, t) con t < T-1.

    Parámetros:
    - outputs (torch.Tensor): Salidas del modelo [B × C × T × d]; la celda (c, t) predice (c, t+1).
    - targets (torch.Tensor): Embeddings del codificador [B × C × T × d].
    - contrastive_config (ContrastiveConfig | None): Configuración de la pérdida.
    - seed (int): Semilla del muestreo de confusores.

    Retorna:
    - tuple[torch.Tensor, float]: Pérdida sumada y precisión contrastiva (fracción de celdas cuyo objetivo supera
      a todos sus confusores en similitud).
    """
    cfg = contrastive_config or ContrastiveConfig()
    n_windows, n_channels, n_time, _ = outputs.shape
    if n_time < 2:
        raise InvalidInputError("se necesitan al menos 2 segmentos temporales para predecir el siguiente")
    if n_windows < 2:
        logger.warning("Lote de una sola ventana: los confusores se toman de la misma ventana")
    window, channel, time = negative_indices(n_windows, n_channels, n_time, cfg.n_negatives, seed)
    negatives = targets.detach()[torch.from_numpy(window), torch.from_numpy(channel), torch.from_numpy(time)]
    predictions = outputs[:, :, :-1]
    positives = targets[:, :, 1:]
    losses = contrastive_loss(predictions, positives, negatives, cfg)
    with torch.no_grad():
        positive_sim = cosine_sim(predictions, positives)
        negative_sim = cosine_sim(predictions.unsqueeze(-2), negatives)
        accuracy = (positive_sim > negative_sim.max(dim=-1).values).double().mean().item()
    return losses.sum(), accuracy


def three_reference_eval(model, grid, segment_seconds=config.SEGMENT_SECONDS,
                         lookahead_seconds=config.LOOKAHEAD_SECONDS, seed=0):
    """
    Compara la predicción de cada celda con tres referencias del codificador: el segmento siguiente (t+1), el de
    dos pasos (t+2) y uno aleatorio dentro del horizonte de búsqueda (t, t+horizonte].

    Las celdas sin segmento t+2 se omiten y se cuentan en `n_skipped`.

    Parámetros:
    - model (MVPFormer): Modelo (se evalúa sin dropout).
    - grid (SegmentGrid | array): Rejilla [C × T × S].
    - segment_seconds (float): Duración de un segmento; fija el horizonte en segmentos.
    - lookahead_seconds (float): Horizonte de la referencia aleatoria (dos minutos por defecto).
    - seed (int): Semilla del muestreo de la referencia aleatoria.

    Retorna:
    - ThreeReferenceResult: Medias y desviaciones de las tres similitudes.
    """
    cells = getattr(grid, "cells", grid)
    with torch.no_grad():
        embeddings = model.encode(cells)
        outputs = model.decode(embeddings)
    n_channels, n_time = embeddings.shape[-3], embeddings.shape[-2]
    lookahead = max(1, int(round(lookahead_seconds / segment_seconds)))
    n_valid = max(0, n_time - 2)
    n_skipped = n_channels * (n_time - n_valid)
    if n_valid == 0:
        logger.warning(f"Rejilla demasiado corta (T={n_time}) para la evaluación de tres referencias")
        nan = float("nan")
        return ThreeReferenceResult(sim_true=nan, sim_two_step=nan, sim_random=nan, n_cells=0, n_skipped=n_skipped)

    t = np.arange(n_valid)
    upper = np.minimum(t + lookahead, n_time - 1)
    rng = philox(seed, "three_reference")
    random_t = t[None, :] + 1 + np.floor(rng.random((n_channels, n_valid)) * (upper - t)[None, :]).astype(np.int64)
    channel = np.arange(n_channels)[:, None]

    predictions = outputs[:, :n_valid]
    sim_true = cosine_sim(predictions, embeddings[:, 1:n_valid + 1])
    sim_two_step = cosine_sim(predictions, embeddings[:, 2:n_valid + 2])
    sim_random = cosine_sim(predictions, embeddings[channel, random_t])
    return ThreeReferenceResult(sim_true=sim_true.mean().item(), sim_two_step=sim_two_step.mean().item(),
                                sim_random=sim_random.mean().item(),
                                std_true=sim_true.std().item(), std_two_step=sim_two_step.std().item(),
                                std_random=sim_random.std().item(),
                                n_cells=n_channels * n_valid, n_skipped=n_skipped)
