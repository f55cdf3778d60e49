import time

import numpy as np
import pandas as pd
import torch

from core.data_model import AttentionConfig
from core.errors import InvalidInputError
from core.logger import get_logger
from core.mvpa_attention import MultiVariateParallelAttention, OpCounters, efficient_mvpa_logits, naive_mvpa_logits

logger = get_logger(__name__)

BENCH_COLUMNS = ["T", "C", "naive_ns", "efficient_ns", "content_dots", "time_dots", "channel_dots"]

# Límite de memoria estimada por pasada (bytes); por encima solo se informan los contadores
DEFAULT_MEMORY_LIMIT = 2 * 1024 ** 3


def expected_counters(n_heads, n_channels, n_time, local_window, n_windows=1):
    """
    Productos escalares de una pasada eficiente de MVPA según las fórmulas de complejidad:
    contenido H·C²·Σ_{δ<min(L,T)}(T-δ), tiempo H·C·T², canal H·T·C·(2C-1).
    """
    band = sum(n_time - delta for delta in range(min(local_window, n_time)))
    return OpCounters(content_dots=n_windows * n_heads * n_channels ** 2 * band,
                      time_dots=n_windows * n_heads * n_channels * n_time ** 2,
                      channel_dots=n_windows * n_heads * n_time * n_channels * (2 * n_channels - 1))


def estimated_bytes(n_time, n_channels, n_heads, n_embed, naive=False):
    # El oráculo materializa un vector de libro de códigos por par; la versión eficiente, los logits [H × CT × CT]
    pairs = (n_time * n_channels) ** 2
    per_pair = 2 * n_embed if naive else 6 * n_heads
    return pairs * per_pair * 8


def _best_ns(fn, repeats):
    best = None
    for _ in range(repeats):
        start = time.perf_counter_ns()
        fn()
        elapsed = time.perf_counter_ns() - start
        best = elapsed if best is None else min(best, elapsed)
    return best


def bench_attention(t_list, c_list, n_heads=4, n_gqa=2, n_embed=32, local_window=10, repeats=3, seed=0,
                    memory_limit=DEFAULT_MEMORY_LIMIT):
    """
    Mide el oráculo ingenuo frente al cálculo eficiente de los logits MVPA para cada par (T, C).

    Parámetros:
    - t_list (list[int]): Longitudes temporales.
    - c_list (list[int]): Números de canales.
    - repeats (int): Repeticiones por medida; se informa el mínimo en nanosegundos.
    - memory_limit (int): Memoria estimada máxima por pasada; si se supera (o falla la reserva) la fila solo
      contiene los contadores, calculados por fórmula.

    Retorna:
    - pandas.DataFrame: Columnas T, C, naive_ns, efficient_ns, content_dots, time_dots, channel_dots.
    """
    if not t_list or not c_list:
        raise InvalidInputError("las listas de T y de C no pueden estar vacías")
    if any(v < 1 for v in list(t_list) + list(c_list)) or repeats < 1:
        raise InvalidInputError("T, C y repeats deben ser enteros positivos")

    max_time, max_channels = max(t_list), max(c_list)
    torch.manual_seed(seed)
    params = MultiVariateParallelAttention(n_embed, n_heads, n_gqa, max_time, max_channels,
                                           AttentionConfig(local_window=local_window)).double()
    rng = np.random.default_rng(seed)

    rows = []
    with torch.no_grad():
        for n_time in t_list:
            for n_channels in c_list:
                expected = expected_counters(n_heads, n_channels, n_time, local_window)
                row = {"T": n_time, "C": n_channels, "naive_ns": np.nan, "efficient_ns": np.nan, **expected.as_row()}
                x = torch.from_numpy(rng.standard_normal((n_channels, n_time, n_embed)))

                if estimated_bytes(n_time, n_channels, n_heads, n_embed) > memory_limit:
                    logger.warning(f"T={n_time}, C={n_channels}: memoria estimada excesiva, solo contadores")
                    rows.append(row)
                    continue
                try:
                    counters = OpCounters()
                    efficient_mvpa_logits(x, params, counters=counters)
                    if counters != expected:
                        raise AssertionError(f"contadores {counters} distintos de la fórmula {expected}")
                    row["efficient_ns"] = _best_ns(lambda: efficient_mvpa_logits(x, params), repeats)
                    if estimated_bytes(n_time, n_channels, n_heads, n_embed, naive=True) <= memory_limit:
                        row["naive_ns"] = _best_ns(lambda: naive_mvpa_logits(x, params, local_window), repeats)
                except MemoryError:
                    logger.warning(f"T={n_time}, C={n_channels}: memoria insuficiente, solo contadores")
                rows.append(row)
                logger.info(f"T={n_time}, C={n_channels}: naive={row['naive_ns']} ns, efficient={row['efficient_ns']} ns")
    return pd.DataFrame(rows, columns=BENCH_COLUMNS)
