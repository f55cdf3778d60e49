import math
import re
from pathlib import Path

import numpy as np
import pandas as pd

import config
from core.data_model import MultiChannelSeries, SegmentGrid, SynthConfig
from core.errors import InvalidInputError, ParseError
from core.logger import get_logger
from core.rng import philox

logger = get_logger(__name__)

_HEADER = re.compile(r"^#\s*sample_rate_hz=(?P<rate>\S+)\s+channels=(?P<channels>\S*)\s*$")


def _is_multiple(value, unit):
    ratio = value / unit
    return abs(ratio - round(ratio)) < 1e-9 and round(ratio) >= 1


def segment(series, window_seconds, segment_seconds, stride_seconds):
    """
    Divide una serie multicanal en ventanas solapadas, y cada ventana en T segmentos por canal.

    Las muestras finales que no completan una ventana se descartan.

    Parámetros:
    - series (MultiChannelSeries): Serie de origen.
    - window_seconds (float): Duración de cada ventana; múltiplo entero de `segment_seconds`.
    - segment_seconds (float): Duración de cada segmento.
    - stride_seconds (float): Paso entre ventanas consecutivas (> 0).

    Retorna:
    - list[SegmentGrid]: Una rejilla [C × T × S] por ventana; lista vacía si la serie es más corta que una ventana.
    """
    if segment_seconds <= 0 or window_seconds <= 0:
        raise InvalidInputError("window_seconds y segment_seconds deben ser positivos")
    if stride_seconds <= 0:
        raise InvalidInputError(f"stride_seconds debe ser positivo, se recibió {stride_seconds}")
    if not _is_multiple(window_seconds, segment_seconds):
        raise InvalidInputError(
            f"window_seconds={window_seconds} no es múltiplo entero de segment_seconds={segment_seconds}")

    rate = series.sample_rate_hz
    n_segments = int(round(window_seconds / segment_seconds))
    segment_samples = int(round(segment_seconds * rate))
    window_samples = n_segments * segment_samples
    stride_samples = int(round(stride_seconds * rate))
    if segment_samples < 1 or stride_samples < 1:
        raise InvalidInputError("el segmento y el paso deben abarcar al menos una muestra")

    grids = []
    start = 0
    while start + window_samples <= series.n_samples:
        block = series.samples[:, start:start + window_samples]
        cells = block.reshape(series.n_channels, n_segments, segment_samples)
        start_seconds = start / rate
        labels = None
        if series.labels is not None:
            labels = _segment_labels(series.labels, start_seconds, segment_seconds, n_segments)
        grids.append(SegmentGrid(cells=cells, segment_seconds=segment_seconds, sample_rate_hz=rate,
                                 start_seconds=start_seconds, labels=labels))
        start += stride_samples

    logger.debug("segment: %d ventanas de T=%d, S=%d", len(grids), n_segments, segment_samples)
    return grids


def _segment_labels(second_labels, start_seconds, segment_seconds, n_segments):
    # Un segmento es positivo si algún segundo que lo toca es positivo
    labels = np.zeros(n_segments, dtype=np.int8)
    for t in range(n_segments):
        begin = start_seconds + t * segment_seconds
        first = int(math.floor(begin))
        last = int(math.ceil(begin + segment_seconds))
        window = second_labels[first:min(last, len(second_labels))]
        labels[t] = 1 if window.size and window.max() > 0 else 0
    return labels


def resample(series, target_hz):
    """
    Cambia la frecuencia de muestreo por interpolación lineal entre muestras vecinas.

    Parámetros:
    - series (MultiChannelSeries): Serie de origen.
    - target_hz (float): Frecuencia de destino (> 0).

    Retorna:
    - MultiChannelSeries: Serie con round(N × target_hz / sample_rate_hz) muestras por canal.
    """
    if target_hz <= 0:
        raise InvalidInputError(f"target_hz debe ser positivo, se recibió {target_hz}")
    if target_hz == series.sample_rate_hz:
        return series.model_copy(update={"samples": series.samples.copy()})

    n_out = int(round(series.n_samples * target_hz / series.sample_rate_hz))
    source_positions = np.arange(series.n_samples, dtype=np.float64)
    target_positions = np.arange(n_out, dtype=np.float64) * (series.sample_rate_hz / target_hz)
    samples = np.stack([np.interp(target_positions, source_positions, row) for row in series.samples]) \
        if series.n_samples else np.zeros((series.n_channels, n_out))

    labels = None
    if series.labels is not None:
        n_seconds = int(np.floor(n_out / target_hz))
        labels = np.zeros(n_seconds, dtype=np.int8)
        keep = min(n_seconds, len(series.labels))
        labels[:keep] = series.labels[:keep]
    return MultiChannelSeries(samples=samples, sample_rate_hz=target_hz,
                              channel_ids=list(series.channel_ids), labels=labels)


def synth_generate(synth_config, seed):
    """
    Genera una serie sintética multicanal: copias desfasadas de una señal compartida, una sinusoide propia
    por canal, ruido gaussiano y ráfagas anómalas de alta frecuencia anotadas en las etiquetas.

    Parámetros:
    - synth_config (SynthConfig): Parámetros del generador.
    - seed (int): Semilla; la misma (configuración, semilla) produce siempre la misma serie.

    Retorna:
    - MultiChannelSeries: Serie generada con etiquetas por segundo.
    """
    if synth_config.n_channels <= 0 or synth_config.duration_s <= 0:
        raise InvalidInputError("se necesitan al menos un canal y una duración positiva")

    rate = synth_config.sample_rate_hz
    n_samples = int(round(synth_config.duration_s * rate))
    n_channels = synth_config.n_channels
    frequencies = synth_config.base_frequencies_hz
    time = np.arange(n_samples, dtype=np.float64) / rate

    rng = philox(seed, "synth")
    shared_phases = rng.uniform(0.0, 2.0 * np.pi, size=len(frequencies))
    own_phases = rng.uniform(0.0, 2.0 * np.pi, size=n_channels)

    samples = np.zeros((n_channels, n_samples))
    for c in range(n_channels):
        lagged = time - c * synth_config.channel_lag_s
        shared = sum(np.sin(2.0 * np.pi * f * lagged + phase) for f, phase in zip(frequencies, shared_phases))
        own = np.sin(2.0 * np.pi * frequencies[c % len(frequencies)] * time + own_phases[c])
        samples[c] = synth_config.coupling * shared + (1.0 - synth_config.coupling) * own

    if synth_config.noise_std > 0:
        samples += synth_config.noise_std * rng.standard_normal(size=samples.shape)

    n_seconds = int(np.floor(n_samples / rate))
    labels = np.zeros(n_seconds, dtype=np.int8)
    for start, end in _burst_intervals(synth_config, rng):
        first, last = int(round(start * rate)), int(round(end * rate))
        burst_time = time[first:last]
        for c in range(n_channels):
            samples[c, first:last] += synth_config.burst_amplitude * np.sin(
                2.0 * np.pi * synth_config.burst_frequency_hz * (burst_time - c * synth_config.channel_lag_s))
        labels[int(math.floor(start)):min(int(math.ceil(end)), n_seconds)] = 1

    channel_ids = [f"ch{c:02d}" for c in range(n_channels)]
    return MultiChannelSeries(samples=samples, sample_rate_hz=rate, channel_ids=channel_ids, labels=labels)


def _burst_intervals(synth_config, rng):
    # Número de ráfagas = round(tasa × horas); cada una cae dentro de su propia franja para no solaparse
    n_bursts = int(round(synth_config.burst_rate_per_hour * synth_config.duration_s / 3600.0))
    if n_bursts == 0 or synth_config.burst_amplitude == 0:
        return []
    slot = synth_config.duration_s / n_bursts
    duration = min(synth_config.burst_duration_s, max(slot - 2.0, 1.0))
    intervals = []
    for k in range(n_bursts):
        low = k * slot + 1.0
        high = max(low, (k + 1) * slot - duration - 1.0)
        start = float(np.floor(rng.uniform(low, high) if high > low else low))
        intervals.append((start, min(start + duration, synth_config.duration_s)))
    return intervals


def save_csv(series, path):
    """
    Guarda una serie en CSV: una línea de cabecera con la frecuencia y los canales, y una fila por muestra.

    Parámetros:
    - series (MultiChannelSeries): Serie a guardar.
    - path (str | Path): Ruta del archivo de salida.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"# sample_rate_hz={series.sample_rate_hz!r} channels={';'.join(series.channel_ids)}\n"
    with path.open("w", newline="") as handle:
        handle.write(header)
        pd.DataFrame(series.samples.T).to_csv(handle, header=False, index=False, float_format="%.17g")


def load_csv(path):
    """
    Lee una serie desde CSV con el formato de `save_csv`.

    Parámetros:
    - path (str | Path): Ruta del archivo.

    Retorna:
    - MultiChannelSeries: La serie leída (sin etiquetas; ver `load_labels`).

    Lanza:
    - ParseError: Cabecera mal formada, filas con distinto número de columnas o celdas no numéricas.
    """
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ParseError("archivo vacío, falta la cabecera", 1)
    match = _HEADER.match(lines[0])
    if not match:
        raise ParseError(f"cabecera mal formada: {lines[0]!r}", 1)
    try:
        rate = float(match.group("rate"))
    except ValueError:
        raise ParseError(f"sample_rate_hz no numérico: {match.group('rate')!r}", 1)
    if rate <= 0:
        raise ParseError(f"sample_rate_hz debe ser positivo: {rate}", 1)
    channel_ids = [c for c in match.group("channels").split(";") if c]
    if not channel_ids:
        raise ParseError("la cabecera no declara canales", 1)

    body = lines[1:]
    while body and not body[-1].strip():
        body.pop()
    for number, line in enumerate(body, start=2):
        n_fields = len(line.split(",")) if line.strip() else 0
        if n_fields != len(channel_ids):
            raise ParseError(f"se esperaban {len(channel_ids)} columnas, hay {n_fields}", number)

    if not body:
        samples = np.zeros((len(channel_ids), 0))
    else:
        frame = pd.DataFrame([line.split(",") for line in body])
        numeric = frame.apply(lambda column: pd.to_numeric(column.str.strip(), errors="coerce"))
        bad = numeric.isna().any(axis=1)
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise ParseError(f"celda no numérica en la fila {body[row]!r}", row + 2)
        samples = numeric.to_numpy(dtype=np.float64).T

    return MultiChannelSeries(samples=samples, sample_rate_hz=rate, channel_ids=channel_ids)


def save_labels(intervals, path):
    """
    Guarda intervalos (inicio, fin) en segundos, uno por línea con el formato `<start_s>,<end_s>`.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{start!r},{end!r}\n" for start, end in intervals))


def load_labels(path):
    """
    Lee un archivo de intervalos `<start_s>,<end_s>`.

    Retorna:
    - list[tuple[float, float]]: Intervalos en el orden del archivo.
    """
    intervals = []
    for number, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != 2:
            raise ParseError(f"se esperaba '<start_s>,<end_s>', se encontró {line!r}", number)
        try:
            start, end = float(fields[0]), float(fields[1])
        except ValueError:
            raise ParseError(f"valores no numéricos en {line!r}", number)
        if not start < end:
            raise ParseError(f"intervalo vacío o invertido {line!r}", number)
        intervals.append((start, end))
    return intervals


def intervals_to_seconds(intervals, n_seconds):
    """
    Convierte intervalos en etiquetas por segundo: el segundo s es positivo si [s, s+1) se solapa con algún intervalo.
    """
    bits = np.zeros(int(n_seconds), dtype=np.int8)
    for start, end in intervals:
        first = max(int(math.floor(start)), 0)
        last = min(int(math.ceil(end)), len(bits))
        bits[first:last] = 1
    return bits


def seconds_to_intervals(bits):
    """
    Convierte etiquetas por segundo en intervalos contiguos de segundos positivos.
    """
    bits = np.asarray(bits).astype(np.int8)
    padded = np.concatenate([[0], bits, [0]])
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return [(float(s), float(e)) for s, e in zip(starts, ends)]


def make_forecast_windows(series, lookback, horizon, stride):
    """
    Construye pares (pasado, futuro) para el protocolo de predicción.

    Parámetros:
    - series (MultiChannelSeries): Serie de origen.
    - lookback (int): Muestras de contexto por ejemplo (96 en el protocolo estándar).
    - horizon (int): Muestras a predecir (96, 192, 336 o 720).
    - stride (int): Paso en muestras entre ejemplos consecutivos.

    Retorna:
    - tuple[np.ndarray, np.ndarray]: Contextos [n × C × lookback] y objetivos [n × C × horizon].
    """
    if lookback < 1 or horizon < 1 or stride < 1:
        raise InvalidInputError("lookback, horizon y stride deben ser positivos")
    span = lookback + horizon
    starts = range(0, series.n_samples - span + 1, stride)
    past = np.stack([series.samples[:, s:s + lookback] for s in starts]) if len(starts) else \
        np.zeros((0, series.n_channels, lookback))
    future = np.stack([series.samples[:, s + lookback:s + span] for s in starts]) if len(starts) else \
        np.zeros((0, series.n_channels, horizon))
    return past, future


def default_window_layout():
    """
    Devuelve (ventana, segmento, paso) en segundos según la configuración global.
    """
    return config.WINDOW_SECONDS, config.SEGMENT_SECONDS, config.STRIDE_SECONDS
