import math

import numpy as np

import config
from core.data_model import DetectionMetrics, EventList, ForecastMetrics, KappaEstimate, RawMetrics
from core.errors import InvalidInputError
from core.logger import get_logger
from core.rng import philox

logger = get_logger(__name__)

# Bandas de acuerdo: límite superior (inclusivo) de cada banda
_LANDIS_KOCH = [(0.20, "slight"), (0.40, "fair"), (0.60, "moderate"), (0.80, "substantial"), (1.00, "almost perfect")]


def _merge(events, positives, gap_s):
    merged, merged_positives = [], []
    for (start, end), count in zip(events, positives):
        if merged and start - merged[-1][1] < gap_s:
            merged[-1] = (merged[-1][0], max(merged[-1][1], end))
            merged_positives[-1] += count
        else:
            merged.append((start, end))
            merged_positives.append(count)
    return merged, merged_positives


def episodic_postprocess(raw_events, positives_per_event=None, merge_gap_s=config.MERGE_GAP_SECONDS,
                         min_event_s=config.MIN_EVENT_SECONDS, min_positives=config.MIN_EVENT_POSITIVES):
    """
    Post-procesado episódico de eventos detectados, en este orden fijo:
    1. Fusiona eventos separados por menos de `merge_gap_s` segundos (sumando sus respuestas positivas).
    2. Elimina los eventos de duración inferior a `min_event_s`.
    3. Elimina los eventos con menos de `min_positives` respuestas positivas.

    Parámetros:
    - raw_events (EventList): Eventos ordenados.
    - positives_per_event (list[int] | None): Respuestas positivas por evento. Por defecto se usan las de
      `raw_events.positives` y, si no existen, un positivo por segundo de evento.

    Retorna:
    - EventList: Eventos resultantes con su número de positivos; aplicar la función dos veces no cambia nada.
    """
    events = list(raw_events.events)
    if positives_per_event is None:
        positives_per_event = raw_events.positives
    if positives_per_event is None:
        positives_per_event = [int(math.ceil(end - start)) for start, end in events]
    if len(positives_per_event) != len(events):
        raise InvalidInputError(f"{len(events)} eventos pero {len(positives_per_event)} recuentos de positivos")

    merged, positives = _merge(events, list(positives_per_event), merge_gap_s)
    kept = [(event, count) for event, count in zip(merged, positives)
            if event[1] - event[0] >= min_event_s and count >= min_positives]
    return EventList(events=[event for event, _ in kept], positives=[count for _, count in kept],
                     recording_hours=raw_events.recording_hours)


def merge_close_truth_events(events, gap_s=60.0):
    """
    Une los eventos anotados que están a menos de `gap_s` segundos (un minuto por defecto) como un único evento.
    """
    merged, _ = _merge(list(events.events), [0] * len(events.events), gap_s)
    return EventList(events=merged, recording_hours=events.recording_hours)


def _online_runs(labels, window_s, min_positives):
    # Cada run: (primer positivo, fin del último positivo, segundo en que la regla dispara por primera vez)
    bits = np.asarray(labels).astype(np.int64)
    if bits.size == 0:
        return []
    counts = np.convolve(bits, np.ones(window_s, dtype=np.int64))[:len(bits)]
    firing = counts >= min_positives
    runs = []
    s = 0
    while s < len(bits):
        if not firing[s]:
            s += 1
            continue
        first_fire = s
        while s + 1 < len(bits) and firing[s + 1]:
            s += 1
        window_start = max(0, first_fire - window_s + 1)
        onset = window_start + int(np.flatnonzero(bits[window_start:first_fire + 1])[0])
        if runs:
            onset = max(onset, runs[-1][1])
        last_window = bits[max(0, s - window_s + 1):s + 1]
        end = max(0, s - window_s + 1) + int(np.flatnonzero(last_window)[-1]) + 1
        runs.append((onset, end, first_fire, int(bits[onset:end].sum())))
        s += 1
    return runs


def online_threshold(labels, window_s=config.ONLINE_WINDOW_SECONDS, min_positives=config.ONLINE_MIN_POSITIVES):
    """
    Umbral en línea: una detección se produce cuando una ventana deslizante de `window_s` segundos contiene al
    menos `min_positives` segundos positivos. Las ventanas que disparan de forma consecutiva forman un solo evento.

    El evento empieza en el primer segundo positivo de la primera ventana que dispara y termina tras el último
    segundo positivo de la última; el retraso de notificación se obtiene con `detection_latencies`.

    Parámetros:
    - labels (array): Etiquetas binarias por segundo.

    Retorna:
    - EventList: Eventos detectados, con sus segundos positivos.
    """
    runs = _online_runs(labels, window_s, min_positives)
    return EventList(events=[(float(onset), float(end)) for onset, end, _, _ in runs],
                     positives=[count for _, _, _, count in runs],
                     recording_hours=len(labels) / 3600.0)


def detection_latencies(labels, window_s=config.ONLINE_WINDOW_SECONDS, min_positives=config.ONLINE_MIN_POSITIVES):
    """
    Retraso de notificación (s) de cada evento de `online_threshold`: fin del segundo en que la regla dispara por
    primera vez menos el inicio del evento.
    """
    return [float(fire + 1 - onset) for onset, _, fire, _ in _online_runs(labels, window_s, min_positives)]


def cohen_kappa(a, b):
    """
    Kappa de Cohen: (p_o - p_e) / (1 - p_e), con p_e el acuerdo esperado según las marginales.

    Si p_e = 1 (ambos etiquetadores constantes) se devuelve 1 cuando coinciden y 0 en caso contrario.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise InvalidInputError(f"se esperaban dos vectores de etiquetas no vacíos de igual longitud: {a.shape}, {b.shape}")
    p_o = float(np.mean(a == b))
    classes = np.union1d(a, b)
    p_e = float(sum(np.mean(a == k) * np.mean(b == k) for k in classes))
    if p_e >= 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return (p_o - p_e) / (1.0 - p_e)


def kappa_estimate(pred, truth, n_segments=config.KAPPA_SEGMENTS, iterations=config.KAPPA_ITERATIONS, seed=0):
    """
    Estimación muestral de kappa: en cada iteración se toman `n_segments` segundos al azar y se calcula kappa
    sobre esa muestra; el resultado es la media acumulada.

    Parámetros:
    - pred (array): Etiquetas predichas por segundo.
    - truth (array): Etiquetas reales por segundo.
    - n_segments (int): Segundos por muestra (300).
    - iterations (int): Número de muestras (250).
    - seed (int): Semilla; cada iteración usa su propio sub-flujo.

    Retorna:
    - KappaEstimate: Media final, medias acumuladas y variación absoluta entre medias consecutivas.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.size == 0:
        raise InvalidInputError("pred y truth deben ser vectores no vacíos de igual longitud")
    if iterations < 1 or n_segments < 1:
        raise InvalidInputError("iterations y n_segments deben ser positivos")
    replace = pred.size < n_segments
    if replace:
        logger.warning(f"Solo hay {pred.size} segundos para muestras de {n_segments}: se muestrea con reemplazo")

    kappas = np.empty(iterations)
    for i in range(iterations):
        positions = philox(seed, "kappa", i).choice(pred.size, n_segments, replace=replace)
        kappas[i] = cohen_kappa(pred[positions], truth[positions])
    running = np.cumsum(kappas) / np.arange(1, iterations + 1)
    deltas = np.abs(np.diff(running))
    return KappaEstimate(kappa=float(running[-1]), running_means=running.tolist(), deltas=deltas.tolist())


def landis_koch(kappa):
    """
    Banda cualitativa de acuerdo para un valor de kappa; los valores negativos son "poor".
    """
    if kappa < 0:
        return "poor"
    for upper, band in _LANDIS_KOCH:
        if kappa <= upper:
            return band
    return _LANDIS_KOCH[-1][1]


def _as_intervals(events):
    return list(events.events) if isinstance(events, EventList) else [tuple(e) for e in events]


def _overlaps(a, b):
    return a[0] < b[1] and b[0] < a[1]


def detection_metrics(pred_events, truth_events, recording_hours):
    """
    Métricas por evento: un evento real está detectado si alguna predicción se solapa con él; una predicción que
    no se solapa con ningún evento real es un falso positivo.

    Parámetros:
    - pred_events (EventList | list[tuple]): Eventos predichos (en cualquier orden).
    - truth_events (EventList | list[tuple]): Eventos reales (en cualquier orden).
    - recording_hours (float): Duración de la grabación en horas (> 0).

    Retorna:
    - DetectionMetrics: F1, sensibilidad, precisión, falsos positivos por hora y recuentos.
    """
    if recording_hours <= 0:
        raise InvalidInputError(f"recording_hours debe ser positivo, se recibió {recording_hours}")
    pred = _as_intervals(pred_events)
    truth = _as_intervals(truth_events)

    detected = sum(1 for t in truth if any(_overlaps(p, t) for p in pred))
    matched_pred = sum(1 for p in pred if any(_overlaps(p, t) for t in truth))
    false_positives = len(pred) - matched_pred

    sensitivity = detected / len(truth) if truth else 1.0
    if pred:
        precision = matched_pred / len(pred)
    else:
        precision = 1.0 if not truth else 0.0
    f1 = 2 * precision * sensitivity / (precision + sensitivity) if precision + sensitivity > 0 else 0.0
    return DetectionMetrics(f1=f1, sensitivity=sensitivity, precision=precision,
                            fp_per_hour=false_positives / recording_hours,
                            true_positives=detected, false_positives=false_positives)


def raw_metrics(pred_seconds, truth_seconds):
    """
    F1, sensibilidad y especificidad por segundo, sin post-procesado.
    """
    pred = np.asarray(pred_seconds).astype(bool)
    truth = np.asarray(truth_seconds).astype(bool)
    if pred.shape != truth.shape:
        raise InvalidInputError(f"formas distintas: {pred.shape} frente a {truth.shape}")
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    tn = int(np.sum(~pred & ~truth))
    sensitivity = tp / (tp + fn) if tp + fn else 1.0
    specificity = tn / (tn + fp) if tn + fp else 1.0
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 1.0
    return RawMetrics(f1=f1, sensitivity=sensitivity, specificity=specificity)


def forecast_metrics(pred, truth):
    """
    Error cuadrático medio y error absoluto medio elemento a elemento.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise InvalidInputError(f"formas distintas: {pred.shape} frente a {truth.shape}")
    error = pred - truth
    return ForecastMetrics(mse=float(np.mean(error ** 2)), mae=float(np.mean(np.abs(error))))
