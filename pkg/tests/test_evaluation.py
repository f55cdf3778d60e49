import numpy as np
import pytest

from core.data_model import EventList
from core.errors import InvalidInputError
from core.evaluation import (cohen_kappa, detection_latencies, detection_metrics, episodic_postprocess,
                             forecast_metrics, kappa_estimate, landis_koch, merge_close_truth_events,
                             online_threshold, raw_metrics)


def test_episodic_merges_close_events():
    result = episodic_postprocess(EventList(events=[(0.0, 30.0), (200.0, 240.0)]))
    assert result.events == [(0.0, 240.0)]
    assert result.positives == [70]


def test_episodic_filters():
    assert episodic_postprocess(EventList(events=[(0.0, 15.0)])).events == []
    assert episodic_postprocess(EventList()).events == []
    # 25 s pero solo 4 respuestas positivas
    assert episodic_postprocess(EventList(events=[(0.0, 25.0)], positives=[4])).events == []
    kept = episodic_postprocess(EventList(events=[(0.0, 25.0), (1000.0, 1030.0)], positives=[5, 9]))
    assert kept.events == [(0.0, 25.0), (1000.0, 1030.0)]


def test_episodic_merge_happens_before_filters():
    """
    Dos eventos cortos y con pocos positivos sobreviven si, una vez fusionados, cumplen los dos umbrales.
    """
    events = EventList(events=[(0.0, 10.0), (100.0, 110.0)], positives=[3, 3])
    assert episodic_postprocess(events).events == [(0.0, 110.0)]


def test_episodic_rejects_misaligned_positives():
    with pytest.raises(InvalidInputError):
        episodic_postprocess(EventList(events=[(0.0, 30.0)]), positives_per_event=[1, 2])


def _random_events(rng):
    n = int(rng.integers(0, 12))
    events, start = [], 0.0
    for gap in rng.integers(1, 600, n):
        begin = start + float(gap)
        end = begin + float(rng.integers(1, 120))
        events.append((begin, end))
        start = end
    return EventList(events=events, positives=[int(k) for k in rng.integers(0, 20, n)])


@pytest.mark.repeat(10)
def test_episodic_is_idempotent(request):
    """
    1000 listas aleatorias en total: 100 por repetición, con una semilla distinta en cada una.
    """
    callspec = getattr(request.node, "callspec", None)
    step = callspec.params.get("__pytest_repeat_step_number", 0) if callspec else 0
    rng = np.random.default_rng(2024 + step)
    for _ in range(100):
        once = episodic_postprocess(_random_events(rng))
        assert episodic_postprocess(once) == once


def test_merge_close_truth_events():
    merged = merge_close_truth_events(EventList(events=[(0.0, 10.0), (50.0, 60.0), (200.0, 210.0)]))
    assert merged.events == [(0.0, 60.0), (200.0, 210.0)]


def test_online_threshold():
    bits = np.zeros(60, dtype=int)
    bits[[5, 30]] = 1
    assert online_threshold(bits).events == []

    bits = np.zeros(40, dtype=int)
    bits[10:20] = 1
    events = online_threshold(bits)
    assert events.events == [(10.0, 20.0)]
    assert events.positives == [10]
    # La regla dispara en el tercer segundo positivo
    assert detection_latencies(bits) == [3.0]

    alternating = np.tile([1, 0], 20)
    assert len(online_threshold(alternating).events) == 1


def test_online_threshold_separate_runs():
    bits = np.zeros(80, dtype=int)
    bits[0:5] = 1
    bits[50:55] = 1
    assert online_threshold(bits).events == [(0.0, 5.0), (50.0, 55.0)]


def test_cohen_kappa_cases():
    assert cohen_kappa([1, 0, 1, 1], [1, 0, 1, 1]) == 1.0
    assert cohen_kappa([1, 1, 0, 0], [1, 0, 1, 0]) == 0.0
    assert cohen_kappa([0, 0, 0], [0, 0, 0]) == 1.0
    assert cohen_kappa([1, 1, 1], [0, 0, 0]) == 0.0
    with pytest.raises(InvalidInputError):
        cohen_kappa([1, 0], [1])


def test_cohen_kappa_matches_contingency_table():
    """
    a: 20 positivos y 5 negativos; b: 10 positivos y 15 negativos, con 8 positivos comunes.
    """
    a = np.array([1] * 20 + [0] * 5)
    b = np.array([1] * 8 + [0] * 12 + [1] * 2 + [0] * 3)
    n = len(a)
    both_pos = np.sum((a == 1) & (b == 1))
    both_neg = np.sum((a == 0) & (b == 0))
    p_o = (both_pos + both_neg) / n
    p_e = (a.sum() / n) * (b.sum() / n) + ((n - a.sum()) / n) * ((n - b.sum()) / n)
    assert cohen_kappa(a, b) == pytest.approx((p_o - p_e) / (1 - p_e), abs=1e-15)
    assert cohen_kappa(a, b) == pytest.approx(cohen_kappa(b, a), abs=1e-15)


def test_kappa_estimate_identical_labels():
    labels = np.random.default_rng(0).integers(0, 2, 5000)
    estimate = kappa_estimate(labels, labels, seed=3)
    assert estimate.kappa == 1.0
    assert all(value == 1.0 for value in estimate.running_means)
    assert len(estimate.running_means) == 250
    assert len(estimate.deltas) == 249


def test_kappa_estimate_independent_labels_converges():
    rng = np.random.default_rng(7)
    pred, truth = rng.integers(0, 2, (2, 10_000))
    estimate = kappa_estimate(pred, truth, seed=1)
    assert abs(estimate.kappa) < 0.05
    assert estimate.deltas[-1] < 0.005
    assert estimate == kappa_estimate(pred, truth, seed=1)


def test_kappa_estimate_short_recording_samples_with_replacement():
    labels = np.array([0, 1, 1, 0, 1])
    assert kappa_estimate(labels, labels, n_segments=300, iterations=3).kappa == 1.0
    with pytest.raises(InvalidInputError):
        kappa_estimate(labels, labels[:4])


@pytest.mark.parametrize("kappa, band", [
    (-0.1, "poor"), (0.1, "slight"), (0.3, "fair"), (0.57, "moderate"), (0.7, "substantial"), (0.95, "almost perfect"),
])
def test_landis_koch(kappa, band):
    assert landis_koch(kappa) == band


def test_detection_metrics():
    truth = [(10.0, 40.0), (100.0, 150.0)]
    perfect = detection_metrics(truth, truth, 1.0)
    assert perfect.f1 == 1.0 and perfect.fp_per_hour == 0.0

    empty = detection_metrics([], truth, 1.0)
    assert empty.sensitivity == 0.0 and empty.f1 == 0.0

    mixed = detection_metrics([(20.0, 30.0), (500.0, 520.0)], truth, 2.0)
    assert mixed.fp_per_hour == 0.5
    assert mixed.sensitivity == 0.5
    assert mixed.precision == 0.5
    assert detection_metrics([(500.0, 520.0), (20.0, 30.0)], truth[::-1], 2.0) == mixed

    with pytest.raises(InvalidInputError):
        detection_metrics(truth, truth, 0.0)


def test_raw_metrics():
    metrics = raw_metrics([1, 1, 0, 0, 1], [1, 0, 0, 1, 1])
    assert metrics.f1 == pytest.approx(2 * 2 / (2 * 2 + 1 + 1))
    assert metrics.sensitivity == pytest.approx(2 / 3)
    assert metrics.specificity == pytest.approx(1 / 2)
    with pytest.raises(InvalidInputError):
        raw_metrics([1, 0], [1])


def test_forecast_metrics(rng):
    truth = rng.standard_normal((3, 2, 8))
    assert forecast_metrics(truth, truth).model_dump() == {"mse": 0.0, "mae": 0.0}
    shifted = forecast_metrics(truth + 2.0, truth)
    assert shifted.mse == pytest.approx(4.0, abs=1e-12)
    assert shifted.mae == pytest.approx(2.0, abs=1e-12)

    pred = rng.standard_normal((3, 2, 8))
    squared, absolute = 0.0, 0.0
    for p, t in zip(pred.ravel(), truth.ravel()):
        squared += (p - t) ** 2
        absolute += abs(p - t)
    metrics = forecast_metrics(pred, truth)
    assert metrics.mse == pytest.approx(squared / truth.size, abs=1e-12)
    assert metrics.mae == pytest.approx(absolute / truth.size, abs=1e-12)
    with pytest.raises(InvalidInputError):
        forecast_metrics(pred, truth[..., :4])
