from unittest import mock

import numpy as np
import pytest
import torch

from core import mvpa_attention, verification
from core.bench import BENCH_COLUMNS, bench_attention, expected_counters
from core.errors import InvalidInputError
from core.verification import CHECKS, VerifySettings, run_checks


@pytest.fixture(scope="module")
def quick_settings():
    return VerifySettings(instances=2, causality_trials=5, dropout_draws=2000, seed=0)


def test_all_checks_pass(quick_settings):
    results = run_checks(quick_settings)
    assert [r.name for r in results] == list(CHECKS)
    failed = {r.name: r.error for r in results if r.status == "FAILED"}
    assert not failed
    assert all(r.detail for r in results)


def test_shift_time_fault_is_detected(quick_settings):
    """
    Con el desplazamiento de tiempo corrompido, la equivalencia con el oráculo debe fallar; al salir se restaura.
    """
    original = mvpa_attention.shift_time
    settings = quick_settings.model_copy(update={"checks": ["oracle_equivalence"], "fault": "shift_time"})
    results = run_checks(settings)
    assert results[0].status == "FAILED"
    assert "diferencia" in results[0].error
    assert mvpa_attention.shift_time is original

    clean = run_checks(quick_settings.model_copy(update={"checks": ["oracle_equivalence"]}))
    assert clean[0].status == "PASSED"


def test_run_checks_rejects_unknown_names():
    with pytest.raises(InvalidInputError):
        run_checks(VerifySettings(checks=["no_existe"]))
    with pytest.raises(InvalidInputError):
        run_checks(VerifySettings(checks=["wavelet"], fault="no_existe"))


def test_bench_attention_counters():
    df = bench_attention([2, 4, 8], [3], n_heads=2, n_gqa=1, n_embed=8, local_window=2, repeats=1)
    assert list(df.columns) == BENCH_COLUMNS
    assert len(df) == 3
    time_dots = df["time_dots"].tolist()
    assert time_dots[1] == 4 * time_dots[0]
    assert time_dots[2] == 4 * time_dots[1]
    last = df.iloc[-1]
    assert last["content_dots"] == expected_counters(2, 3, 8, 2).content_dots
    assert (df["efficient_ns"] > 0).all()
    assert (df["naive_ns"] > 0).all()


def test_bench_attention_memory_limit_reports_counters_only():
    df = bench_attention([4], [2, 3], n_heads=2, n_gqa=1, n_embed=8, repeats=1, memory_limit=0)
    assert df["naive_ns"].isna().all()
    assert df["efficient_ns"].isna().all()
    assert df["channel_dots"].tolist() == [2 * 4 * 2 * 3, 2 * 4 * 3 * 5]


def test_bench_attention_rejects_empty_lists():
    with pytest.raises(InvalidInputError):
        bench_attention([], [1])
    with pytest.raises(InvalidInputError):
        bench_attention([1], [0])
    assert np.isnan(bench_attention([1], [1], n_heads=2, n_gqa=1, n_embed=8, repeats=1,
                                    memory_limit=0)["naive_ns"].iloc[0])


def test_kappa_and_optimizer_checks(quick_settings):
    results = run_checks(quick_settings.model_copy(update={"checks": ["kappa_independent", "optimizer"]}))
    assert [r.status for r in results] == ["PASSED", "PASSED"]
    assert "independientes" in results[0].detail
    assert "cuadrática" in results[1].detail


def test_optimizer_check_detects_plain_gradient_descent(quick_settings):
    def sgd_step(params, grads, state):
        with torch.no_grad():
            for param, grad in zip(params, grads):
                param -= state.lr * grad
        return state

    with mock.patch.object(verification, "adamw_step", sgd_step):
        results = run_checks(quick_settings.model_copy(update={"checks": ["optimizer"]}))
    assert results[0].status == "FAILED"
    assert "AdamW" in results[0].error


def test_kappa_check_detects_a_biased_estimator(quick_settings):
    with mock.patch.object(verification, "cohen_kappa", lambda a, b: 0.3):
        results = run_checks(quick_settings.model_copy(update={"checks": ["kappa_independent"]}))
    assert results[0].status == "FAILED"
