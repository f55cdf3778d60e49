import math
from unittest import mock

import pytest
import torch

from core import mvpa_attention
from core.bench import expected_counters
from core.errors import InvalidInputError
from core.mvpa_attention import (OpCounters, causal_window_mask, dropout_probability, efficient_mvpa_logits,
                                 gqa_kv_index, mvpa_forward, naive_mvpa_logits, shift_channel, shift_time,
                                 structured_dropout_mask)
from core.verification import random_attention


def _grid(n_channels, n_time, n_embed=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n_channels, n_time, n_embed, generator=g, dtype=torch.float64)


def _reference_forward(x, params, activation):
    """
    Pasada de atención escrita directamente sobre los logits combinados, cabeza a cabeza.
    """
    n_channels, n_time, _ = x.shape
    logits = efficient_mvpa_logits(x, params)
    scores = logits.combined / math.sqrt(params.n_embed)
    values = params.v_proj(x).reshape(n_channels * n_time, params.n_gqa, params.head_dim)
    heads = []
    for h in range(params.n_heads):
        g = gqa_kv_index(h, params.n_heads, params.n_gqa)
        if activation == "softmax":
            weights = torch.softmax(scores[h], dim=-1)
        else:
            weights = torch.sigmoid(scores[h].masked_fill(~logits.mask[h], 0.0)) * logits.mask[h]
        heads.append(weights @ values[:, g])
    out = torch.cat(heads, dim=-1).reshape(n_channels, n_time, -1)
    return params.o_proj(out)


def test_gqa_kv_index():
    assert [gqa_kv_index(h, 8, 2) for h in range(8)] == [0, 0, 0, 0, 1, 1, 1, 1]
    assert [gqa_kv_index(h, 4, 4) for h in range(4)] == [0, 1, 2, 3]
    assert {gqa_kv_index(h, 4, 1) for h in range(4)} == {0}
    with pytest.raises(InvalidInputError):
        gqa_kv_index(0, 6, 4)


def test_causal_window_mask():
    """
    Celda (c, t) → índice c·T + t. La máscara causal ignora el canal; la de contenido añade t - t' < L.
    """
    causal, content = causal_window_mask(3, 2, 2)
    assert causal.shape == (6, 6)
    # consulta (c=0, t=2), clave (c=1, t=0)
    assert causal[2, 3]
    assert not content[2, 3]
    # consulta (c=1, t=1), clave (c=0, t=0)
    assert causal[4, 0] and content[4, 0]
    # clave futura
    assert not causal[0, 1]
    assert causal.sum() == 4 * 6
    with pytest.raises(InvalidInputError):
        causal_window_mask(3, 2, 0)


def test_shift_time_sentinels():
    n_time = 5
    t = torch.arange(n_time, dtype=torch.float64)
    raw = (100 * t[:, None] + t[None, :]).expand(2, n_time, n_time)
    out = shift_time(raw)
    for i in range(n_time):
        for j in range(n_time):
            expected = 100 * i + (n_time - 1 - (i - j)) if j <= i else 0.0
            assert out[1, i, j].item() == expected
    with pytest.raises(InvalidInputError):
        shift_time(torch.zeros(3, 4))


def test_shift_channel_sentinels():
    n_channels = 4
    c = torch.arange(n_channels, dtype=torch.float64)
    j = torch.arange(2 * n_channels - 1, dtype=torch.float64)
    raw = 100 * c[:, None] + j[None, :]
    out = shift_channel(raw)
    for a in range(n_channels):
        for b in range(n_channels):
            assert out[a, b].item() == 100 * a + (n_channels - 1 - (a - b))
    with pytest.raises(InvalidInputError):
        shift_channel(torch.zeros(3, 3))


@pytest.mark.parametrize("n_time, n_channels, local_window, n_gqa", [
    (1, 1, 1, 1), (5, 3, 2, 2), (6, 6, 3, 1), (4, 2, 10, 2), (6, 1, 1, 1),
])
def test_efficient_logits_match_oracle(n_time, n_channels, local_window, n_gqa):
    params = random_attention(n_time * 7 + n_channels, n_gqa=n_gqa, local_window=local_window)
    x = _grid(n_channels, n_time, seed=n_time)
    fast = efficient_mvpa_logits(x, params)
    slow = naive_mvpa_logits(x, params, local_window=local_window)
    assert torch.equal(fast.mask, slow.mask)
    assert torch.equal(fast.content_mask, slow.content_mask)
    for name in ("content", "time", "channel"):
        diff = (getattr(fast, name) - getattr(slow, name)).masked_fill(~fast.mask, 0.0)
        assert diff.abs().max().item() < 1e-10, name
    assert torch.isneginf(fast.combined[~fast.mask]).all()


def test_content_is_zero_outside_local_window():
    params = random_attention(3, local_window=2)
    logits = efficient_mvpa_logits(_grid(2, 5), params)
    assert not logits.content[~logits.content_mask].any()
    assert logits.content[logits.content_mask].abs().min() > 0


def test_counters_follow_closed_form():
    """
    Con H=2, C=3, T=5, L=2: contenido 2·9·(5+4), tiempo 2·3·25, canal 2·5·3·5.
    """
    params = random_attention(0, n_heads=2, local_window=2)
    counters = OpCounters()
    efficient_mvpa_logits(_grid(3, 5), params, counters=counters)
    assert counters.as_row() == {"content_dots": 162, "time_dots": 150, "channel_dots": 150}
    assert counters == expected_counters(2, 3, 5, 2)

    batched = OpCounters()
    x = torch.stack([_grid(3, 5, seed=s) for s in range(4)])
    efficient_mvpa_logits(x, params, counters=batched)
    assert batched.content_dots == 4 * 162
    assert batched == expected_counters(2, 3, 5, 2, n_windows=4)


def test_counters_window_larger_than_sequence():
    params = random_attention(0, n_heads=2, local_window=10)
    counters = OpCounters()
    efficient_mvpa_logits(_grid(2, 3), params, counters=counters)
    assert counters.content_dots == 2 * 4 * (3 + 2 + 1)


def test_dropout_probability():
    p = dropout_probability(0.1)
    assert abs((1 - p) ** 2 - 0.9) < 1e-15
    assert dropout_probability(0.0) == 0.0


def test_structured_dropout_mask_drops_whole_rows_and_columns():
    mask = structured_dropout_mask(20, 20, 0.3, seed=11)
    assert mask.shape == (20, 20)
    rows = mask.any(dim=1)
    cols = mask.any(dim=0)
    assert torch.equal(mask, rows[:, None] & cols[None, :])
    assert torch.equal(mask, structured_dropout_mask(20, 20, 0.3, seed=11))
    assert structured_dropout_mask(4, 3, 0.0, seed=0).all()
    with pytest.raises(InvalidInputError):
        structured_dropout_mask(4, 3, 1.0, seed=0)


@pytest.mark.parametrize("activation", ["softmax", "sigmoid"])
def test_forward_matches_reference(activation):
    params = random_attention(5, n_heads=2, n_gqa=1, local_window=2, activation=activation)
    x = _grid(3, 4, seed=2)
    torch.testing.assert_close(mvpa_forward(x, params), _reference_forward(x, params, activation),
                               rtol=1e-10, atol=1e-12)


def test_single_cell_softmax_returns_projected_value():
    params = random_attention(1, n_heads=2, n_gqa=1)
    x = _grid(1, 1)
    value = params.v_proj(x[0, 0])
    expected = params.o_proj(torch.cat([value, value]))
    torch.testing.assert_close(mvpa_forward(x, params)[0, 0], expected, rtol=1e-12, atol=1e-12)


def test_rows_without_keys_give_zero_output():
    """
    Si el dropout elimina todas las celdas, cada fila se queda sin claves y la salida es cero (sin NaN).
    """
    params = random_attention(2, dropout_rate=0.5)
    x = _grid(2, 3)
    with mock.patch.object(mvpa_attention, "structured_dropout_mask",
                           lambda n_time, n_channels, rate, seed: torch.zeros(n_channels, n_time, dtype=torch.bool)):
        out = mvpa_forward(x, params, seed=0)
    assert not torch.isnan(out).any()
    assert not out.any()


def test_dropout_is_inactive_without_seed():
    params = random_attention(2, dropout_rate=0.9)
    x = _grid(3, 4)
    plain = random_attention(2)
    torch.testing.assert_close(mvpa_forward(x, params), mvpa_forward(x, plain), rtol=0, atol=0)
    assert not torch.equal(mvpa_forward(x, params, seed=1), mvpa_forward(x, plain))


def test_component_ablation():
    params = random_attention(4, local_window=2)
    x = _grid(2, 4)
    full = efficient_mvpa_logits(x, params)
    only_time = efficient_mvpa_logits(x, params, params.config.model_copy(update={"components": ("time",)}))
    assert not only_time.content.any()
    assert not only_time.channel.any()
    torch.testing.assert_close(only_time.time, full.time, rtol=0, atol=0)

    slow = naive_mvpa_logits(x, params, local_window=2, components=("channel",))
    assert not slow.time.any()
    diff = (slow.channel - full.channel).masked_fill(~full.mask, 0.0)
    assert diff.abs().max() < 1e-10


def test_batched_forward_matches_single_windows():
    params = random_attention(6, n_gqa=2, local_window=2)
    windows = torch.stack([_grid(3, 4, seed=s) for s in range(3)])
    batched = mvpa_forward(windows, params)
    for i in range(3):
        torch.testing.assert_close(batched[i], mvpa_forward(windows[i], params), rtol=1e-10, atol=1e-12)


def test_forward_rejects_invalid_grids():
    params = random_attention(0, max_time=6, max_channels=6)
    with pytest.raises(InvalidInputError):
        mvpa_forward(_grid(7, 2), params)
    with pytest.raises(InvalidInputError):
        mvpa_forward(_grid(2, 7), params)
    with pytest.raises(InvalidInputError):
        mvpa_forward(_grid(2, 2, n_embed=6), params)
    with pytest.raises(InvalidInputError):
        naive_mvpa_logits(torch.stack([_grid(2, 2)] * 2), params)


def _plain_attention(x, params):
    """
    softmax(QKᵀ/√d)·V cabeza a cabeza sobre las celdas aplanadas, con la máscara causal t' <= t.
    """
    n_channels, n_time, n_embed = x.shape
    dh = params.head_dim
    flat = x.reshape(n_channels * n_time, n_embed)
    cell_t = torch.arange(n_channels * n_time) % n_time
    causal = cell_t[None, :] <= cell_t[:, None]
    heads = []
    for h in range(params.n_heads):
        g = gqa_kv_index(h, params.n_heads, params.n_gqa)
        q = flat @ params.q_proj.weight[h * dh:(h + 1) * dh].T
        k = flat @ params.ke_proj.weight[g * dh:(g + 1) * dh].T
        v = flat @ params.v_proj.weight[g * dh:(g + 1) * dh].T
        scores = (q @ k.T / math.sqrt(n_embed)).masked_fill(~causal, float("-inf"))
        heads.append(torch.softmax(scores, dim=-1) @ v)
    return params.o_proj(torch.cat(heads, dim=-1)).reshape(n_channels, n_time, n_embed)


@pytest.mark.parametrize("n_channels, n_time, n_gqa", [(1, 1, 1), (3, 4, 2), (2, 6, 4), (5, 2, 1)])
def test_vanilla_forward_matches_plain_attention(n_channels, n_time, n_gqa):
    params = random_attention(7, n_heads=4, n_gqa=n_gqa, local_window=2, variant="vanilla")
    x = _grid(n_channels, n_time, seed=3)
    torch.testing.assert_close(mvpa_forward(x, params), _plain_attention(x, params), rtol=1e-10, atol=1e-12)


def test_vanilla_has_no_relative_parameters_or_window():
    params = random_attention(8, local_window=1, variant="vanilla")
    names = {name for name, _ in params.named_parameters()}
    assert names == {"q_proj.weight", "ke_proj.weight", "v_proj.weight", "o_proj.weight"}
    x = _grid(2, 4)
    counters = OpCounters()
    logits = mvpa_attention.vanilla_logits(x, params, counters)
    assert not logits.time.any() and not logits.channel.any()
    assert counters.content_dots == 2 * (2 * 4) ** 2
    # t - t' = 3 queda fuera de cualquier ventana de contenido MVPA con L = 1
    assert logits.content_mask[0, 3, 0]
    assert torch.isfinite(logits.combined[0, 3, 4])
    assert torch.isinf(logits.combined[0, 0, 1])
    with pytest.raises(InvalidInputError):
        efficient_mvpa_logits(x, params)
    with pytest.raises(InvalidInputError):
        naive_mvpa_logits(x, params)


def test_vanilla_config_on_mvpa_parameters_ignores_relative_terms():
    mvpa = random_attention(9, n_gqa=2)
    x = _grid(3, 3, seed=4)
    vanilla_config = mvpa.config.model_copy(update={"variant": "vanilla"})
    torch.testing.assert_close(mvpa_forward(x, mvpa, vanilla_config), _plain_attention(x, mvpa),
                               rtol=1e-10, atol=1e-12)
