import math

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict
from torch import nn

from core.data_model import AttentionConfig
from core.errors import InvalidInputError
from core.rng import philox

# Convenciones de índices:
# - Una rejilla de embeddings tiene forma [..., C, T, d]; la celda (c, t) se aplana como c·T + t.
# - La columna j del tensor de tiempo sin desplazar corresponde al desfase t - t' = T-1-j.
# - La columna j del tensor de canal sin desplazar corresponde al desfase c - c' = C-1-j.
# - El libro de canales tiene 2·C_max-1 filas; la fila C_max-1+δ guarda el desfase δ.


class OpCounters(BaseModel):
    """
    Contadores de productos escalares realizados por cada componente de MVPA durante una pasada.
    """

    content_dots: int = 0
    time_dots: int = 0
    channel_dots: int = 0

    def as_row(self):
        return {"content_dots": self.content_dots, "time_dots": self.time_dots, "channel_dots": self.channel_dots}


class AttentionLogits(BaseModel):
    """
    Logits por cabeza [..., H, C·T, C·T] descompuestos en contenido, tiempo y canal.

    `combined` vale content + time + channel donde `mask` es verdadero y -inf en el resto.
    `content` es cero fuera de la ventana local (`content_mask`).
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    content: torch.Tensor
    time: torch.Tensor
    channel: torch.Tensor
    combined: torch.Tensor
    mask: torch.Tensor
    content_mask: torch.Tensor


def gqa_kv_index(h, n_heads, n_groups):
    """
    Grupo clave/valor que usa la cabeza de consulta `h`: las cabezas consecutivas comparten grupo.
    """
    if n_heads % n_groups != 0:
        raise InvalidInputError(f"n_heads={n_heads} no es divisible por n_groups={n_groups}")
    return h // (n_heads // n_groups)


def causal_window_mask(n_time, n_channels, local_window):
    """
    Máscaras de atención sobre celdas aplanadas (c·T + t).

    Parámetros:
    - n_time (int): T.
    - n_channels (int): C.
    - local_window (int): L (>= 1), ventana de la componente de contenido.

    Retorna:
    - tuple[torch.Tensor, torch.Tensor]: (causal, content), booleanas [C·T × C·T]. `causal` permite t' <= t para
      todas las componentes; `content` añade t - t' < L solo para la componente de contenido.
    """
    if local_window < 1:
        raise InvalidInputError(f"local_window debe ser >= 1, se recibió {local_window}")
    t = torch.arange(n_time)
    offsets = t[:, None] - t[None, :]
    causal_tt = offsets >= 0
    content_tt = causal_tt & (offsets < local_window)
    full = (n_channels, n_time, n_channels, n_time)
    causal = causal_tt[None, :, None, :].expand(full).reshape(n_channels * n_time, n_channels * n_time)
    content = content_tt[None, :, None, :].expand(full).reshape(n_channels * n_time, n_channels * n_time)
    return causal, content


def dropout_probability(rate):
    """
    Probabilidad de eliminar cada canal y cada instante para que la fracción esperada de celdas eliminadas sea `rate`.
    """
    return 1.0 - math.sqrt(1.0 - rate)


def structured_dropout_mask(n_time, n_channels, rate, seed):
    """
    Máscara de conservación por celda que elimina canales e instantes completos.

    Parámetros:
    - n_time (int): T.
    - n_channels (int): C.
    - rate (float): Tasa de dropout r en [0, 1).
    - seed (int): Semilla del sorteo.

    Retorna:
    - torch.Tensor: Booleana [C × T]; False en las celdas cuyo canal o cuyo instante se ha eliminado.
    """
    if not 0.0 <= rate < 1.0:
        raise InvalidInputError(f"la tasa de dropout debe estar en [0, 1), se recibió {rate}")
    if rate == 0.0:
        return torch.ones(n_channels, n_time, dtype=torch.bool)
    p = dropout_probability(rate)
    rng = philox(seed, "structured_dropout")
    drop_channel = torch.from_numpy(rng.random(n_channels) < p)
    drop_time = torch.from_numpy(rng.random(n_time) < p)
    return ~(drop_channel[:, None] | drop_time[None, :])


def shift_time(raw):
    """
    Desplazamiento relativo en tiempo (truco de Transformer-XL).

    Parámetros:
    - raw (torch.Tensor): [..., T, T]; fila t = instante de la consulta, columna j = desfase T-1-j.

    Retorna:
    - torch.Tensor: [..., T, T] indexado por (t, t'), con out[t, t'] = raw[t, T-1-(t-t')] y el triángulo
      superior (futuro) a cero.
    """
    *lead, n_time, width = raw.shape
    if width != n_time:
        raise InvalidInputError(f"shift_time espera T desfases, se recibieron {width} para T={n_time}")
    padded = F.pad(raw, (1, 0))
    shifted = padded.reshape(*lead, n_time + 1, n_time)[..., 1:, :]
    future = torch.ones(n_time, n_time, dtype=torch.bool, device=raw.device).triu(1)
    return shifted.masked_fill(future, 0.0)


def shift_channel(raw):
    """
    Desplazamiento relativo en canales: out[c, c'] = raw[c, C-1-(c-c')], sin anular ningún elemento.

    Parámetros:
    - raw (torch.Tensor): [..., C, 2C-1].

    Retorna:
    - torch.Tensor: [..., C, C] indexado por (c, c').
    """
    *lead, n_channels, width = raw.shape
    if width != 2 * n_channels - 1:
        raise InvalidInputError(f"shift_channel espera 2C-1={2 * n_channels - 1} desfases, se recibieron {width}")
    c = torch.arange(n_channels, device=raw.device)
    index = (n_channels - 1 - c[:, None] + c[None, :]).expand(*lead, n_channels, n_channels)
    return torch.gather(raw, -1, index)


class MultiVariateParallelAttention(nn.Module):
    """
    Parámetros de MVPA: proyecciones de consulta, claves (contenido, tiempo, canal), valor y salida, los libros de
    códigos de desfases de tiempo y canal, y los sesgos u, v, w por grupo clave/valor.

    Con la variante "vanilla" solo se crean las proyecciones de consulta, clave de contenido, valor y salida.
    """

    def __init__(self, n_embed, n_heads, n_gqa, max_time, max_channels, attention_config=None, init_std=0.02):
        super().__init__()
        if n_heads % n_gqa != 0:
            raise InvalidInputError(f"n_heads={n_heads} debe ser divisible por n_gqa={n_gqa}")
        if n_embed % n_heads != 0:
            raise InvalidInputError(f"n_embed={n_embed} debe ser divisible por n_heads={n_heads}")
        self.n_embed = n_embed
        self.n_heads = n_heads
        self.n_gqa = n_gqa
        self.head_dim = n_embed // n_heads
        self.max_time = max_time
        self.max_channels = max_channels
        self.config = attention_config or AttentionConfig()

        kv_dim = n_gqa * self.head_dim
        self.q_proj = nn.Linear(n_embed, n_heads * self.head_dim, bias=False)
        self.ke_proj = nn.Linear(n_embed, kv_dim, bias=False)
        self.v_proj = nn.Linear(n_embed, kv_dim, bias=False)
        self.o_proj = nn.Linear(n_heads * self.head_dim, n_embed, bias=False)
        if self.config.variant == "mvpa":
            self.kt_proj = nn.Linear(n_embed, kv_dim, bias=False)
            self.kc_proj = nn.Linear(n_embed, kv_dim, bias=False)
            self.time_codebook = nn.Parameter(torch.empty(max_time, n_embed))
            self.channel_codebook = nn.Parameter(torch.empty(2 * max_channels - 1, n_embed))
            self.u = nn.Parameter(torch.empty(n_gqa, self.head_dim))
            self.v = nn.Parameter(torch.empty(n_gqa, self.head_dim))
            self.w = nn.Parameter(torch.empty(n_gqa, self.head_dim))
        self.register_buffer("group_index",
                             torch.tensor([gqa_kv_index(h, n_heads, n_gqa) for h in range(n_heads)]),
                             persistent=False)
        self.reset_parameters(init_std)

    def reset_parameters(self, init_std=0.02):
        for parameter in self.parameters():
            nn.init.normal_(parameter, mean=0.0, std=init_std)

    def forward(self, embeddings, seed=None, counters=None):
        return mvpa_forward(embeddings, self, self.config, seed=seed, counters=counters)


def _check_grid(embeddings, params):
    if embeddings.dim() < 3:
        raise InvalidInputError(f"se esperaba una rejilla [..., C, T, d], se recibió {tuple(embeddings.shape)}")
    n_channels, n_time, n_embed = embeddings.shape[-3:]
    if n_embed != params.n_embed:
        raise InvalidInputError(f"d={n_embed} no coincide con n_embed={params.n_embed}")
    if n_channels > params.max_channels:
        raise InvalidInputError(f"C={n_channels} supera C_max={params.max_channels}")
    if n_time > params.max_time:
        raise InvalidInputError(f"T={n_time} supera T_max={params.max_time}")
    return n_channels, n_time


def _heads(projection, embeddings, n_heads_out, head_dim, group_index=None):
    # [..., C, T, n·dh] -> [..., H, C, T, dh]
    out = projection(embeddings).unflatten(-1, (n_heads_out, head_dim)).movedim(-2, -4)
    if group_index is not None:
        out = out.index_select(-4, group_index)
    return out


def naive_mvpa_logits(embeddings, params, local_window=None, components=("content", "time", "channel")):
    """
    Oráculo de referencia: evalúa la fórmula expandida de MVPA para cada par (consulta, clave) por separado.

    Cada término se calcula con las matrices de pesos completas, sin desplazamientos ni difusión: el coste es
    O(T²C²) por construcción.

    Parámetros:
    - embeddings (torch.Tensor): Rejilla [C × T × d].
    - params (MultiVariateParallelAttention): Parámetros.
    - local_window (int | None): Si se indica, la componente de contenido solo cuenta cuando t - t' < L.
    - components (tuple[str]): Componentes incluidas.

    Retorna:
    - AttentionLogits: Logits [H × C·T × C·T].
    """
    if embeddings.dim() != 3:
        raise InvalidInputError("el oráculo ingenuo solo admite una rejilla [C × T × d]")
    if not hasattr(params, "kt_proj"):
        raise InvalidInputError("los parámetros de atención vanilla no tienen libros de códigos para MVPA")
    n_channels, n_time = _check_grid(embeddings, params)
    H, dh = params.n_heads, params.head_dim
    n_cells = n_channels * n_time
    x = embeddings.reshape(n_cells, -1)
    cell_c = torch.arange(n_cells) // n_time
    cell_t = torch.arange(n_cells) % n_time

    # Pares (consulta, clave) explícitos
    dt = cell_t[:, None] - cell_t[None, :]
    dc = cell_c[:, None] - cell_c[None, :]
    causal = dt >= 0
    content_mask = causal if local_window is None else causal & (dt < local_window)
    time_vectors = params.time_codebook[dt.clamp(min=0)]
    channel_vectors = params.channel_codebook[dc + params.max_channels - 1]

    content = torch.zeros(H, n_cells, n_cells, dtype=x.dtype)
    time = torch.zeros_like(content)
    channel = torch.zeros_like(content)
    for h in range(H):
        g = gqa_kv_index(h, H, params.n_gqa)
        W_q = params.q_proj.weight[h * dh:(h + 1) * dh]
        W_ke = params.ke_proj.weight[g * dh:(g + 1) * dh]
        W_kt = params.kt_proj.weight[g * dh:(g + 1) * dh]
        W_kc = params.kc_proj.weight[g * dh:(g + 1) * dh]
        u, v, w = params.u[g], params.v[g], params.w[g]
        if "content" in components:
            bilinear = W_q.T @ W_ke
            content[h] = torch.einsum("id,de,je->ij", x, bilinear, x) + torch.einsum("e,je->j", u @ W_ke, x)[None, :]
        if "time" in components:
            bilinear = W_q.T @ W_kt
            time[h] = torch.einsum("id,de,ije->ij", x, bilinear, time_vectors) + \
                torch.einsum("e,ije->ij", v @ W_kt, time_vectors)
        if "channel" in components:
            bilinear = W_q.T @ W_kc
            channel[h] = torch.einsum("id,de,ije->ij", x, bilinear, channel_vectors) + \
                torch.einsum("e,ije->ij", w @ W_kc, channel_vectors)

    content = content * content_mask
    time = time * causal
    combined = (content + time + channel).masked_fill(~causal, float("-inf"))
    return AttentionLogits(content=content, time=time, channel=channel, combined=combined,
                           mask=causal.expand(H, -1, -1), content_mask=content_mask.expand(H, -1, -1))


def efficient_mvpa_logits(embeddings, params, attention_config=None, counters=None):
    """
    Cálculo eficiente de los logits de MVPA.

    - Contenido: solo los pares dentro de la ventana local (t - t' < L), diagonal a diagonal.
    - Tiempo: un producto por (c, t) y desfase, reordenado con `shift_time` y difundido a todos los canales clave.
    - Canal: un producto por (t, c) y desfase, reordenado con `shift_channel` y difundido a todos los instantes clave.

    Parámetros:
    - embeddings (torch.Tensor): Rejilla [..., C, T, d].
    - params (MultiVariateParallelAttention): Parámetros.
    - attention_config (AttentionConfig | None): Configuración (por defecto la de `params`).
    - counters (OpCounters | None): Acumuladores de productos escalares.

    Retorna:
    - AttentionLogits: Logits [..., H, C·T, C·T], iguales a los del oráculo sobre el soporte enmascarado.
    """
    cfg = attention_config or params.config
    if not hasattr(params, "kt_proj"):
        raise InvalidInputError("los parámetros de atención vanilla no tienen libros de códigos para MVPA")
    n_channels, n_time = _check_grid(embeddings, params)
    H, G, dh = params.n_heads, params.n_gqa, params.head_dim
    group_index = params.group_index
    lead = embeddings.shape[:-3]
    n_windows = math.prod(lead)
    full_shape = (*lead, H, n_channels, n_time, n_channels, n_time)

    q = _heads(params.q_proj, embeddings, H, dh)
    t = torch.arange(n_time, device=embeddings.device)
    offsets = t[:, None] - t[None, :]
    causal_tt = offsets >= 0
    window_tt = causal_tt & (offsets < cfg.local_window)
    zeros = embeddings.new_zeros(())

    if "content" in cfg.components:
        keys = _heads(params.ke_proj, embeddings, G, dh, group_index)
        queries = q + params.u.index_select(0, group_index)[:, None, None, :]
        bands = []
        for delta in range(min(cfg.local_window, n_time)):
            dots = torch.einsum("...hctd,...hktd->...hctk", queries[..., delta:, :], keys[..., :n_time - delta, :])
            bands.append(F.pad(dots, (0, 0, delta, 0)))
            if counters is not None:
                counters.content_dots += n_windows * H * n_channels * (n_time - delta) * n_channels
        band = torch.stack(bands, dim=-1)
        index = offsets.clamp(0, len(bands) - 1)[:, None, :].expand(*band.shape[:-1], n_time)
        content = torch.gather(band, -1, index) * window_tt[:, None, :]
    else:
        content = zeros.expand(full_shape)

    if "time" in cfg.components:
        rows = torch.arange(n_time - 1, -1, -1, device=embeddings.device)
        time_keys = params.kt_proj(params.time_codebook[rows]).unflatten(-1, (G, dh)).index_select(-2, group_index)
        queries = q + params.v.index_select(0, group_index)[:, None, None, :]
        raw = torch.einsum("...hctd,jhd->...hctj", queries, time_keys)
        if counters is not None:
            counters.time_dots += n_windows * H * n_channels * n_time * n_time
        time = shift_time(raw).unsqueeze(-2).expand(full_shape)
    else:
        time = zeros.expand(full_shape)

    if "channel" in cfg.components:
        offsets_c = torch.arange(2 * n_channels - 1, device=embeddings.device)
        rows = params.max_channels - 1 + (n_channels - 1) - offsets_c
        channel_keys = params.kc_proj(params.channel_codebook[rows]).unflatten(-1, (G, dh)).index_select(-2, group_index)
        queries = q + params.w.index_select(0, group_index)[:, None, None, :]
        raw = torch.einsum("...hctd,jhd->...htcj", queries, channel_keys)
        if counters is not None:
            counters.channel_dots += n_windows * H * n_time * n_channels * (2 * n_channels - 1)
        channel = shift_channel(raw).transpose(-3, -2).unsqueeze(-1).expand(full_shape)
    else:
        channel = zeros.expand(full_shape)

    flat = (*lead, H, n_channels * n_time, n_channels * n_time)
    causal = causal_tt[:, None, :].expand(full_shape).reshape(flat)
    content_mask = window_tt[:, None, :].expand(full_shape).reshape(flat)
    content = content.expand(full_shape).reshape(flat)
    time = time.reshape(flat)
    channel = channel.reshape(flat)
    combined = (content + time + channel).masked_fill(~causal, float("-inf"))
    return AttentionLogits(content=content, time=time, channel=channel, combined=combined,
                           mask=causal, content_mask=content_mask)


def vanilla_logits(embeddings, params, counters=None):
    """
    Logits de atención estándar QKᵀ sobre las celdas aplanadas c·T + t, con la misma máscara causal que MVPA.

    No hay ventana local ni logits de tiempo o de canal; los campos `time` y `channel` son cero.

    Parámetros:
    - embeddings (torch.Tensor): Rejilla [..., C, T, d].
    - params (MultiVariateParallelAttention): Parámetros (se usan q_proj y ke_proj).
    - counters (OpCounters | None): Acumuladores; cada producto consulta-clave cuenta como de contenido.

    Retorna:
    - AttentionLogits: Logits [..., H, C·T, C·T].
    """
    n_channels, n_time = _check_grid(embeddings, params)
    H, dh = params.n_heads, params.head_dim
    n_cells = n_channels * n_time
    lead = embeddings.shape[:-3]
    q = _heads(params.q_proj, embeddings, H, dh).flatten(-3, -2)
    k = _heads(params.ke_proj, embeddings, params.n_gqa, dh, params.group_index).flatten(-3, -2)
    dots = q @ k.transpose(-2, -1)
    if counters is not None:
        counters.content_dots += math.prod(lead) * H * n_cells * n_cells

    causal, _ = causal_window_mask(n_time, n_channels, n_time)
    causal = causal.to(embeddings.device).expand(*lead, H, n_cells, n_cells)
    content = dots.masked_fill(~causal, 0.0)
    zeros = torch.zeros_like(content)
    return AttentionLogits(content=content, time=zeros, channel=zeros,
                           combined=dots.masked_fill(~causal, float("-inf")), mask=causal, content_mask=causal)


def mvpa_forward(embeddings, params, attention_config=None, seed=None, counters=None):
    """
    Pasada completa de MVPA (o de la variante vanilla): logits → dropout estructurado → escala → activación →
    suma ponderada de valores por grupo → concatenación de cabezas → proyección de salida.

    Parámetros:
    - embeddings (torch.Tensor): Rejilla [..., C, T, d].
    - params (MultiVariateParallelAttention): Parámetros.
    - attention_config (AttentionConfig | None): Configuración (por defecto la de `params`).
    - seed (int | None): Semilla del dropout estructurado; None desactiva el dropout (modo evaluación).
    - counters (OpCounters | None): Acumuladores de productos escalares.

    Retorna:
    - torch.Tensor: Rejilla de salida [..., C, T, d].
    """
    cfg = attention_config or params.config
    n_channels, n_time = _check_grid(embeddings, params)
    H, G, dh = params.n_heads, params.n_gqa, params.head_dim
    if cfg.variant == "vanilla":
        logits = vanilla_logits(embeddings, params, counters)
    else:
        logits = efficient_mvpa_logits(embeddings, params, cfg, counters)

    mask = logits.mask
    if seed is not None and cfg.dropout_rate > 0:
        keep = structured_dropout_mask(n_time, n_channels, cfg.dropout_rate, seed).to(embeddings.device)
        mask = mask & keep.reshape(-1)

    scale = cfg.scale if cfg.scale is not None else 1.0 / math.sqrt(params.n_embed)
    scores = logits.combined * scale
    if cfg.activation == "softmax":
        has_keys = mask.any(dim=-1, keepdim=True)
        # Las filas sin ninguna clave se rellenan con ceros para que el softmax sea finito; su salida se anula
        filled = torch.where(mask, scores, float("-inf"))
        filled = torch.where(has_keys, filled, torch.zeros_like(filled))
        weights = torch.softmax(filled, dim=-1) * has_keys
    else:
        weights = torch.sigmoid(torch.where(mask, scores, torch.zeros_like(scores))) * mask

    values = _heads(params.v_proj, embeddings, G, dh, params.group_index)
    values = values.flatten(-3, -2)
    out = weights @ values
    out = out.unflatten(-2, (n_channels, n_time)).movedim(-4, -2).flatten(-2)
    return params.o_proj(out)
