import math

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel
from torch import nn

from core.data_model import LoraConfig, ModelConfig, SegmentGrid
from core.errors import InvalidInputError
from core.logger import get_logger
from core.mvpa_attention import MultiVariateParallelAttention
from core.rng import derive_seed, philox
from core.wavelet_encoder import RMSNorm, WaveletEncoder

logger = get_logger(__name__)


class MLPBlock(nn.Module):
    """
    Bloque MLP: s = W_s(W_u z + SiLU(W_g z)). La variante "gated" usa el producto u·g en lugar de la suma.
    """

    def __init__(self, n_embed, n_inner, variant="sum"):
        super().__init__()
        self.variant = variant
        self.up_proj = nn.Linear(n_embed, n_inner, bias=False)
        self.gate_proj = nn.Linear(n_embed, n_inner, bias=False)
        self.down_proj = nn.Linear(n_inner, n_embed, bias=False)

    def forward(self, z):
        return mlp_block(z, self)


def mlp_block(z, params):
    """
    Aplica el bloque MLP a cada vector del último eje.

    Parámetros:
    - z (torch.Tensor): Entrada [..., d].
    - params (MLPBlock): Pesos del bloque.

    Retorna:
    - torch.Tensor: Salida [..., d].
    """
    if z.shape[-1] != params.up_proj.in_features:
        raise InvalidInputError(f"la entrada tiene dimensión {z.shape[-1]}, el MLP espera {params.up_proj.in_features}")
    u = params.up_proj(z)
    g = F.silu(params.gate_proj(z))
    hidden = u + g if params.variant == "sum" else u * g
    return params.down_proj(hidden)


def residual_dropout(x, rate, seed):
    """
    Dropout elemento a elemento con máscara Philox; sin semilla o con tasa 0 es la identidad.
    """
    if seed is None or rate == 0.0:
        return x
    keep = philox(seed, "residual_dropout").random(tuple(x.shape)) >= rate
    return x * torch.as_tensor(keep, dtype=x.dtype, device=x.device) / (1.0 - rate)


class DecoderBlock(nn.Module):
    """
    Bloque decodificador con residuales en paralelo: atención y MLP leen la misma entrada normalizada.
    """

    def __init__(self, config):
        super().__init__()
        self.dropout = config.dropout
        self.norm = RMSNorm(config.n_embed, eps=config.rms_eps)
        self.attention = MultiVariateParallelAttention(config.n_embed, config.n_heads, config.n_gqa,
                                                       config.max_time, config.max_channels,
                                                       attention_config=config.attention_config(),
                                                       init_std=config.init_std)
        self.mlp = MLPBlock(config.n_embed, config.n_inner, config.mlp_variant)
        for parameter in self.mlp.parameters():
            nn.init.normal_(parameter, mean=0.0, std=config.init_std)

    def forward(self, o, seed=None, counters=None):
        return decoder_block(o, self, seed=seed, counters=counters)


def decoder_block(o, params, seed=None, counters=None):
    """
    out = o + dropout(atención(rmsnorm(o))) + mlp(rmsnorm(o)).

    Parámetros:
    - o (torch.Tensor): Rejilla [..., C, T, d].
    - params (DecoderBlock): Pesos del bloque.
    - seed (int | None): Semilla del dropout (estructurado en la atención, por elemento en el residual).
    - counters (OpCounters | None): Contadores de la atención.

    Retorna:
    - torch.Tensor: Rejilla [..., C, T, d].
    """
    z = params.norm(o)
    attention_seed = None if seed is None else derive_seed(seed, "attention")
    residual_seed = None if seed is None else derive_seed(seed, "residual")
    attended = params.attention(z, seed=attention_seed, counters=counters)
    return o + residual_dropout(attended, params.dropout, residual_seed) + params.mlp(z)


class MVPFormer(nn.Module):
    """
    Codificador wavelet seguido de `n_layers` bloques decodificadores MVPA.

    La salida en la celda (c, t) es la predicción del embedding de la celda (c, t+1).
    """

    def __init__(self, config=None):
        super().__init__()
        self.config = config or ModelConfig()
        self.encoder = WaveletEncoder(self.config.segment_samples, self.config.n_embed,
                                      level=self.config.wavelet_level, eps=self.config.rms_eps)
        self.layers = nn.ModuleList([DecoderBlock(self.config) for _ in range(self.config.n_layers)])

    def encode(self, cells):
        """
        Embeddings del codificador [..., C, T, d] (los objetivos de la pérdida contrastiva).
        """
        if isinstance(cells, SegmentGrid):
            cells = cells.cells
        return self.encoder(cells)

    def decode(self, embeddings, seed=None, counters=None):
        o = embeddings
        for index, layer in enumerate(self.layers):
            layer_seed = None if seed is None else derive_seed(seed, "layer", index)
            o = layer(o, seed=layer_seed, counters=counters)
        return o

    def forward(self, cells, seed=None, counters=None):
        return self.decode(self.encode(cells), seed=seed, counters=counters)


def forward(grid, model, seed=None, counters=None):
    """
    Inferencia completa: codificar → bloques decodificadores → rejilla de salida.

    Parámetros:
    - grid (SegmentGrid | array): Rejilla [C × T × S] (o un lote [B × C × T × S]).
    - model (MVPFormer): Modelo.
    - seed (int | None): Semilla del dropout de entrenamiento; None en evaluación.

    Retorna:
    - torch.Tensor: Rejilla de embeddings de salida [..., C, T, d].
    """
    cells = grid.cells if isinstance(grid, SegmentGrid) else np.asarray(grid)
    n_channels, n_time = cells.shape[-3], cells.shape[-2]
    if n_time > model.config.max_time or n_channels > model.config.max_channels:
        raise InvalidInputError(f"rejilla C={n_channels}, T={n_time} fuera de los máximos "
                                f"C_max={model.config.max_channels}, T_max={model.config.max_time}")
    return model(cells, seed=seed, counters=counters)


class LoraLinear(nn.Module):
    """
    Proyección lineal congelada con un adaptador de bajo rango: W_eff = W + (alpha/rank)·B·A.

    B se inicializa a cero, de modo que el adaptador recién creado no altera la salida.
    """

    def __init__(self, base, rank, alpha, target):
        super().__init__()
        self.base = base
        self.rank = rank
        self.alpha = alpha
        self.target = target
        self.lora_a = nn.Parameter(torch.empty(rank, base.in_features, dtype=base.weight.dtype))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank, dtype=base.weight.dtype))
        nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5))

    @property
    def in_features(self):
        return self.base.in_features

    @property
    def out_features(self):
        return self.base.out_features

    @property
    def scaling(self):
        return self.alpha / self.rank

    @property
    def weight(self):
        return lora_effective_weight(self.base.weight, self)

    def forward(self, x):
        return F.linear(x, self.weight)


def lora_effective_weight(weight, adapter):
    """
    Peso efectivo W + (alpha/rank)·B·A de un adaptador LoRA.
    """
    if adapter.lora_b.shape[0] != weight.shape[0] or adapter.lora_a.shape[1] != weight.shape[1]:
        raise InvalidInputError(f"adaptador {tuple(adapter.lora_b.shape)}·{tuple(adapter.lora_a.shape)} "
                                f"incompatible con el peso {tuple(weight.shape)}")
    return weight + adapter.scaling * (adapter.lora_b @ adapter.lora_a)


def apply_lora(model, lora_config=None, freeze_base=True):
    """
    Inserta adaptadores LoRA en las proyecciones indicadas de los `config.lora_layers` bloques superiores
    (de todos si es None).

    Parámetros:
    - model (MVPFormer): Modelo a adaptar (se modifica en el sitio).
    - lora_config (LoraConfig | None): Rango, alpha y proyecciones destino (por defecto q_proj y v_proj).
    - freeze_base (bool): Si es verdadero, todos los parámetros que no son del adaptador dejan de ser entrenables.

    Retorna:
    - list[nn.Parameter]: Los parámetros de los adaptadores insertados.
    """
    lora_config = lora_config or LoraConfig()
    if freeze_base:
        for parameter in model.parameters():
            parameter.requires_grad_(False)
    adapters = []
    n_adapted = model.config.n_lora_layers
    for layer in model.layers[len(model.layers) - n_adapted:]:
        for target in lora_config.targets:
            current = getattr(layer.attention, target)
            if isinstance(current, LoraLinear):
                raise InvalidInputError(f"la proyección {target} ya tiene un adaptador LoRA")
            adapter = LoraLinear(current, lora_config.rank, lora_config.alpha, target)
            setattr(layer.attention, target, adapter)
            adapters.extend([adapter.lora_a, adapter.lora_b])
    logger.info(f"LoRA insertado: {len(adapters) // 2} adaptadores, "
                f"{sum(p.numel() for p in adapters)} parámetros entrenables")
    return adapters


class ClassificationHead(nn.Module):
    def __init__(self, n_embed, n_classes=2, mode="channel_mean", n_channels=None):
        super().__init__()
        if mode == "channel_concat" and n_channels is None:
            raise InvalidInputError("el modo channel_concat necesita el número de canales")
        self.mode = mode
        in_features = n_embed if mode == "channel_mean" else n_channels * n_embed
        self.linear = nn.Linear(in_features, n_classes)

    def forward(self, embeddings):
        return classify_head(embeddings, self.mode, self)


def classify_head(embeddings, mode, head):
    """
    Probabilidades de clase a partir de las salidas del último segmento temporal.

    Parámetros:
    - embeddings (torch.Tensor): Rejilla de salida [..., C, T, d].
    - mode (str): "channel_mean" (media sobre canales) o "channel_concat" (concatenación de canales).
    - head (ClassificationHead): Capa lineal de la cabeza.

    Retorna:
    - torch.Tensor: Softmax sobre clases [..., n_classes].
    """
    last = embeddings[..., -1, :]
    if mode == "channel_mean":
        features = last.mean(dim=-2)
    elif mode == "channel_concat":
        features = last.flatten(-2)
    else:
        raise InvalidInputError(f"modo de cabeza desconocido: {mode}")
    if features.shape[-1] != head.linear.in_features:
        raise InvalidInputError(f"la cabeza espera {head.linear.in_features} entradas, se recibieron {features.shape[-1]}")
    return torch.softmax(head.linear(features), dim=-1)


class ForecastHead(nn.Module):
    def __init__(self, n_embed, horizon):
        super().__init__()
        if horizon < 1:
            raise InvalidInputError(f"horizon debe ser >= 1, se recibió {horizon}")
        self.horizon = horizon
        self.linear = nn.Linear(n_embed, horizon)

    def forward(self, embeddings):
        return forecast_head(embeddings, self.horizon, self)


def forecast_head(embeddings, horizon, head):
    """
    Proyecta el embedding del último segmento de cada canal a `horizon` valores futuros: [..., C, horizon].
    """
    if horizon != head.linear.out_features:
        raise InvalidInputError(f"la cabeza produce {head.linear.out_features} valores, se pidieron {horizon}")
    return head.linear(embeddings[..., -1, :])


class ParameterCensus(BaseModel):
    """
    Recuento de parámetros por componente calculado a partir de la configuración.
    """

    encoder: int
    attention_per_layer: int
    codebooks_per_layer: int
    mlp_per_layer: int
    norm_per_layer: int
    n_layers: int
    total: int
    lora: int
    lora_fraction: float

    @property
    def per_layer(self):
        return self.attention_per_layer + self.codebooks_per_layer + self.mlp_per_layer + self.norm_per_layer


def parameter_census(config, lora_config=None):
    """
    Cuenta los parámetros de MVPFormer sin instanciarlo.

    - Codificador: S·d + d (proyección con sesgo).
    - Atención por capa: q y o (H·dh·d cada una), ke, kt, kc y v (G·dh·d cada una) y los sesgos u, v, w (3·G·dh).
      La variante vanilla solo tiene q, ke, v y o.
    - Libros de códigos por capa: (T_max + 2·C_max - 1)·d; ninguno en la variante vanilla.
    - MLP por capa: 3·d·n_inner. Norma por capa: d.
    - LoRA: rank·(d_in + d_out) por proyección adaptada y bloque adaptado.

    Parámetros:
    - config (ModelConfig): Configuración del modelo.
    - lora_config (LoraConfig | None): Configuración de los adaptadores (por defecto rango 8 sobre q y v).

    Retorna:
    - ParameterCensus: Recuentos y fracción entrenable de LoRA respecto al modelo base.
    """
    lora_config = lora_config or LoraConfig()
    d, dh = config.n_embed, config.head_dim
    q_out, kv_out = config.n_heads * dh, config.n_gqa * dh
    encoder = config.segment_samples * d + d
    if config.attention_variant == "vanilla":
        attention = 2 * q_out * d + 2 * kv_out * d
        codebooks = 0
    else:
        attention = 2 * q_out * d + 4 * kv_out * d + 3 * kv_out
        codebooks = (config.max_time + 2 * config.max_channels - 1) * d
    mlp = 3 * d * config.n_inner
    norm = d
    total = encoder + config.n_layers * (attention + codebooks + mlp + norm)
    out_features = {"q_proj": q_out, "v_proj": kv_out}
    lora = config.n_lora_layers * sum(lora_config.rank * (d + out_features[t]) for t in lora_config.targets)
    return ParameterCensus(encoder=encoder, attention_per_layer=attention, codebooks_per_layer=codebooks,
                           mlp_per_layer=mlp, norm_per_layer=norm, n_layers=config.n_layers, total=total,
                           lora=lora, lora_fraction=lora / total)


def count_parameters(module, trainable_only=False):
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)
