from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class MultiChannelSeries(BaseModel):
    """
    Serie temporal multicanal en bruto, tal y como se lee de disco o se genera.

    Las muestras se guardan como una matriz [C × N_muestras]; todas las filas tienen la misma longitud.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    samples: np.ndarray
    """
    Matriz real [C × N_muestras].
    """

    sample_rate_hz: float = Field(gt=0)
    """
    Frecuencia de muestreo en Hz.
    """

    channel_ids: List[str]
    """
    Identificadores opacos de los canales, uno por fila de `samples`.
    """

    labels: Optional[np.ndarray] = None
    """
    Anotación binaria por segundo (opcional). Longitud = floor(N_muestras / sample_rate_hz).
    """

    @model_validator(mode="after")
    def _check_shape(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 2:
            raise ValueError(f"samples debe ser una matriz [C × N], se recibió ndim={samples.ndim}")
        if samples.shape[0] != len(self.channel_ids):
            raise ValueError(f"{samples.shape[0]} canales en samples pero {len(self.channel_ids)} identificadores")
        self.samples = samples
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int8)
            expected = int(np.floor(samples.shape[1] / self.sample_rate_hz))
            if labels.shape != (expected,):
                raise ValueError(f"labels debe tener longitud {expected}, se recibió {labels.shape}")
            self.labels = labels
        return self

    @property
    def n_channels(self):
        return self.samples.shape[0]

    @property
    def n_samples(self):
        return self.samples.shape[1]

    @property
    def duration_seconds(self):
        return self.n_samples / self.sample_rate_hz


class SegmentGrid(BaseModel):
    """
    Ventana de señal partida en celdas (canal × segmento temporal × muestra), la unidad de entrada del modelo.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    cells: np.ndarray
    """
    Tensor real [C × T × S].
    """

    segment_seconds: float = Field(gt=0)
    sample_rate_hz: float = Field(gt=0)

    start_seconds: float = 0.0
    """
    Instante de inicio de la ventana dentro de la serie de origen.
    """

    labels: Optional[np.ndarray] = None
    """
    Etiqueta binaria por segmento temporal [T] (1 si el segmento contiene algún segundo positivo).
    """

    @model_validator(mode="after")
    def _check_shape(self):
        cells = np.asarray(self.cells, dtype=np.float64)
        if cells.ndim != 3:
            raise ValueError(f"cells debe ser un tensor [C × T × S], se recibió ndim={cells.ndim}")
        expected = int(round(self.segment_seconds * self.sample_rate_hz))
        if cells.shape[2] != expected:
            raise ValueError(f"S={cells.shape[2]} no coincide con round(segment_seconds × sample_rate_hz)={expected}")
        self.cells = cells
        return self

    @property
    def n_channels(self):
        return self.cells.shape[0]

    @property
    def n_segments(self):
        return self.cells.shape[1]

    @property
    def segment_samples(self):
        return self.cells.shape[2]


class SynthConfig(BaseModel):
    """
    Parámetros del generador de señales sintéticas acopladas con ráfagas anómalas.
    """

    n_channels: int = Field(default=4, gt=0)
    duration_s: float = Field(default=600.0, gt=0)
    sample_rate_hz: float = Field(default=64.0, gt=0)
    base_frequencies_hz: List[float] = Field(default_factory=lambda: [1.3, 2.7])
    coupling: float = Field(default=0.8, ge=0.0, le=1.0)
    """
    Peso de la componente compartida (retrasada por canal) frente a la sinusoide propia de cada canal.
    """

    channel_lag_s: float = Field(default=0.05, ge=0.0)
    noise_std: float = Field(default=0.05, ge=0.0)
    burst_rate_per_hour: float = Field(default=6.0, ge=0.0)
    burst_amplitude: float = Field(default=4.0, ge=0.0)
    burst_duration_s: float = Field(default=20.0, gt=0)
    burst_frequency_hz: float = Field(default=12.0, gt=0)

    @field_validator("base_frequencies_hz")
    @classmethod
    def _non_empty(cls, value):
        if not value:
            raise ValueError("se necesita al menos una frecuencia base")
        return value


class AttentionConfig(BaseModel):
    """
    Configuración de una capa de atención MVPA.
    """

    local_window: int = Field(default=10, ge=1)
    """
    L: número de segmentos recientes que ve la componente de contenido.
    """

    dropout_rate: float = Field(default=0.0, ge=0.0, lt=1.0)
    activation: Literal["softmax", "sigmoid"] = "softmax"
    scale: Optional[float] = None
    """
    Escala de los logits; None equivale a 1/sqrt(n_embed).
    """

    variant: Literal["mvpa", "vanilla"] = "mvpa"
    """
    "vanilla" sustituye MVPA por atención QKᵀ sobre las celdas aplanadas: sin logits de tiempo ni de canal y sin
    ventana local; `components` no se usa.
    """

    components: Tuple[str, ...] = ("content", "time", "channel")

    @field_validator("components")
    @classmethod
    def _known_components(cls, value):
        unknown = set(value) - {"content", "time", "channel"}
        if unknown:
            raise ValueError(f"componentes desconocidas: {sorted(unknown)}")
        return tuple(value)


class ModelConfig(BaseModel):
    """
    Hiperparámetros de MVPFormer. Los valores por defecto corresponden al perfil "toy".
    """

    n_layers: int = Field(default=2, ge=0)
    n_heads: int = Field(default=4, gt=0)
    n_gqa: int = Field(default=2, gt=0)
    n_embed: int = Field(default=32, gt=0)
    n_inner: int = Field(default=72, gt=0)
    dropout: float = Field(default=0.0, ge=0.0, lt=1.0)
    local_window: int = Field(default=4, ge=1)
    segment_samples: int = Field(default=64, gt=0)
    wavelet_level: Optional[int] = None
    """
    Nivel de descomposición db4; None usa el máximo admisible para `segment_samples`.
    """

    activation: Literal["softmax", "sigmoid"] = "softmax"
    scale: Optional[float] = None
    max_time: int = Field(default=128, gt=0)
    max_channels: int = Field(default=32, gt=0)
    mlp_variant: Literal["sum", "gated"] = "sum"
    components: Tuple[str, ...] = ("content", "time", "channel")
    attention_variant: Literal["mvpa", "vanilla"] = "mvpa"
    lora_layers: Optional[int] = Field(default=None, ge=1)
    """
    Número de bloques superiores que reciben adaptadores LoRA; None los adapta todos.
    """

    rms_eps: float = Field(default=1e-6, gt=0)
    init_std: float = Field(default=0.02, gt=0)
    n_classes: int = Field(default=2, ge=2)

    @model_validator(mode="after")
    def _check_heads(self):
        if self.n_heads % self.n_gqa != 0:
            raise ValueError(f"n_heads={self.n_heads} debe ser divisible por n_gqa={self.n_gqa}")
        if self.n_embed % self.n_heads != 0:
            raise ValueError(f"n_embed={self.n_embed} debe ser divisible por n_heads={self.n_heads}")
        return self

    @property
    def head_dim(self):
        return self.n_embed // self.n_heads

    @property
    def n_lora_layers(self):
        return self.n_layers if self.lora_layers is None else min(self.lora_layers, self.n_layers)

    def attention_config(self):
        return AttentionConfig(local_window=self.local_window, dropout_rate=self.dropout,
                               activation=self.activation, scale=self.scale, components=self.components,
                               variant=self.attention_variant)


class LoraConfig(BaseModel):
    rank: int = Field(default=8, ge=1)
    alpha: float = Field(default=16.0, gt=0)
    targets: Tuple[Literal["q_proj", "v_proj"], ...] = ("q_proj", "v_proj")


class ContrastiveConfig(BaseModel):
    """
    Parámetros de la pérdida contrastiva.
    """

    temperature: float = Field(default=0.1, gt=0)
    n_negatives: int = Field(default=30, ge=1)
    include_positive_in_denominator: bool = True


class TrainConfig(BaseModel):
    """
    Configuración de un bucle de entrenamiento (pre-entrenamiento o ajuste fino).
    """

    steps: int = Field(default=100, ge=0)
    batch_size: int = Field(default=4, ge=1)
    seed: int = 0
    mode: Literal["pretrain", "finetune"] = "pretrain"
    lora: Optional[LoraConfig] = None
    freeze_base: bool = False
    lr: float = Field(default=1e-4, ge=0.0)
    weight_decay: float = Field(default=0.1, ge=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(default=1e-8, gt=0)
    clip_norm: Optional[float] = None
    contrastive: ContrastiveConfig = Field(default_factory=ContrastiveConfig)
    head_mode: Literal["channel_mean", "channel_concat"] = "channel_mean"
    deterministic: bool = True

    @model_validator(mode="after")
    def _check_finetune(self):
        if self.mode == "finetune" and self.lora is not None and not self.freeze_base:
            raise ValueError("el ajuste fino con LoRA requiere freeze_base=True")
        return self


class ForecastConfig(BaseModel):
    lookback: int = Field(default=96, gt=0)
    horizon: int = Field(default=96, gt=0)
    segment_samples: int = Field(default=16, gt=0)
    stride: int = Field(default=8, gt=0)
    steps: int = Field(default=1500, ge=0)
    batch_size: int = Field(default=16, ge=1)
    lr: float = Field(default=1e-3, ge=0.0)
    seed: int = 0


class RunConfig(BaseModel):
    """
    Configuración completamente resuelta de una ejecución de la CLI; se escribe como manifiesto.
    """

    command: str
    seed: int = 0
    out_dir: str = "reports"
    profile: str = "toy"
    config_file: Optional[str] = None
    args: Dict[str, Any] = Field(default_factory=dict)
    model: Optional[ModelConfig] = None
    metrics: Dict[str, Any] = Field(default_factory=dict)
    """
    Resultados resumidos del comando (por ejemplo, la evaluación de tres referencias de `pretrain`).
    """


class EventList(BaseModel):
    """
    Lista de eventos etiquetados (inicio, fin) en segundos, ordenados y sin solapes.
    """

    events: List[Tuple[float, float]] = Field(default_factory=list)
    recording_hours: float = Field(default=0.0, ge=0.0)
    positives: Optional[List[int]] = None
    """
    Número de respuestas positivas por evento (usado por el post-procesado episódico).
    """

    @model_validator(mode="after")
    def _check_events(self):
        for start, end in self.events:
            if not start < end:
                raise ValueError(f"evento inválido ({start}, {end}): el inicio debe ser menor que el fin")
        for (_, prev_end), (next_start, _) in zip(self.events, self.events[1:]):
            if next_start < prev_end:
                raise ValueError("los eventos deben estar ordenados y sin solapes")
        if self.positives is not None and len(self.positives) != len(self.events):
            raise ValueError("positives debe tener un elemento por evento")
        return self


class CheckResult(BaseModel):
    """
    Resultado de una comprobación de la batería de verificación.
    """

    name: str
    status: Literal["PASSED", "FAILED"]
    error: Optional[str] = None
    duration: float = 0.0
    detail: str = ""


class KappaEstimate(BaseModel):
    kappa: float
    running_means: List[float]
    deltas: List[float]


class ThreeReferenceResult(BaseModel):
    sim_true: float
    sim_two_step: float
    sim_random: float
    std_true: float = 0.0
    std_two_step: float = 0.0
    std_random: float = 0.0
    n_cells: int
    n_skipped: int


class DetectionMetrics(BaseModel):
    f1: float
    sensitivity: float
    precision: float
    fp_per_hour: float
    true_positives: int
    false_positives: int


class ForecastMetrics(BaseModel):
    mse: float
    mae: float


class RawMetrics(BaseModel):
    """
    Métricas por segundo, sin post-procesado episódico.
    """

    f1: float
    sensitivity: float
    specificity: float
