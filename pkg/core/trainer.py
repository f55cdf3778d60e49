import sys
from contextlib import contextmanager

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict
from tqdm import tqdm

from core.data_model import ForecastConfig, ModelConfig, TrainConfig
from core.errors import DataUnderflowError, InvalidInputError
from core.logger import get_logger
from core.model import ClassificationHead, ForecastHead, LoraLinear, MVPFormer, apply_lora
from core.objectives import batch_contrastive
from core.rng import derive_seed, philox

logger = get_logger(__name__)


def backward(loss, params):
    """
    Gradientes de `loss` respecto a `params` por diferenciación en modo inverso.

    Los parámetros que no intervienen en la pérdida reciben un gradiente nulo.

    Parámetros:
    - loss (torch.Tensor): Escalar con su grafo de cómputo.
    - params (list[torch.Tensor]): Tensores entrenables.

    Retorna:
    - list[torch.Tensor]: Un gradiente por parámetro, con su misma forma.
    """
    params = list(params)
    if not params:
        return []
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


class OptimizerState:
    """
    Estado de AdamW (decaimiento desacoplado) sobre `torch.optim.AdamW`.

    `step`, `m` y `v` exponen el contador de pasos y los momentos de primer y segundo orden.
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.1):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.optimizer = torch.optim.AdamW(self.params, lr=lr, betas=self.betas, eps=eps,
                                           weight_decay=weight_decay, foreach=False)

    @property
    def step(self):
        if not self.params or self.params[0] not in self.optimizer.state:
            return 0
        return int(self.optimizer.state[self.params[0]]["step"])

    @property
    def m(self):
        return [self.optimizer.state[p]["exp_avg"] if p in self.optimizer.state else torch.zeros_like(p)
                for p in self.params]

    @property
    def v(self):
        return [self.optimizer.state[p]["exp_avg_sq"] if p in self.optimizer.state else torch.zeros_like(p)
                for p in self.params]

    def set_moments(self, param, step, m, v):
        """
        Fija el estado de un parámetro (por ejemplo, para reanudar un entrenamiento).
        """
        self.optimizer.state[param] = {"step": torch.tensor(float(step)),
                                       "exp_avg": torch.as_tensor(m, dtype=param.dtype).clone(),
                                       "exp_avg_sq": torch.as_tensor(v, dtype=param.dtype).clone()}

    @classmethod
    def from_config(cls, params, train_config):
        return cls(params, lr=train_config.lr, betas=train_config.betas, eps=train_config.eps,
                   weight_decay=train_config.weight_decay)


def adamw_step(params, grads, state):
    """
    Un paso de AdamW con corrección de sesgo y decaimiento desacoplado:
    θ ← θ·(1 - lr·λ) - lr·m̂/(sqrt(v̂) + eps).

    Parámetros:
    - params (list[torch.Tensor]): Parámetros (los mismos que gestiona `state`).
    - grads (list[torch.Tensor]): Gradientes alineados con `params`.
    - state (OptimizerState): Estado del optimizador; se actualiza en el sitio.

    Retorna:
    - OptimizerState: El mismo estado, con el paso incrementado.
    """
    params = list(params)
    if len(params) != len(grads):
        raise InvalidInputError(f"{len(params)} parámetros pero {len(grads)} gradientes")
    for param, grad in zip(params, grads):
        if param.shape != grad.shape:
            raise InvalidInputError(f"gradiente {tuple(grad.shape)} para un parámetro {tuple(param.shape)}")
        param.grad = grad.detach().clone()
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    return state


@contextmanager
def _deterministic(enabled):
    previous = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(enabled)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


def _progress(iterable, description, enabled):
    return tqdm(iterable, desc=description, disable=not (enabled and sys.stderr.isatty()), leave=False)


def _clip(params, clip_norm):
    if clip_norm is not None:
        torch.nn.utils.clip_grad_norm_([p for p in params if p.grad is not None], clip_norm)


def _step(params, loss, state, clip_norm):
    grads = backward(loss, params)
    if clip_norm is not None:
        for param, grad in zip(params, grads):
            param.grad = grad
        _clip(params, clip_norm)
        grads = [param.grad for param in params]
    adamw_step(params, grads, state)


class PretrainResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: MVPFormer
    trace: pd.DataFrame


class FinetuneResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: MVPFormer
    head: ClassificationHead
    trace: pd.DataFrame


class ForecastResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: MVPFormer
    head: ForecastHead
    trace: pd.DataFrame


def pretrain(model, windows, train_config=None, progress=True):
    """
    Pre-entrenamiento contrastivo: cada salida (c, t) debe parecerse al embedding (c, t+1) más que a los confusores
    tomados de otras ventanas del lote.

    Parámetros:
    - model (MVPFormer): Modelo a entrenar (se modifica en el sitio).
    - windows (np.ndarray): Ventanas [N × C × T × S].
    - train_config (TrainConfig | None): Pasos, tamaño de lote, semilla y optimizador.
    - progress (bool): Muestra una barra de progreso en terminales interactivos.

    Retorna:
    - PretrainResult: El modelo y la traza (step, loss, accuracy).
    """
    cfg = train_config or TrainConfig()
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 4:
        raise InvalidInputError(f"se esperaban ventanas [N × C × T × S], se recibió ndim={windows.ndim}")
    if windows.shape[0] < 2 or cfg.batch_size < 2:
        raise DataUnderflowError("el pre-entrenamiento necesita lotes de al menos 2 ventanas", 2)

    params = [p for p in model.parameters() if p.requires_grad]
    state = OptimizerState.from_config(params, cfg)
    batch_size = min(cfg.batch_size, windows.shape[0])
    rows = []
    with _deterministic(cfg.deterministic):
        for step in _progress(range(cfg.steps), "pre-entrenamiento", progress):
            pick = np.sort(philox(cfg.seed, "batches", step).choice(windows.shape[0], batch_size, replace=False))
            targets = model.encode(windows[pick])
            outputs = model.decode(targets, seed=derive_seed(cfg.seed, "dropout", step))
            loss, accuracy = batch_contrastive(outputs, targets, cfg.contrastive,
                                               seed=derive_seed(cfg.seed, "negatives", step))
            _step(params, loss, state, cfg.clip_norm)
            rows.append({"step": step, "loss": loss.item(), "accuracy": accuracy})
            if step % 100 == 0:
                logger.debug(f"paso {step}: pérdida {loss.item():.6f}, precisión {accuracy:.3f}")

    trace = pd.DataFrame(rows, columns=["step", "loss", "accuracy"])
    if len(trace):
        logger.info(f"Pre-entrenamiento terminado: {len(trace)} pasos, pérdida final {trace['loss'].iloc[-1]:.6f}, "
                    f"precisión final {trace['accuracy'].iloc[-1]:.3f}")
    return PretrainResult(model=model, trace=trace)


def _balanced_batch(labels, batch_size, rng):
    positives = np.flatnonzero(labels == 1)
    negatives = np.flatnonzero(labels == 0)
    if len(positives) == 0 or len(negatives) == 0:
        return rng.choice(len(labels), batch_size, replace=len(labels) < batch_size)
    half = batch_size // 2
    return np.concatenate([rng.choice(positives, batch_size - half, replace=True),
                           rng.choice(negatives, half, replace=True)])


def finetune(model, windows, labels, train_config=None, head=None, progress=True):
    """
    Ajuste fino para clasificación: adaptadores LoRA en q y v más una cabeza lineal, con entropía cruzada binaria
    sobre la probabilidad softmax de la clase positiva. El modelo base queda congelado.

    Los lotes se equilibran entre ventanas positivas y negativas cuando ambas clases están presentes.

    Parámetros:
    - model (MVPFormer): Modelo pre-entrenado (normalmente cargado de un checkpoint).
    - windows (np.ndarray): Ventanas [N × C × T × S].
    - labels (np.ndarray): Etiqueta binaria por ventana [N] (la del último segmento).
    - train_config (TrainConfig | None): Configuración en modo "finetune".
    - head (ClassificationHead | None): Cabeza inicial; por defecto una nueva.

    Retorna:
    - FinetuneResult: Modelo con adaptadores, cabeza entrenada y traza (step, loss, accuracy).
    """
    cfg = train_config or TrainConfig(mode="finetune", freeze_base=True)
    windows = np.asarray(windows, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if windows.ndim != 4 or labels.shape != (windows.shape[0],):
        raise InvalidInputError("se esperaban ventanas [N × C × T × S] y una etiqueta por ventana")
    if windows.shape[0] < 1:
        raise DataUnderflowError("el ajuste fino necesita ventanas etiquetadas", 1)

    has_adapters = any(isinstance(m, LoraLinear) for m in model.modules())
    if cfg.lora is not None and not has_adapters:
        apply_lora(model, cfg.lora, freeze_base=cfg.freeze_base)
    elif cfg.freeze_base:
        for name, parameter in model.named_parameters():
            parameter.requires_grad_("lora_" in name)

    dtype = next(model.parameters()).dtype
    if head is None:
        head = ClassificationHead(model.config.n_embed, model.config.n_classes, cfg.head_mode,
                                  n_channels=windows.shape[1]).to(dtype)
    params = [p for p in model.parameters() if p.requires_grad] + list(head.parameters())
    state = OptimizerState.from_config(params, cfg)
    rows = []
    with _deterministic(cfg.deterministic):
        for step in _progress(range(cfg.steps), "ajuste fino", progress):
            pick = _balanced_batch(labels, cfg.batch_size, philox(cfg.seed, "finetune_batches", step))
            outputs = model(windows[pick], seed=derive_seed(cfg.seed, "dropout", step))
            probabilities = head(outputs)
            target = torch.as_tensor(labels[pick], dtype=probabilities.dtype)
            loss = F.binary_cross_entropy(probabilities[..., 1].clamp(1e-7, 1 - 1e-7), target)
            _step(params, loss, state, cfg.clip_norm)
            accuracy = ((probabilities[..., 1] > 0.5).long() == target.long()).double().mean().item()
            rows.append({"step": step, "loss": loss.item(), "accuracy": accuracy})

    trace = pd.DataFrame(rows, columns=["step", "loss", "accuracy"])
    logger.info(f"Ajuste fino terminado: {len(trace)} pasos, "
                f"{sum(p.numel() for p in params)} parámetros entrenables")
    return FinetuneResult(model=model, head=head, trace=trace)


def predict_windows(model, head, windows, batch_size=32):
    """
    Probabilidad de la clase positiva para cada ventana [N].
    """
    windows = np.asarray(windows, dtype=np.float64)
    scores = []
    with torch.no_grad():
        for start in range(0, windows.shape[0], batch_size):
            scores.append(head(model(windows[start:start + batch_size]))[..., 1])
    return torch.cat(scores).numpy() if scores else np.zeros(0)


def instance_normalize(past, eps=1e-8):
    """
    Normaliza cada canal de cada ejemplo con su propia media y desviación: devuelve (normalizado, media, desviación).
    """
    mean = past.mean(axis=-1, keepdims=True)
    std = past.std(axis=-1, keepdims=True) + eps
    return (past - mean) / std, mean, std


def _forecast_cells(past, segment_samples):
    n, n_channels, lookback = past.shape
    if lookback % segment_samples != 0:
        raise InvalidInputError(f"lookback={lookback} no es múltiplo de segment_samples={segment_samples}")
    return past.reshape(n, n_channels, lookback // segment_samples, segment_samples)


def forecast_model_config(forecast_config, base=None):
    base = base or ModelConfig()
    return base.model_copy(update={"segment_samples": forecast_config.segment_samples,
                                   "wavelet_level": None, "dropout": 0.0})


def train_forecaster(past, future, forecast_config=None, model_config=None, progress=True):
    """
    Entrena un modelo de predicción: ventanas de contexto normalizadas por instancia, cortadas en segmentos,
    codificadas por MVPFormer y proyectadas al horizonte desde el último segmento de cada canal.

    Parámetros:
    - past (np.ndarray): Contextos [n × C × lookback].
    - future (np.ndarray): Objetivos [n × C × horizon].
    - forecast_config (ForecastConfig | None): Protocolo y optimización.
    - model_config (ModelConfig | None): Arquitectura base (se ajusta `segment_samples`).

    Retorna:
    - ForecastResult: Modelo, cabeza y traza (step, loss).
    """
    cfg = forecast_config or ForecastConfig()
    past = np.asarray(past, dtype=np.float64)
    future = np.asarray(future, dtype=np.float64)
    if past.shape[0] < 1:
        raise DataUnderflowError("no hay ejemplos de predicción; la serie es más corta que lookback + horizon",
                                 cfg.lookback + cfg.horizon)
    if future.shape[-1] != cfg.horizon or past.shape[-1] != cfg.lookback:
        raise InvalidInputError("las formas de los ejemplos no coinciden con lookback/horizon")

    torch.manual_seed(cfg.seed)
    model = MVPFormer(forecast_model_config(cfg, model_config))
    head = ForecastHead(model.config.n_embed, cfg.horizon)
    normalized, mean, std = instance_normalize(past)
    cells = _forecast_cells(normalized, cfg.segment_samples)
    target = torch.as_tensor((future - mean) / std, dtype=torch.float32)

    params = list(model.parameters()) + list(head.parameters())
    state = OptimizerState(params, lr=cfg.lr, weight_decay=0.0)
    rows = []
    for step in _progress(range(cfg.steps), "predicción", progress):
        pick = philox(cfg.seed, "forecast_batches", step).choice(len(cells), min(cfg.batch_size, len(cells)),
                                                                replace=False)
        prediction = head(model(cells[pick]))
        loss = F.mse_loss(prediction, target[pick])
        _step(params, loss, state, None)
        rows.append({"step": step, "loss": loss.item()})
    logger.info(f"Modelo de predicción entrenado: {cfg.steps} pasos")
    return ForecastResult(model=model, head=head, trace=pd.DataFrame(rows, columns=["step", "loss"]))


def forecast_predict(model, head, past, segment_samples, batch_size=64):
    """
    Predicción desnormalizada [n × C × horizon] para contextos [n × C × lookback].
    """
    past = np.asarray(past, dtype=np.float64)
    normalized, mean, std = instance_normalize(past)
    cells = _forecast_cells(normalized, segment_samples)
    predictions = []
    with torch.no_grad():
        for start in range(0, len(cells), batch_size):
            predictions.append(head(model(cells[start:start + batch_size])).double().numpy())
    if not predictions:
        return np.zeros(past.shape[:2] + (head.horizon,))
    return np.concatenate(predictions) * std + mean


def last_value_forecast(past, horizon):
    """
    Referencia ingenua: repite el último valor observado de cada canal durante todo el horizonte.
    """
    past = np.asarray(past, dtype=np.float64)
    return np.repeat(past[..., -1:], horizon, axis=-1)
