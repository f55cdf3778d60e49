import math
import time
from contextlib import nullcontext
from typing import List, Optional
from unittest import mock

import numpy as np
import torch
from pydantic import BaseModel

from core import mvpa_attention
from core.data_model import AttentionConfig, CheckResult, ContrastiveConfig, EventList, ModelConfig
from core.bench import expected_counters
from core.errors import InvalidInputError
from core.evaluation import cohen_kappa, episodic_postprocess, kappa_estimate
from core.gradcheck import finite_difference_check
from core.logger import get_logger
from core.model import LoraLinear, MVPFormer, apply_lora, count_parameters, parameter_census
from core.mvpa_attention import (MultiVariateParallelAttention, OpCounters, dropout_probability,
                                 efficient_mvpa_logits, mvpa_forward, naive_mvpa_logits, structured_dropout_mask)
from core.objectives import batch_contrastive, contrastive_loss
from core.profiles import profile_values
from core.trainer import OptimizerState, adamw_step, backward
from core.wavelet_encoder import dwt_db4, encoder_level, flatten_coeffs, idwt_db4

logger = get_logger(__name__)


class VerifySettings(BaseModel):
    """
    Tamaño de la batería de verificación. Los valores por defecto son los de los criterios de aceptación.
    """

    instances: int = 100
    causality_trials: int = 1000
    dropout_draws: int = 10000
    seed: int = 0
    checks: Optional[List[str]] = None
    fault: Optional[str] = None


def _generator(seed):
    return torch.Generator().manual_seed(seed)


def random_attention(seed, n_embed=8, n_heads=2, n_gqa=1, max_time=6, max_channels=6, local_window=3,
                     std=0.5, **kwargs):
    """
    Parámetros MVPA aleatorios en doble precisión (pesos N(0, std²)) para las comprobaciones numéricas.
    """
    params = MultiVariateParallelAttention(n_embed, n_heads, n_gqa, max_time, max_channels,
                                           AttentionConfig(local_window=local_window, **kwargs)).double()
    g = _generator(seed)
    with torch.no_grad():
        for parameter in params.parameters():
            parameter.copy_(torch.randn(parameter.shape, generator=g, dtype=torch.float64) * std)
    return params


def random_model(seed, **overrides):
    torch.manual_seed(seed)
    return MVPFormer(ModelConfig(**overrides)).double()


def check_oracle_equivalence(settings):
    worst = 0.0
    rng = np.random.default_rng(settings.seed)
    for instance in range(settings.instances):
        params = random_attention(settings.seed + instance, n_heads=2, n_gqa=int(rng.choice([1, 2])))
        g = _generator(10_000 + settings.seed + instance)
        for n_time in range(1, 7):
            for n_channels in range(1, 7):
                local_window = int(rng.integers(1, n_time + 2))
                cfg = params.config.model_copy(update={"local_window": local_window})
                x = torch.randn(n_channels, n_time, params.n_embed, generator=g, dtype=torch.float64)
                fast = efficient_mvpa_logits(x, params, cfg)
                slow = naive_mvpa_logits(x, params, local_window=local_window)
                if not torch.equal(fast.mask, slow.mask):
                    raise AssertionError(f"máscaras distintas para T={n_time}, C={n_channels}")
                for name in ("content", "time", "channel"):
                    a, b = getattr(fast, name), getattr(slow, name)
                    diff = (a - b).masked_fill(~fast.mask, 0.0).abs().max().item()
                    worst = max(worst, diff)
    if worst >= 1e-10:
        raise AssertionError(f"diferencia máxima {worst:.3e} >= 1e-10")
    return f"{settings.instances} instancias × 36 formas, diferencia máxima {worst:.3e}"


def check_causality(settings):
    model = random_model(settings.seed, dropout=0.1)
    rng = np.random.default_rng(settings.seed)
    n_channels, n_time = 3, 6
    cells = rng.standard_normal((n_channels, n_time, model.config.segment_samples))
    with torch.no_grad():
        reference = model(cells, seed=settings.seed)
        for trial in range(settings.causality_trials):
            t0 = int(rng.integers(1, n_time))
            perturbed = cells.copy()
            perturbed[:, t0:] += rng.standard_normal(perturbed[:, t0:].shape) * 10.0
            output = model(perturbed, seed=settings.seed)
            if not torch.equal(output[:, :t0], reference[:, :t0]):
                raise AssertionError(f"la salida anterior a t={t0} cambió en el ensayo {trial}")
    return f"{settings.causality_trials} ensayos sin cambios en el pasado"


def check_structure(settings):
    params = random_attention(settings.seed, n_heads=2, n_gqa=2, local_window=2)
    n_channels, n_time = 4, 5
    x = torch.randn(params.n_embed, generator=_generator(settings.seed), dtype=torch.float64)
    grid = x.expand(n_channels, n_time, -1).contiguous()
    logits = efficient_mvpa_logits(grid, params)
    shape = (params.n_heads, n_channels, n_time, n_channels, n_time)
    time_logits = logits.time.reshape(shape)
    channel_logits = logits.channel.reshape(shape)

    # Tiempo: no depende del canal clave y es Toeplitz en (t, t')
    if not torch.equal(time_logits, time_logits[:, :, :, :1, :].expand(shape)):
        raise AssertionError("los logits de tiempo dependen del canal clave")
    shifted = time_logits[:, :, 1:, :, 1:]
    base = time_logits[:, :, :-1, :, :-1]
    if not torch.allclose(shifted, base, rtol=0.0, atol=1e-12):
        raise AssertionError("los logits de tiempo no son Toeplitz")
    # Canal: no depende del instante clave
    if not torch.equal(channel_logits, channel_logits[..., :1].expand(shape)):
        raise AssertionError("los logits de canal dependen del instante clave")
    return "tiempo independiente del canal y Toeplitz; canal independiente del instante"


def check_counters(settings):
    params = random_attention(settings.seed, n_heads=2, n_gqa=1, max_time=16, max_channels=8)
    for n_time, n_channels, local_window in [(1, 1, 1), (4, 3, 2), (8, 5, 3), (16, 8, 10), (5, 2, 16)]:
        counters = OpCounters()
        cfg = params.config.model_copy(update={"local_window": local_window})
        x = torch.zeros(n_channels, n_time, params.n_embed, dtype=torch.float64)
        efficient_mvpa_logits(x, params, cfg, counters)
        expected = expected_counters(params.n_heads, n_channels, n_time, local_window)
        if counters != expected:
            raise AssertionError(f"T={n_time}, C={n_channels}, L={local_window}: {counters} != {expected}")
        if counters.content_dots > params.n_heads * n_channels ** 2 * n_time * local_window:
            raise AssertionError("content_dots supera H·C²·T·L")
    return "contadores iguales a H·C²·Σ(T-δ), H·C·T² y H·T·C·(2C-1)"


def check_dropout(settings):
    rate = 0.1
    p = dropout_probability(rate)
    if abs((1.0 - p) ** 2 - (1.0 - rate)) > 1e-12:
        raise AssertionError(f"p={p} no conserva la tasa {rate}")
    dropped = [1.0 - structured_dropout_mask(20, 20, rate, settings.seed * 1_000_003 + i).double().mean().item()
               for i in range(settings.dropout_draws)]
    fraction = float(np.mean(dropped))
    if abs(fraction - rate) > 0.01:
        raise AssertionError(f"fracción eliminada {fraction:.4f} fuera de {rate} ± 0.01")
    return f"p={p:.12f}, fracción eliminada {fraction:.4f} en {settings.dropout_draws} sorteos"


def check_wavelet(settings):
    rng = np.random.default_rng(settings.seed)
    for length in (16, 64, 256, 2560):
        level = encoder_level(length)
        x = rng.standard_normal((3, length))
        coeffs = dwt_db4(x, level)
        flat = flatten_coeffs(coeffs)
        if flat.shape[-1] != length:
            raise AssertionError(f"{flat.shape[-1]} coeficientes para longitud {length}")
        if np.max(np.abs(idwt_db4(coeffs) - x)) >= 1e-8:
            raise AssertionError(f"la reconstrucción falla para longitud {length}")
        energy = np.sum(x ** 2, axis=-1)
        if np.max(np.abs(np.sum(flat ** 2, axis=-1) - energy) / energy) >= 1e-8:
            raise AssertionError(f"la energía no se conserva para longitud {length}")
    return "reconstrucción y energía < 1e-8; 2560 muestras → 2560 coeficientes (nivel 8)"


def check_contrastive(settings):
    cfg = ContrastiveConfig(temperature=0.1, n_negatives=30)
    basis = torch.eye(31, dtype=torch.float64)
    uniform = contrastive_loss(basis[0], basis[1], basis[1:31], cfg).item()
    if abs(uniform - math.log(31)) > 1e-9:
        raise AssertionError(f"pérdida uniforme {uniform} != ln(31)")
    perfect = contrastive_loss(basis[0], basis[0], basis[1:31], cfg).item()
    expected = math.log1p(30 * math.exp(-10))
    if abs(perfect - expected) > 1e-12:
        raise AssertionError(f"pérdida perfecta {perfect} != {expected}")
    return f"ln(31)={uniform:.10f}; perfecta={perfect:.6e}"


def check_attention_gradient(settings):
    params = random_attention(settings.seed, n_heads=2, n_gqa=1, local_window=2, std=0.3)
    x = torch.randn(3, 4, params.n_embed, generator=_generator(settings.seed + 1), dtype=torch.float64)
    weights = torch.randn(3, 4, params.n_embed, generator=_generator(settings.seed + 2), dtype=torch.float64)

    def loss():
        return (mvpa_forward(x, params) * weights).sum()

    rows = finite_difference_check(loss, params.named_parameters(), seed=settings.seed)
    worst = max(rows, key=lambda row: row.rel_error)
    if worst.rel_error >= 1e-4:
        raise AssertionError(f"{worst.name}: error relativo {worst.rel_error:.3e} >= 1e-4")
    return f"error relativo máximo {worst.rel_error:.3e} ({worst.name})"


def check_model_gradient(settings):
    model = random_model(settings.seed)
    rng = np.random.default_rng(settings.seed)
    windows = rng.standard_normal((2, 3, 5, model.config.segment_samples))
    with torch.no_grad():
        targets = model.encode(windows)

    def loss():
        return batch_contrastive(model(windows), targets, seed=settings.seed)[0]

    rows = finite_difference_check(loss, model.named_parameters(), seed=settings.seed)
    worst = max(rows, key=lambda row: row.rel_error)
    if worst.rel_error >= 1e-3:
        raise AssertionError(f"{worst.name}: error relativo {worst.rel_error:.3e} >= 1e-3")
    return f"{len(rows)} tensores, error relativo máximo {worst.rel_error:.3e} ({worst.name})"


def check_lora(settings):
    model = random_model(settings.seed)
    cells = np.random.default_rng(settings.seed).standard_normal((2, 4, model.config.segment_samples))
    with torch.no_grad():
        before = model(cells)
        apply_lora(model)
        after = model(cells)
    if not torch.equal(before, after):
        raise AssertionError("los adaptadores recién creados cambian la salida")
    top_only = random_model(settings.seed, n_layers=3, lora_layers=1)
    apply_lora(top_only)
    adapted = [isinstance(layer.attention.q_proj, LoraLinear) for layer in top_only.layers]
    if adapted != [False, False, True]:
        raise AssertionError(f"lora_layers=1 debe adaptar solo el bloque superior: {adapted}")
    small_config = ModelConfig(**profile_values("small"))
    small = parameter_census(small_config)
    if not 0.0005 <= small.lora_fraction <= 0.002:
        raise AssertionError(f"fracción LoRA {small.lora_fraction:.4%} fuera de 0.1% × [0.5, 2]")
    return (f"no-op exacto; fracción LoRA {small.lora_fraction:.3%} "
            f"(small, {small_config.n_lora_layers} de {small_config.n_layers} bloques)")


def check_census(settings):
    small = parameter_census(ModelConfig(**profile_values("small")))
    if not 67.5e6 <= small.total <= 82.5e6:
        raise AssertionError(f"el perfil small tiene {small.total} parámetros, fuera de 75M ± 10%")
    toy_config = ModelConfig()
    toy = count_parameters(MVPFormer(toy_config))
    if toy != parameter_census(toy_config).total:
        raise AssertionError(f"recuento toy {toy} != censo {parameter_census(toy_config).total}")
    return f"small: {small.total} parámetros; toy: {toy}"


def check_kappa_independent(settings):
    rng = np.random.default_rng(settings.seed)
    labels = rng.integers(0, 2, 10_000)
    if cohen_kappa(labels, labels) != 1.0:
        raise AssertionError("kappa de etiquetas idénticas debe ser 1")
    other = rng.integers(0, 2, 10_000)
    full = cohen_kappa(labels, other)
    sampled = kappa_estimate(labels, other, seed=settings.seed).kappa
    if abs(full) >= 0.05 or abs(sampled) >= 0.05:
        raise AssertionError(f"kappa de etiquetas independientes {full:.4f} (estimado {sampled:.4f}), |κ| >= 0.05")
    return f"idénticas: 1.0; independientes: {full:.4f} (estimado {sampled:.4f})"


def check_optimizer(settings):
    theta = torch.tensor([0.7], dtype=torch.float64, requires_grad=True)
    lr, wd, (b1, b2), eps = 0.01, 0.1, (0.9, 0.999), 1e-8
    state = OptimizerState([theta], lr=lr, betas=(b1, b2), eps=eps, weight_decay=wd)
    state.set_moments(theta, 3, torch.tensor([0.2], dtype=torch.float64), torch.tensor([0.05], dtype=torch.float64))
    adamw_step([theta], [torch.tensor([0.3], dtype=torch.float64)], state)
    m = b1 * 0.2 + (1 - b1) * 0.3
    v = b2 * 0.05 + (1 - b2) * 0.09
    expected = 0.7 * (1 - lr * wd) - lr * (m / (1 - b1 ** 4)) / (math.sqrt(v / (1 - b2 ** 4)) + eps)
    if abs(theta.item() - expected) >= 1e-12 or state.step != 4:
        raise AssertionError(f"paso AdamW {theta.item()!r} != {expected!r} (paso {state.step})")

    target = torch.randn(8, generator=_generator(settings.seed), dtype=torch.float64)
    point = torch.zeros(8, dtype=torch.float64, requires_grad=True)
    state = OptimizerState([point], lr=0.05, weight_decay=0.0)
    for _ in range(1000):
        loss = 0.5 * ((point - target) ** 2).sum()
        adamw_step([point], backward(loss, [point]), state)
    distance = (point.detach() - target).norm().item()
    if distance >= 1e-3:
        raise AssertionError(f"AdamW no converge en una cuadrática: distancia {distance:.3e} tras 1000 pasos")
    return f"paso a mano exacto; cuadrática a {distance:.2e} del óptimo"


def check_evaluation(settings):
    merged = episodic_postprocess(EventList(events=[(0.0, 30.0), (200.0, 240.0)]))
    if merged.events != [(0.0, 240.0)]:
        raise AssertionError(f"fusión incorrecta: {merged.events}")
    if episodic_postprocess(EventList(events=[(0.0, 15.0)])).events:
        raise AssertionError("un evento de 15 s debe eliminarse")
    if episodic_postprocess(merged) != merged:
        raise AssertionError("el post-procesado no es idempotente")
    if cohen_kappa([1, 1, 0, 0], [1, 0, 1, 0]) != 0.0:
        raise AssertionError("kappa de etiquetas independientes debe ser 0")
    labels = np.random.default_rng(settings.seed).integers(0, 2, 2000)
    if kappa_estimate(labels, labels, seed=settings.seed).kappa != 1.0:
        raise AssertionError("kappa estimado de etiquetas idénticas debe ser 1")
    return "reglas episódicas, kappa y estimador correctos"


CHECKS = {
    "oracle_equivalence": check_oracle_equivalence,
    "causality": check_causality,
    "structural_invariants": check_structure,
    "op_counters": check_counters,
    "structured_dropout": check_dropout,
    "wavelet": check_wavelet,
    "contrastive_closed_forms": check_contrastive,
    "attention_gradient": check_attention_gradient,
    "model_gradient": check_model_gradient,
    "kappa_independent": check_kappa_independent,
    "optimizer": check_optimizer,
    "lora": check_lora,
    "parameter_census": check_census,
    "evaluation_rules": check_evaluation,
}

_original_shift_time = mvpa_attention.shift_time


def _corrupted_shift_time(raw):
    return torch.roll(_original_shift_time(raw), 1, dims=-1)


FAULTS = {"shift_time": lambda: mock.patch.object(mvpa_attention, "shift_time", _corrupted_shift_time)}


def run_checks(settings=None):
    """
    Ejecuta la batería de verificación y devuelve un resultado por comprobación.

    Parámetros:
    - settings (VerifySettings | None): Tamaños, semilla, subconjunto de comprobaciones y fallo inyectado
      (`fault="shift_time"` corrompe el desplazamiento de tiempo para comprobar que la batería lo detecta).

    Retorna:
    - list[CheckResult]: Resultados en el orden de `CHECKS`.
    """
    settings = settings or VerifySettings()
    names = settings.checks or list(CHECKS)
    unknown = [name for name in names if name not in CHECKS]
    if unknown:
        raise InvalidInputError(f"comprobaciones desconocidas: {unknown}")
    if settings.fault is not None and settings.fault not in FAULTS:
        raise InvalidInputError(f"fallo desconocido: {settings.fault}")

    results = []
    with FAULTS[settings.fault]() if settings.fault else nullcontext():
        for name in names:
            start = time.perf_counter()
            try:
                detail = CHECKS[name](settings)
                results.append(CheckResult(name=name, status="PASSED", duration=time.perf_counter() - start,
                                           detail=detail))
                logger.info(f"{name}: PASSED ({detail})")
            except AssertionError as e:
                results.append(CheckResult(name=name, status="FAILED", error=str(e),
                                           duration=time.perf_counter() - start))
                logger.error(f"{name}: FAILED ({e})")
    return results
