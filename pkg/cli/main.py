import argparse
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from pydantic import ValidationError

import config
from core import series_io
from core.bench import bench_attention
from core.checkpoint import load_checkpoint, save_checkpoint
from core.data_model import (CheckResult, ContrastiveConfig, EventList, ForecastConfig, LoraConfig,
                             MultiChannelSeries, RunConfig, SynthConfig, TrainConfig)
from core.db_manager import DBManager
from core.errors import DataUnderflowError, MVPError
from core.evaluation import (detection_latencies, detection_metrics, episodic_postprocess, forecast_metrics,
                             kappa_estimate, landis_koch, merge_close_truth_events, online_threshold, raw_metrics)
from core.logger import get_logger
from core.model import MVPFormer, parameter_census
from core.objectives import three_reference_eval
from core.profiles import check_instantiable, resolve_model_config
from core.report_writer import (ExcelWriter, checks_frame, read_manifest, write_csv, write_gnuplot,
                                write_manifest)
from core.trainer import (finetune, forecast_predict, last_value_forecast, predict_windows, pretrain,
                          train_forecaster)
from core.verification import CHECKS, FAULTS, VerifySettings, run_checks

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2

# Opciones de la línea de comandos que sobrescriben campos de ModelConfig
MODEL_FLAGS = {"layers": "n_layers", "heads": "n_heads", "gqa": "n_gqa", "embed": "n_embed", "inner": "n_inner",
               "local_window": "local_window", "activation": "activation", "dropout": "dropout",
               "attention": "attention_variant", "lora_layers": "lora_layers"}


def _int_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"se esperaba una lista de enteros separada por comas: {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("la lista no puede estar vacía")
    return values


def _model_config(args, **fixed):
    check_instantiable(args.profile)
    overrides = {field: getattr(args, flag, None) for flag, field in MODEL_FLAGS.items()}
    overrides.update(fixed)
    return resolve_model_config(args.profile, args.config, overrides)


def _dtype(args):
    return torch.float64 if args.dtype == "float64" else torch.float32


def _emit(args, csv_path, x_column, y_columns, title=None, logscale=False):
    if args.emit_gnuplot:
        write_gnuplot(csv_path, x_column, y_columns, title=title, logscale=logscale)


def _load_series(path, labels_path=None):
    series = series_io.load_csv(path)
    if labels_path is None:
        return series
    bits = series_io.intervals_to_seconds(series_io.load_labels(labels_path),
                                          int(np.floor(series.duration_seconds)))
    return MultiChannelSeries(samples=series.samples, sample_rate_hz=series.sample_rate_hz,
                              channel_ids=series.channel_ids, labels=bits)


def _windows(args, series):
    if args.resample_hz:
        series = series_io.resample(series, args.resample_hz)
    grids = series_io.segment(series, args.window_seconds, args.segment_seconds, args.stride_seconds)
    if not grids:
        return np.zeros((0, series.n_channels, 0, 0)), []
    return np.stack([g.cells for g in grids]), grids


def cmd_gen_data(args, out, run):
    """
    Genera una serie sintética con ráfagas anómalas y guarda `series.csv` y `labels.csv`.
    """
    synth = SynthConfig(n_channels=args.channels, duration_s=args.duration, sample_rate_hz=args.sample_rate,
                        burst_rate_per_hour=args.burst_rate, coupling=args.coupling, noise_std=args.noise)
    series = series_io.synth_generate(synth, args.seed)
    series_io.save_csv(series, out / "series.csv")
    series_io.save_labels(series_io.seconds_to_intervals(series.labels), out / "labels.csv")
    print(f"Serie generada: {series.n_channels} canales, {series.duration_seconds:.0f} s → {out}")
    return EXIT_OK, []


def cmd_verify(args, out, run):
    """
    Ejecuta la batería de verificación; devuelve 1 si alguna comprobación falla.
    """
    checks = [c.strip() for c in args.checks.split(",")] if args.checks else None
    settings = VerifySettings(instances=args.instances, causality_trials=args.causality_trials,
                              dropout_draws=args.dropout_draws, seed=args.seed, checks=checks,
                              fault=args.inject_fault)
    results = run_checks(settings)
    write_csv(checks_frame(results), out / "verify.csv")
    ExcelWriter(str(out / "verify.xlsx")).write_results(results, f"verify_{time.strftime('%Y%m%d_%H%M%S')}")

    failed = [r.name for r in results if r.status == "FAILED"]
    print("\n--- Resumen de la verificación ---")
    print(f"Comprobaciones: {len(results)}")
    print(f"Pasadas: {len(results) - len(failed)}")
    print(f"Falladas: {len(failed)}")
    if failed:
        print(f"Comprobaciones falladas: {', '.join(failed)}")
        return EXIT_CHECK_FAILED, results
    return EXIT_OK, results


def cmd_bench_attn(args, out, run):
    """
    Mide el oráculo ingenuo frente al cálculo eficiente para cada par (T, C) y guarda `bench_attn.csv`.
    """
    try:
        df = bench_attention(args.t_list, args.c_list, n_heads=args.heads or 4, n_gqa=args.gqa or 2,
                             n_embed=args.embed or 32, local_window=args.local_window or 10,
                             repeats=args.repeats, seed=args.seed)
    except AssertionError as e:
        logger.error(f"bench-attn: {e}")
        return EXIT_CHECK_FAILED, [CheckResult(name="op_counters", status="FAILED", error=str(e))]
    path = write_csv(df, out / "bench_attn.csv")
    _emit(args, path, "T", ["naive_ns", "efficient_ns"], title="MVPA: ingenuo frente a eficiente", logscale=True)
    return EXIT_OK, []


def cmd_pretrain(args, out, run):
    """
    Pre-entrenamiento contrastivo sobre las ventanas de una serie; guarda la traza, un checkpoint y la evaluación
    de tres referencias sobre la última ventana.
    """
    series = _load_series(args.data)
    windows, _ = _windows(args, series)
    model_config = _model_config(args, segment_samples=windows.shape[-1]) if windows.size else _model_config(args)
    torch.manual_seed(args.seed)
    run.model = model_config
    model = MVPFormer(model_config).to(_dtype(args))
    train = TrainConfig(steps=args.steps, batch_size=args.batch_size, seed=args.seed, lr=args.lr,
                        contrastive=ContrastiveConfig(temperature=args.temperature, n_negatives=args.negatives))
    result = pretrain(model, windows, train, progress=True)

    path = write_csv(result.trace, out / "pretrain_trace.csv")
    _emit(args, path, "step", ["loss", "accuracy"], title="Pre-entrenamiento")
    save_checkpoint(str(out / "checkpoint"), result.model)
    census = parameter_census(model_config)
    write_csv(pd.DataFrame([census.model_dump(exclude={"per_layer"})]), out / "census.csv")

    reference = three_reference_eval(result.model, windows[-1], segment_seconds=args.segment_seconds, seed=args.seed)
    write_csv(pd.DataFrame([reference.model_dump()]), out / "three_reference.csv")
    run.metrics["three_reference"] = reference.model_dump()
    detail = (f"sim_true={reference.sim_true:.4f}, sim_two_step={reference.sim_two_step:.4f}, "
              f"sim_random={reference.sim_random:.4f}")
    logger.info(f"Evaluación de tres referencias: {detail}")
    return EXIT_OK, [CheckResult(name="three_reference", status="PASSED", detail=detail)]


def cmd_finetune(args, out, run):
    """
    Ajuste fino con LoRA sobre ventanas etiquetadas; evalúa en las últimas ventanas, que no se usan para entrenar.
    """
    if args.checkpoint is None:
        raise FileNotFoundError("finetune necesita --checkpoint (el directorio escrito por pretrain)")
    model, _, existing_lora = load_checkpoint(args.checkpoint)
    run.model = model.config
    series = _load_series(args.data, args.labels)
    windows, grids = _windows(args, series)
    labels = np.array([int(g.labels[-1]) for g in grids], dtype=np.int64)
    n_test = int(round(len(grids) * args.test_fraction))
    if n_test < 1 or len(grids) - n_test < 1:
        raise DataUnderflowError(f"{len(grids)} ventanas no bastan para separar entrenamiento y prueba", 2)

    lora = None if existing_lora else LoraConfig(rank=args.lora_rank, alpha=args.lora_alpha)
    train = TrainConfig(mode="finetune", steps=args.steps, batch_size=args.batch_size, seed=args.seed, lr=args.lr,
                        lora=lora, freeze_base=True)
    result = finetune(model, windows[:-n_test], labels[:-n_test], train, progress=True)

    path = write_csv(result.trace, out / "finetune_trace.csv")
    _emit(args, path, "step", ["loss", "accuracy"], title="Ajuste fino")
    scores = predict_windows(result.model, result.head, windows[-n_test:])
    predictions = pd.DataFrame({"start_s": [g.start_seconds for g in grids[-n_test:]],
                                "score": scores, "predicted": (scores > 0.5).astype(int), "label": labels[-n_test:]})
    write_csv(predictions, out / "predictions.csv")
    metrics = raw_metrics(predictions["predicted"], predictions["label"])
    write_csv(pd.DataFrame([metrics.model_dump()]), out / "finetune_metrics.csv")
    save_checkpoint(str(out / "checkpoint"), result.model,
                    extra_tensors={f"head.{k}": v for k, v in result.head.state_dict().items()},
                    lora_config=existing_lora or lora)
    print(f"F1 en prueba: {metrics.f1:.3f} ({n_test} ventanas)")
    return EXIT_OK, []


def cmd_eval(args, out, run):
    """
    Evaluación por eventos y por segundos de unas etiquetas predichas frente a las reales.
    """
    pred_intervals = series_io.load_labels(args.pred)
    truth_intervals = series_io.load_labels(args.truth)
    n_seconds = args.duration or int(np.ceil(max([e for _, e in pred_intervals + truth_intervals], default=1.0)))
    pred_bits = series_io.intervals_to_seconds(pred_intervals, n_seconds)
    truth_bits = series_io.intervals_to_seconds(truth_intervals, n_seconds)
    hours = n_seconds / 3600.0

    truth_events = merge_close_truth_events(EventList(events=truth_intervals, recording_hours=hours))
    if args.online:
        pred_events = online_threshold(pred_bits)
        latencies = detection_latencies(pred_bits)
        write_csv(pd.DataFrame({"onset_s": [s for s, _ in pred_events.events], "latency_s": latencies}),
                  out / "latencies.csv")
    else:
        raw = series_io.seconds_to_intervals(pred_bits)
        positives = [int(pred_bits[int(s):int(e)].sum()) for s, e in raw]
        pred_events = episodic_postprocess(EventList(events=raw, positives=positives, recording_hours=hours))

    detection = detection_metrics(pred_events, truth_events, hours)
    per_second = raw_metrics(pred_bits, truth_bits)
    kappa = kappa_estimate(pred_bits, truth_bits, n_segments=args.kappa_segments, iterations=args.kappa_iterations,
                           seed=args.seed)
    run.metrics.update(kappa=kappa.kappa, f1=detection.f1)
    row = {**detection.model_dump(), "kappa": kappa.kappa, "agreement": landis_koch(kappa.kappa),
           "raw_f1": per_second.f1, "raw_sensitivity": per_second.sensitivity,
           "raw_specificity": per_second.specificity, "n_pred_events": len(pred_events.events),
           "n_truth_events": len(truth_events.events)}
    write_csv(pd.DataFrame([row]), out / "eval.csv")
    trace = pd.DataFrame({"iteration": np.arange(1, len(kappa.running_means) + 1),
                          "running_mean": kappa.running_means, "delta": [np.nan] + kappa.deltas})
    path = write_csv(trace, out / "kappa_trace.csv")
    _emit(args, path, "iteration", ["running_mean"], title="Kappa: media acumulada")
    print(f"kappa={kappa.kappa:.4f} ({landis_koch(kappa.kappa)}), F1 por eventos={detection.f1:.3f}")
    return EXIT_OK, []


def cmd_forecast(args, out, run):
    """
    Predicción multivariante: entrena sobre el primer 80 % de la serie y compara con la referencia del último valor
    en el resto.
    """
    if args.data:
        series = _load_series(args.data)
    else:
        series = series_io.synth_generate(SynthConfig(n_channels=args.channels, duration_s=args.duration,
                                                      burst_rate_per_hour=0.0), args.seed)
    cut = int(series.n_samples * 0.8)
    split = [series.samples[:, :cut], series.samples[:, cut:]]
    train_series, test_series = [MultiChannelSeries(samples=s, sample_rate_hz=series.sample_rate_hz,
                                                    channel_ids=series.channel_ids) for s in split]
    forecast = ForecastConfig(lookback=args.lookback, horizon=args.horizon, segment_samples=args.segment_samples,
                              stride=args.stride, steps=args.steps, batch_size=args.batch_size, lr=args.lr,
                              seed=args.seed)
    past, future = series_io.make_forecast_windows(train_series, forecast.lookback, forecast.horizon, forecast.stride)
    result = train_forecaster(past, future, forecast, _model_config(args), progress=True)
    run.model = result.model.config

    test_past, test_future = series_io.make_forecast_windows(test_series, forecast.lookback, forecast.horizon,
                                                             forecast.horizon)
    model_metrics = forecast_metrics(forecast_predict(result.model, result.head, test_past, forecast.segment_samples),
                                     test_future)
    baseline = forecast_metrics(last_value_forecast(test_past, forecast.horizon), test_future)
    report = pd.DataFrame([{"method": "mvpformer", **model_metrics.model_dump()},
                           {"method": "last_value", **baseline.model_dump()}])
    write_csv(report, out / "forecast.csv")
    path = write_csv(result.trace, out / "forecast_trace.csv")
    _emit(args, path, "step", ["loss"], title="Predicción: pérdida de entrenamiento", logscale=True)
    print(f"MSE modelo={model_metrics.mse:.4f}, MSE último valor={baseline.mse:.4f}")
    return EXIT_OK, []


COMMANDS = {"gen-data": cmd_gen_data, "verify": cmd_verify, "bench-attn": cmd_bench_attn, "pretrain": cmd_pretrain,
            "finetune": cmd_finetune, "eval": cmd_eval, "forecast": cmd_forecast}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=config.DEFAULT_SEED)
    common.add_argument("--out", default=None, help="directorio de salida (por defecto reports/<comando>)")
    common.add_argument("--config", default=None, help="archivo de perfil clave=valor")
    common.add_argument("--profile", choices=["toy", "small"], default="toy")
    common.add_argument("--emit-gnuplot", action="store_true", help="escribe un script .gp junto a cada traza CSV")
    common.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    common.add_argument("--db", default=config.DB_PATH, help="base de datos SQLite de resultados")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--layers", type=int)
    model.add_argument("--heads", type=int)
    model.add_argument("--gqa", type=int)
    model.add_argument("--embed", type=int)
    model.add_argument("--inner", type=int)
    model.add_argument("--local-window", type=int)
    model.add_argument("--activation", choices=["softmax", "sigmoid"])
    model.add_argument("--dropout", type=float)
    model.add_argument("--attention", choices=["mvpa", "vanilla"])
    model.add_argument("--lora-layers", type=int)

    window_seconds, segment_seconds, stride_seconds = series_io.default_window_layout()
    windows = argparse.ArgumentParser(add_help=False)
    windows.add_argument("--data", required=True, help="serie CSV (formato de gen-data)")
    windows.add_argument("--window-seconds", type=float, default=window_seconds)
    windows.add_argument("--segment-seconds", type=float, default=segment_seconds)
    windows.add_argument("--stride-seconds", type=float, default=stride_seconds)
    windows.add_argument("--resample-hz", type=float, default=None)

    parser = argparse.ArgumentParser(prog="mvpformer", description="MVPA y MVPFormer a escala de escritorio")
    parser.add_argument("--from-manifest", default=None, help="repite la ejecución registrada en un manifest.json")
    parser.add_argument("--out", dest="replay_out", default=None, help="directorio de salida de la repetición")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", parents=[common], help="genera una serie sintética etiquetada")
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--duration", type=float, default=3600.0)
    p.add_argument("--sample-rate", type=float, default=64.0)
    p.add_argument("--burst-rate", type=float, default=6.0)
    p.add_argument("--coupling", type=float, default=0.8)
    p.add_argument("--noise", type=float, default=0.05)

    p = sub.add_parser("verify", parents=[common], help="batería de invariantes")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--causality-trials", type=int, default=1000)
    p.add_argument("--dropout-draws", type=int, default=10000)
    p.add_argument("--checks", default=None, help=f"subconjunto separado por comas de: {', '.join(CHECKS)}")
    p.add_argument("--inject-fault", choices=sorted(FAULTS), default=None, help="corrompe una operación (pruebas)")

    p = sub.add_parser("bench-attn", parents=[common, model], help="ingenuo frente a eficiente")
    p.add_argument("--t-list", type=_int_list, default=[1, 2, 4, 8, 16, 32])
    p.add_argument("--c-list", type=_int_list, default=[1, 2, 4, 8, 16, 32])
    p.add_argument("--repeats", type=int, default=3)

    p = sub.add_parser("pretrain", parents=[common, model, windows], help="pre-entrenamiento contrastivo")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--temperature", type=float, default=config.TEMPERATURE)
    p.add_argument("--negatives", type=int, default=config.N_NEGATIVES)

    p = sub.add_parser("finetune", parents=[common, model, windows], help="ajuste fino con LoRA")
    p.add_argument("--labels", required=True, help="intervalos <start_s>,<end_s>")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lora-rank", type=int, default=config.LORA_RANK)
    p.add_argument("--lora-alpha", type=float, default=config.LORA_ALPHA)
    p.add_argument("--test-fraction", type=float, default=0.25)

    p = sub.add_parser("eval", parents=[common], help="métricas de detección y kappa")
    p.add_argument("--pred", required=True, help="intervalos predichos")
    p.add_argument("--truth", required=True, help="intervalos reales")
    p.add_argument("--duration", type=int, default=None, help="duración de la grabación en segundos")
    p.add_argument("--online", action="store_true", help="regla en línea 3 de 10 en lugar del post-procesado")
    p.add_argument("--kappa-segments", type=int, default=config.KAPPA_SEGMENTS)
    p.add_argument("--kappa-iterations", type=int, default=config.KAPPA_ITERATIONS)

    p = sub.add_parser("forecast", parents=[common, model], help="predicción multivariante")
    p.add_argument("--data", default=None, help="serie CSV; por defecto sinusoides acopladas sintéticas")
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--duration", type=float, default=600.0)
    p.add_argument("--lookback", type=int, default=96)
    p.add_argument("--horizon", type=int, default=96)
    p.add_argument("--segment-samples", type=int, default=16)
    p.add_argument("--stride", type=int, default=8)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    return parser


def _resolve_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.from_manifest is not None:
        manifest = read_manifest(args.from_manifest)
        replay = argparse.Namespace(**manifest.args)
        replay.out = args.replay_out or manifest.out_dir
        return replay
    if args.command is None:
        parser.error("se necesita un comando o --from-manifest")
    return args


def _record(args, results, exit_code, duration):
    db = DBManager(args.db)
    db.create_tables()
    execution_id = db.insert_run_execution(args.command, args.seed, args.out)
    if execution_id is None:
        return
    for result in results:
        db.insert_check_result(execution_id, result)
    db.insert_run_summary(execution_id, {
        "TotalChecks": len(results),
        "PassedChecks": sum(1 for r in results if r.status == "PASSED"),
        "FailedChecks": sum(1 for r in results if r.status == "FAILED"),
        "TotalDuration": duration,
        "ExitCode": exit_code,
    })


def main(argv=None):
    """
    Punto de entrada: `python -m cli.main <comando> [opciones]` o `python -m cli.main --from-manifest <ruta>`.

    Retorna:
    - int: 0 si todo va bien, 1 si falla alguna comprobación, 2 ante errores de uso o de entrada.
    """
    try:
        args = _resolve_args(argv)
    except MVPError as e:
        logger.error(f"{e}")
        return EXIT_USAGE
    args.out = args.out or str(Path(config.REPORTS_DIR) / args.command)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    recorded = {k: v for k, v in vars(args).items() if k not in {"from_manifest", "replay_out"}}
    run = RunConfig(command=args.command, seed=args.seed, out_dir=args.out, profile=args.profile,
                    config_file=args.config, args=recorded)
    start = time.perf_counter()
    try:
        write_manifest(run, out)
        exit_code, results = COMMANDS[args.command](args, out, run)
        write_manifest(run, out)
    except (MVPError, ValidationError, FileNotFoundError) as e:
        logger.error(f"{args.command}: {e}")
        exit_code, results = EXIT_USAGE, [CheckResult(name=args.command, status="FAILED", error=str(e))]
    _record(args, results, exit_code, time.perf_counter() - start)
    return exit_code


if __name__ == "__main__":
    sys.exit(main())
