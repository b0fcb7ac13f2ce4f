"""Command-line entry point: synth, train, calibrate, detect, eval, sweep, export-weights.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import types
import typing
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ABLATIONS, ConfigError, RunConfig
from .data import DataError, LabeledSeries, SynthConfig, load_csv, partition_by_class, synth_generate, write_csv
from .detect import NORMAL, ABNORMAL, CalibrationError, Threshold, calibrate, detect, reconstruction_errors
from .experiment import PreparedData, prepare, run, train_model, write_history
from .memory import DegenerateQueryError
from .model import AmslModel
from .nn import NumericalError
from .signal import EmptyInputError, ParameterError, apply_minmax, sliding_windows

log = logging.getLogger("amsl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

SWEEP_AXES = {
    "V": "window_length",
    "C": "memory_size",
    "F": "feature_size",
    "lambda1": "lambda1",
    "lambda2": "lambda2",
    "noise_ratio": "noise_ratio",
    "anomaly_pct": "anomaly_pct",
    "R": "n_transforms",
}
METRIC_KEYS = ("mPre", "mRec", "mF1", "Acc", "F1_normal", "F1_abnormal")
CHECKPOINT_NAME = "model.amsl"

# flags handled explicitly rather than generated from RunConfig
_SPECIAL = {"seed", "ablation", "percentile"}


# ---------------------------------------------------------------------------
# config flags


def _field_kind(f: dataclasses.Field) -> tuple[type, bool]:
    """Base scalar type of a RunConfig field and whether it is a tuple."""
    hint = typing.get_type_hints(RunConfig)[f.name]
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        hint = args[0]
        origin = typing.get_origin(hint)
    if origin is tuple:
        return typing.get_args(hint)[0], True
    return hint, False


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration (overrides --config)")
    g.add_argument("--config", type=Path, help="JSON config file")
    g.add_argument("--seed", type=int)
    g.add_argument("--ablation", choices=ABLATIONS)
    for f in dataclasses.fields(RunConfig):
        if f.name in _SPECIAL:
            continue
        base, is_tuple = _field_kind(f)
        flag = "--" + f.name.replace("_", "-")
        if is_tuple:
            g.add_argument(flag, dest=f.name, type=lambda s, b=base: tuple(b(v) for v in s.split(",")),
                           metavar="A,B,...")
        elif base is bool:
            g.add_argument(flag, dest=f.name, type=_parse_bool, metavar="BOOL")
        else:
            g.add_argument(flag, dest=f.name, type=base)


def config_from_args(args: argparse.Namespace, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
    overrides = {}
    for f in dataclasses.fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = value
    return cfg.replace(**overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# corpus helpers


def _synth_config(cfg: RunConfig) -> SynthConfig:
    return SynthConfig(channels=cfg.channels or 3, window_length=cfg.window_length)


def load_corpus(path: Path | None, cfg: RunConfig) -> list[LabeledSeries]:
    """CSV corpus, or the synthetic corpus (seeded by ``cfg.seed``) when no path is given."""
    if path is None:
        cfg.validate(cfg.channels or 3)
        normals, anomalies = synth_generate(_synth_config(cfg), cfg.seed)
        return normals + anomalies
    return load_csv(path)


def _channels_of(corpus: Sequence[LabeledSeries]) -> int:
    if not corpus:
        raise DataError("corpus is empty")
    return corpus[0].values.shape[1]


def _prepare(corpus, cfg: RunConfig) -> PreparedData:
    normals, anomalies = partition_by_class(corpus, cfg.normal_classes)
    if not normals:
        raise DataError("corpus holds no normal-class series")
    return prepare(normals, anomalies, cfg)


def _window_ids(windows) -> list[str]:
    return [f"{w.source_id}:{w.start_index}" for w in windows]


def _checkpoint_path(args) -> Path:
    if args.checkpoint is not None:
        return args.checkpoint
    return args.out_dir / CHECKPOINT_NAME


def _parse_percentiles(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad percentile list {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty percentile list")
    return values


def _parse_values(text: str) -> list[str]:
    values = [v.strip() for v in text.split(",") if v.strip()]
    if not values:
        raise argparse.ArgumentTypeError("sweep needs at least one value")
    return values


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = config_from_args(args)
    sc = SynthConfig(channels=cfg.channels or 3, window_length=cfg.window_length,
                     series_per_class=args.series_per_class, n_anomalies=args.anomalies)
    normals, anomalies = synth_generate(sc, cfg.seed)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    path = args.out_dir / "corpus.csv"
    write_csv(normals + anomalies, path)
    print(f"wrote {len(normals)} normal and {len(anomalies)} anomalous series to {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    corpus = load_corpus(args.corpus, cfg)
    cfg.validate(_channels_of(corpus))  # reject bad geometry before any data work
    data = _prepare(corpus, cfg)
    model, history = train_model(data, cfg)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_history(history, args.out_dir / "history.csv")
    save_checkpoint(model, args.out_dir / CHECKPOINT_NAME)
    (args.out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2), encoding="utf-8")
    print(f"trained {len(history)} epochs; checkpoint at {args.out_dir / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    path = _checkpoint_path(args)
    model = load_checkpoint(path)
    corpus = load_corpus(args.corpus, model.cfg)
    data = _prepare(corpus, model.cfg)
    errors = reconstruction_errors(model, data.calibration)
    percentiles = args.percentile or [model.cfg.percentile]
    thresholds = [calibrate(errors, p) for p in percentiles]
    model.threshold = thresholds[0]
    save_checkpoint(model, path)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "thresholds.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["percentile", "mu", "n_train"])
        for th in thresholds:
            w.writerow([repr(th.percentile), repr(th.mu), th.source])
    for th in thresholds:
        print(f"p{th.percentile:g}: mu = {th.mu!r}")
    print(f"stored mu for p{thresholds[0].percentile:g} in {path}")
    return EXIT_OK


def _require_threshold(model: AmslModel) -> Threshold:
    if model.threshold is None:
        raise CalibrationError("checkpoint has no threshold; run `amsl calibrate` on it first")
    return model.threshold


def cmd_detect(args) -> int:
    model = load_checkpoint(_checkpoint_path(args))
    th = _require_threshold(model)
    if args.corpus is not None and args.all_windows:
        # score every window of every series with the stored normalization
        corpus = load_csv(args.corpus)
        windows, truth = [], []
        normal_ids = set(model.cfg.normal_classes) if model.cfg.normal_classes is not None else None
        for s in corpus:
            x = apply_minmax(s.values, model.norm_lo, model.norm_hi)
            if len(x) < model.cfg.window_length:
                continue
            ws = sliding_windows(x, model.cfg.window_length, model.cfg.window_stride, source_id=s.series_id)
            normal = s.class_id >= 0 if normal_ids is None else s.class_id in normal_ids
            windows.extend(ws)
            truth.extend([NORMAL if normal else ABNORMAL] * len(ws))
        truth_arr = None if args.no_truth else np.asarray(truth)
    else:
        data = _prepare(load_corpus(args.corpus, model.cfg), model.cfg)
        windows, truth_arr = data.test_set(model.cfg.anomaly_pct, model.cfg.seed)
        if args.no_truth:
            truth_arr = None
    if not windows:
        raise DataError("no windows to score")
    report = detect(model, th, windows, truth_arr, _window_ids(windows))
    args.out_dir.mkdir(parents=True, exist_ok=True)
    report.write_csv(args.out_dir / "detections.csv")
    print(f"{int(report.labels_pred.sum())} of {len(windows)} windows flagged; "
          f"written to {args.out_dir / 'detections.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(_checkpoint_path(args))
    th = _require_threshold(model)
    data = _prepare(load_corpus(args.corpus, model.cfg), model.cfg)
    pct = args.anomaly_pct if args.anomaly_pct is not None else model.cfg.anomaly_pct
    windows, truth = data.test_set(pct, model.cfg.seed)
    report = detect(model, th, windows, truth, _window_ids(windows))
    args.out_dir.mkdir(parents=True, exist_ok=True)
    report.write_json(args.out_dir / "metrics.json")
    print(json.dumps(report.metrics, indent=2))
    return EXIT_OK


def _coerce_axis_value(field_name: str, text: str) -> Any:
    f = next(f for f in dataclasses.fields(RunConfig) if f.name == field_name)
    base, _ = _field_kind(f)
    try:
        return base(text)
    except ValueError:
        raise ConfigError(f"sweep value {text!r} is not a valid {field_name}") from None


def cmd_sweep(args) -> int:
    if not args.sweep_axis or not args.sweep_values:
        raise ConfigError("sweep needs --sweep-axis and --sweep-values")
    field_name = SWEEP_AXES[args.sweep_axis]
    base = config_from_args(args)
    corpus = load_corpus(args.corpus, base)
    normals, anomalies = partition_by_class(corpus, base.normal_classes)
    rows = []
    for text in args.sweep_values:
        row = {"axis": args.sweep_axis, "value": text, "status": "ok", "error": ""}
        try:
            cfg = base.replace(**{field_name: _coerce_axis_value(field_name, text)})
            cfg.validate(_channels_of(corpus))
            res = run(normals, anomalies, cfg)
            row.update({k: repr(float(res.metrics[k])) for k in METRIC_KEYS})
        except (ConfigError, DataError, EmptyInputError, ParameterError, NumericalError,
                DegenerateQueryError, CalibrationError, ValueError) as exc:
            log.warning("sweep %s=%s failed: %s", args.sweep_axis, text, exc)
            row.update({"status": "failed", "error": str(exc)})
        rows.append(row)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    path = args.out_dir / f"sweep_{args.sweep_axis}.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["axis", "value", "status", *METRIC_KEYS, "error"])
        w.writeheader()
        w.writerows(rows)
    print(f"{sum(r['status'] == 'ok' for r in rows)} of {len(rows)} runs succeeded; results in {path}")
    return EXIT_OK


def cmd_export_weights(args) -> int:
    model = load_checkpoint(_checkpoint_path(args))
    args.out_dir.mkdir(parents=True, exist_ok=True)
    r = model.n_variants
    path = args.out_dir / "fusion_weights.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", *[f"alpha_g{i}" for i in range(r)], *[f"alpha_l{i}" for i in range(r)]])
        for e, row in enumerate(model.alpha_trace, start=1):
            w.writerow([e, *(repr(float(v)) for v in row)])
    for name, mem in _memories(model):
        np.savetxt(args.out_dir / f"{name}.csv", mem.items.value, delimiter=",", fmt="%.9g")
    print(f"exported fusion weights ({len(model.alpha_trace)} epochs) to {args.out_dir}")
    return EXIT_OK


def _memories(model: AmslModel):
    if model.global_memory is None:
        return []
    out = [("memory_global", model.global_memory)]
    out += [(f"memory_local_{i}", m) for i, m in enumerate(model.local_memories)]
    return out


# ---------------------------------------------------------------------------
# parser and dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amsl", description="Memory-augmented self-supervised anomaly detection")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(name, help_text, corpus=True, checkpoint=False, config=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out-dir", type=Path, default=Path("."), help="directory for outputs")
        if corpus:
            p.add_argument("--corpus", type=Path, help="CSV corpus (default: synthetic corpus)")
        if checkpoint:
            p.add_argument("--checkpoint", type=Path, help=f"checkpoint file (default: OUT_DIR/{CHECKPOINT_NAME})")
        if config:
            _add_config_flags(p)
        return p

    p = common("synth", "write the synthetic corpus as CSV", corpus=False)
    p.add_argument("--series-per-class", type=int, default=SynthConfig.series_per_class)
    p.add_argument("--anomalies", type=int, default=SynthConfig.n_anomalies)
    p.add_argument("--percentile", type=float)
    p.set_defaults(func=cmd_synth)

    p = common("train", "fit a model and write checkpoint + history.csv")
    p.add_argument("--percentile", type=float)
    p.set_defaults(func=cmd_train)

    p = common("calibrate", "set the threshold from training errors", checkpoint=True, config=False)
    p.add_argument("--percentile", type=_parse_percentiles,
                   help="comma list, e.g. 90,95,99; the first value is stored in the checkpoint")
    p.set_defaults(func=cmd_calibrate)

    p = common("detect", "write per-window errors and predictions", checkpoint=True, config=False)
    p.add_argument("--all-windows", action="store_true",
                   help="score every window of --corpus instead of the held-out test split")
    p.add_argument("--no-truth", action="store_true", help="omit ground truth from the output")
    p.set_defaults(func=cmd_detect)

    p = common("eval", "write metrics.json for the test split", checkpoint=True, config=False)
    p.add_argument("--anomaly-pct", type=float, help="subsample test anomalies to this fraction")
    p.set_defaults(func=cmd_eval)

    p = common("sweep", "train/calibrate/eval once per value of one axis")
    p.add_argument("--percentile", type=float)
    p.add_argument("--sweep-axis", choices=sorted(SWEEP_AXES))
    p.add_argument("--sweep-values", type=_parse_values, help="comma list of values")
    p.set_defaults(func=cmd_sweep)

    p = common("export-weights", "write fusion-weight trace and memory matrices as CSV",
               corpus=False, checkpoint=True, config=False)
    p.set_defaults(func=cmd_export_weights)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CalibrationError) as exc:
        print(f"amsl: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, EmptyInputError, ParameterError, CheckpointError, OSError) as exc:
        print(f"amsl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, DegenerateQueryError, FloatingPointError) as exc:
        print(f"amsl: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
