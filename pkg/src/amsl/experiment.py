"""End-to-end runs: split -> normalize -> window -> fit -> calibrate -> evaluate."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .data import LabeledSeries, inject_noise, split, subsample_anomalies
from .detect import NORMAL, ABNORMAL, DetectionReport, Threshold, calibrate, detect, reconstruction_errors
from .model import AmslModel, EpochRecord, fit
from .signal import Window, apply_minmax, fit_minmax, sliding_windows

log = logging.getLogger(__name__)


@dataclass
class PreparedData:
    train: list[Window]
    val: list[Window]
    test_normal: list[Window]
    test_anomaly: list[Window]
    lo: np.ndarray
    hi: np.ndarray
    noisy_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    clean_train: list[Window] | None = None

    @property
    def calibration(self) -> list[Window]:
        """Training windows as they were before harness noise; the threshold is fitted on these."""
        return self.clean_train if self.clean_train is not None else self.train

    def test_set(self, anomaly_pct: float | None = None, seed: int = 0):
        anomalies = self.test_anomaly
        if anomaly_pct is not None:
            anomalies = subsample_anomalies(len(self.test_normal), anomalies, anomaly_pct, seed)
        windows = self.test_normal + anomalies
        truth = np.array([NORMAL] * len(self.test_normal) + [ABNORMAL] * len(anomalies))
        return windows, truth


def _windows(series: Sequence[LabeledSeries], cfg: RunConfig, lo, hi) -> list[Window]:
    out = []
    for s in series:
        x = apply_minmax(s.values, lo, hi)
        if len(x) < cfg.window_length:
            log.warning("series %s shorter than window length; skipped", s.series_id)
            continue
        out.extend(sliding_windows(x, cfg.window_length, cfg.window_stride, source_id=s.series_id))
    return out


def prepare(normals: Sequence[LabeledSeries], anomalies: Sequence[LabeledSeries], cfg: RunConfig) -> PreparedData:
    """Series-level 5:1:4 split, min-max fitted on training series, then windowing.

    Training windows receive harness noise when ``cfg.noise_ratio > 0``; the
    unperturbed copies are kept for threshold calibration.
    """
    parts = split(normals, anomalies, cfg.seed)
    if not parts.train:
        raise ValueError("split produced an empty training set")
    lo, hi = fit_minmax([s.values for s in parts.train])
    clean = _windows(parts.train, cfg, lo, hi)
    train, noisy = clean, np.zeros(0, dtype=np.int64)
    if cfg.noise_ratio > 0:
        train, noisy = inject_noise(clean, cfg.noise_ratio, cfg.noise_ratio_sigma, cfg.seed)
    return PreparedData(train, _windows(parts.val, cfg, lo, hi), _windows(parts.test, cfg, lo, hi),
                        _windows(parts.test_anomalies, cfg, lo, hi), lo, hi, noisy, clean)


@dataclass
class ExperimentResult:
    model: AmslModel
    history: list[EpochRecord]
    threshold: Threshold
    train_errors: np.ndarray
    report: DetectionReport
    data: PreparedData

    @property
    def metrics(self) -> dict[str, float]:
        return self.report.metrics

    def evaluate_at(self, anomaly_pct: float | None = None, seed: int = 0) -> DetectionReport:
        windows, truth = self.data.test_set(anomaly_pct, seed)
        return detect(self.model, self.threshold, windows, truth)


def train_model(data: PreparedData, cfg: RunConfig) -> tuple[AmslModel, list[EpochRecord]]:
    n_ch = data.train[0].values.shape[1]
    model = AmslModel(cfg, n_ch)
    model.set_normalization(data.lo, data.hi)
    return fit(data.train, data.val, cfg, model=model)


def calibrate_model(model: AmslModel, train: Sequence[Window], percentile: float) -> tuple[Threshold, np.ndarray]:
    errs = reconstruction_errors(model, train)
    th = calibrate(errs, percentile)
    model.threshold = th
    return th, errs


def run(normals: Sequence[LabeledSeries], anomalies: Sequence[LabeledSeries], cfg: RunConfig) -> ExperimentResult:
    data = prepare(normals, anomalies, cfg)
    model, history = train_model(data, cfg)
    th, errs = calibrate_model(model, data.calibration, cfg.percentile)
    windows, truth = data.test_set(cfg.anomaly_pct, cfg.seed)
    report = detect(model, th, windows, truth)
    log.info("%s: %s", cfg.ablation, report.metrics)
    return ExperimentResult(model, history, th, errs, report, data)


def write_history(history: Sequence[EpochRecord], path: str | Path) -> None:
    """Per-epoch losses; floats written with repr so reruns can be compared byte for byte."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "recon", "ce", "sparse", "total", "val_total"])
        for h in history:
            val = "" if h.val_total is None else repr(float(h.val_total))
            w.writerow([h.epoch, *(repr(float(v)) for v in (h.recon, h.ce, h.sparse, h.total)), val])
