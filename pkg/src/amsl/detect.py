"""Threshold calibration, thresholded prediction and macro-averaged metrics."""

from __future__ import annotations

import csv
import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import AmslModel
from .signal import Window

NORMAL, ABNORMAL = 0, 1
LABEL_NAMES = {NORMAL: "normal", ABNORMAL: "abnormal"}


class CalibrationError(ValueError):
    pass


@dataclass
class Threshold:
    mu: float
    percentile: float = 99.0
    source: int = 0


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("AMSL_THREADS", "1")))
    except ValueError:
        return 1


def reconstruction_errors(model: AmslModel, windows: Sequence[Window] | np.ndarray,
                          chunk: int = 256) -> np.ndarray:
    """Err per window, scored in eval mode. Chunks may run on AMSL_THREADS threads;
    results are reassembled in input order."""
    x = windows if isinstance(windows, np.ndarray) else model.expand(windows)
    starts = list(range(0, len(x), chunk))
    if not starts:
        return np.zeros(0)
    threads = min(_threads(), len(starts))
    if threads == 1:
        parts = [model.window_errors(x[s:s + chunk]) for s in starts]
    else:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda s: model.window_errors(x[s:s + chunk]), starts))
    return np.concatenate(parts)


def reconstruction_error(model: AmslModel, window: Window) -> float:
    return float(reconstruction_errors(model, [window])[0])


def calibrate(train_errors: Sequence[float], percentile: float = 99.0) -> Threshold:
    """mu = percentile of the training errors, linear interpolation between closest ranks."""
    errs = np.asarray(train_errors, dtype=np.float64)
    if errs.size == 0:
        raise CalibrationError("cannot calibrate on an empty error list")
    if not 0 < percentile <= 100:
        raise CalibrationError("percentile must lie in (0, 100]")
    if not np.all(np.isfinite(errs)):
        raise CalibrationError("training errors contain non-finite values")
    return Threshold(float(np.percentile(errs, percentile, method="linear")), float(percentile), int(errs.size))


def predict(errors, threshold: Threshold | float) -> np.ndarray:
    """1 (abnormal) where Err > mu, else 0; ties are normal."""
    mu = threshold.mu if isinstance(threshold, Threshold) else float(threshold)
    return (np.asarray(errors) > mu).astype(np.int64)


def evaluate(pred: Sequence[int], truth: Sequence[int]) -> dict[str, float]:
    """Macro precision/recall/F1 over {normal, abnormal} and accuracy.

    Undefined ratios (0/0) count as 0 and emit a warning.
    """
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} predictions vs {truth.shape} labels")
    per_class = {}
    for cls in (NORMAL, ABNORMAL):
        tp = int(np.sum((pred == cls) & (truth == cls)))
        fp = int(np.sum((pred == cls) & (truth != cls)))
        fn = int(np.sum((pred != cls) & (truth == cls)))
        prec = _ratio(tp, tp + fp, f"precision of {LABEL_NAMES[cls]}")
        rec = _ratio(tp, tp + fn, f"recall of {LABEL_NAMES[cls]}")
        f1 = _ratio(2 * prec * rec, prec + rec, f"F1 of {LABEL_NAMES[cls]}")
        per_class[cls] = (prec, rec, f1)
    acc = float(np.mean(pred == truth)) if pred.size else 0.0
    return {
        "mPre": (per_class[0][0] + per_class[1][0]) / 2,
        "mRec": (per_class[0][1] + per_class[1][1]) / 2,
        "mF1": (per_class[0][2] + per_class[1][2]) / 2,
        "Acc": acc,
        "F1_normal": per_class[0][2],
        "F1_abnormal": per_class[1][2],
    }


def _ratio(num: float, den: float, what: str) -> float:
    if den == 0:
        warnings.warn(f"{what} undefined (0/0); reported as 0", RuntimeWarning, stacklevel=3)
        return 0.0
    return num / den


@dataclass
class DetectionReport:
    errors: np.ndarray
    labels_pred: np.ndarray
    threshold: Threshold
    labels_true: np.ndarray | None = None
    window_ids: list[str] = field(default_factory=list)
    metrics: dict[str, float] | None = None

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["window_id", "error", "pred", "truth"])
            for i, (e, p) in enumerate(zip(self.errors, self.labels_pred)):
                wid = self.window_ids[i] if self.window_ids else str(i)
                truth = "" if self.labels_true is None else LABEL_NAMES[int(self.labels_true[i])]
                w.writerow([wid, repr(float(e)), LABEL_NAMES[int(p)], truth])

    def summary(self) -> dict:
        return {"threshold": asdict(self.threshold), "n_windows": int(len(self.errors)),
                "n_abnormal_pred": int(np.sum(self.labels_pred)), "metrics": self.metrics}

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2), encoding="utf-8")


def detect(model: AmslModel, threshold: Threshold, windows: Sequence[Window] | np.ndarray,
           truth: Sequence[int] | None = None, window_ids: Sequence[str] | None = None) -> DetectionReport:
    errors = reconstruction_errors(model, windows)
    pred = predict(errors, threshold)
    labels_true = None if truth is None else np.asarray(truth, dtype=np.int64)
    metrics = evaluate(pred, labels_true) if labels_true is not None else None
    return DetectionReport(errors, pred, threshold, labels_true, list(window_ids or []), metrics)
