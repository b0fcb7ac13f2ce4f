"""Corpus ingestion, deterministic splitting, harness knobs and the synthetic corpus."""

from __future__ import annotations

import csv
import math
from collections import OrderedDict, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .signal import Window

TRAIN_VAL_TEST = (5, 1, 4)


class DataError(ValueError):
    """Malformed corpus file or an unsatisfiable harness request."""


@dataclass
class LabeledSeries:
    values: np.ndarray  # (T, N)
    class_id: int
    split_tag: str = "unassigned"
    series_id: int = 0


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """PCG64 stream keyed by (seed, *keys); identical on every platform."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


# ---------------------------------------------------------------------------
# CSV corpus


def write_csv(series: Sequence[LabeledSeries], path: str | Path, channels: Sequence[str] | None = None,
              label_column: str = "label", id_column: str = "series_id") -> None:
    if not series:
        raise DataError("nothing to write")
    n = series[0].values.shape[1]
    channels = list(channels) if channels is not None else [f"ch{i}" for i in range(n)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([id_column, label_column, *channels])
        for s in series:
            for row in s.values:
                w.writerow([s.series_id, s.class_id, *(repr(float(v)) for v in row)])


def load_csv(path: str | Path, channels: Sequence[str] | None = None, label_column: str = "label",
             id_column: str = "series_id") -> list[LabeledSeries]:
    """Read a corpus: one timestep per row, rows grouped into series by ``id_column``.

    Channel order follows ``channels`` (file order when omitted). Series appear in
    order of first occurrence.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open corpus {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        except UnicodeDecodeError as exc:
            raise DataError(f"{path}: not UTF-8 ({exc})") from None
        header = [h.strip() for h in header]
        for col in (id_column, label_column):
            if col not in header:
                raise DataError(f"{path}: missing column {col!r}")
        others = [h for h in header if h not in (id_column, label_column)]
        if channels is None:
            channels = others
        unknown = sorted(set(others) - set(channels))
        if unknown:
            raise DataError(f"{path}: unknown columns {unknown}")
        absent = [c for c in channels if c not in header]
        if absent:
            raise DataError(f"{path}: missing channel columns {absent}")
        id_i, lab_i = header.index(id_column), header.index(label_column)
        ch_i = [header.index(c) for c in channels]

        rows: OrderedDict[int, list] = OrderedDict()
        labels: dict[int, int] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                sid, label = int(row[id_i]), int(row[lab_i])
                vals = [float(row[i]) for i in ch_i]
            except ValueError as exc:
                raise DataError(f"{path}:{line_no}: non-numeric cell ({exc})") from None
            if not all(math.isfinite(v) for v in vals):
                raise DataError(f"{path}:{line_no}: missing or non-finite value")
            if labels.setdefault(sid, label) != label:
                raise DataError(f"{path}:{line_no}: series {sid} changes label")
            rows.setdefault(sid, []).append(vals)
    return [LabeledSeries(np.asarray(v, dtype=np.float64).reshape(len(v), len(channels)), labels[sid],
                          series_id=sid) for sid, v in rows.items()]


def partition_by_class(series: Sequence[LabeledSeries], normal_classes: Sequence[int] | None = None):
    """Split a corpus into (normals, anomalies). Without an explicit list, class ids >= 0 are normal."""
    if normal_classes is None:
        is_normal = lambda c: c >= 0  # noqa: E731
    else:
        allowed = set(normal_classes)
        is_normal = lambda c: c in allowed  # noqa: E731
    normals = [s for s in series if is_normal(s.class_id)]
    anomalies = [s for s in series if not is_normal(s.class_id)]
    return normals, anomalies


# ---------------------------------------------------------------------------
# splitting and harness knobs


@dataclass
class Split:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)
    test_anomalies: list = field(default_factory=list)


def _partition_sizes(n: int) -> tuple[int, int]:
    total = sum(TRAIN_VAL_TEST)
    n_train = int(math.floor(n * TRAIN_VAL_TEST[0] / total + 0.5))
    n_val = int(math.floor(n * TRAIN_VAL_TEST[1] / total + 0.5))
    n_val = min(n_val, n - n_train)
    return n_train, n_val


def split(normals: Sequence, anomalies: Sequence = (), seed: int = 0,
          anomaly_ratio: float | None = None) -> Split:
    """Shuffle normal items by seed and cut them 5:1:4 (per class when items carry
    ``class_id``); every anomaly goes to test, optionally subsampled to ``anomaly_ratio``."""
    if len(normals) == 0:
        raise DataError("no normal items to split")
    groups = defaultdict(list)
    for idx, item in enumerate(normals):
        groups[getattr(item, "class_id", 0)].append(idx)
    rng = rng_for(seed, 11)
    out = Split()
    for key in sorted(groups):
        idx = groups[key]
        order = [idx[i] for i in rng.permutation(len(idx))]
        n_train, n_val = _partition_sizes(len(order))
        out.train.extend(_tag(normals[i], "train") for i in order[:n_train])
        out.val.extend(_tag(normals[i], "val") for i in order[n_train:n_train + n_val])
        out.test.extend(_tag(normals[i], "test") for i in order[n_train + n_val:])
    out.test_anomalies = [_tag(a, "test") for a in anomalies]
    if anomaly_ratio is not None:
        out.test_anomalies = subsample_anomalies(len(out.test), out.test_anomalies, anomaly_ratio, seed)
    return out


def _tag(item, name):
    return replace(item, split_tag=name) if isinstance(item, LabeledSeries) else item


def anomalies_for_ratio(n_normal: int, ratio: float) -> int:
    """Anomaly count so that anomalies make up ``ratio`` of the test set (rounded up)."""
    if not 0 < ratio < 1:
        raise DataError("anomaly ratio must lie in (0, 1)")
    # round before ceil so 40*0.1/0.9 style products do not pick up float fuzz
    return int(math.ceil(round(n_normal * ratio / (1 - ratio), 9)))


def subsample_anomalies(n_normal: int, anomalies: Sequence, ratio: float, seed: int = 0) -> list:
    need = anomalies_for_ratio(n_normal, ratio)
    if need > len(anomalies):
        raise DataError(f"anomaly ratio {ratio} needs {need} anomalies, only {len(anomalies)} available")
    keep = np.sort(rng_for(seed, 12).choice(len(anomalies), size=need, replace=False))
    return [anomalies[i] for i in keep]


def inject_noise(windows: Sequence[Window], ratio: float, sigma: float = 0.3,
                 seed: int = 0) -> tuple[list[Window], np.ndarray]:
    """Add N(0, sigma) noise to a seed-chosen subset of round(ratio * count) windows."""
    if not 0 <= ratio <= 1:
        raise DataError("noise ratio must lie in [0, 1]")
    n = len(windows)
    k = int(math.floor(ratio * n + 0.5))
    rng = rng_for(seed, 13)
    chosen = np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)
    out = list(windows)
    for i in chosen:
        w = out[i]
        out[i] = Window(w.values + rng.normal(0.0, sigma, size=w.values.shape), w.source_id, w.start_index)
    return out, chosen


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SynthConfig:
    channels: int = 3
    window_length: int = 64
    n_classes: int = 4
    series_per_class: int = 40
    windows_per_series: int = 10
    stride: int | None = None
    n_anomalies: int = 400
    anomaly_kinds: tuple[str, ...] = ("burst", "shift")
    noise_std: float = 0.05

    @property
    def series_length(self) -> int:
        stride = self.stride or self.window_length // 2
        return self.window_length + (self.windows_per_series - 1) * stride

    def class_cycles(self, k: int) -> float:
        """Dominant frequency of class k in cycles per window."""
        return 1.0 + 0.75 * k


ANOMALY_KIND_IDS = {"burst": -1, "shift": -2, "dropout": -3}


def _class_profile(cfg: SynthConfig, seed: int, k: int):
    rng = rng_for(seed, 21, k)
    return {
        "phase_offsets": rng.uniform(0, 2 * np.pi, cfg.channels),
        "harmonic": rng.uniform(0.2, 0.4, cfg.channels),
        "harmonic_phase": rng.uniform(0, 2 * np.pi, cfg.channels),
        "gain": rng.uniform(0.8, 1.2, cfg.channels),
    }


def _carrier(cfg: SynthConfig, profile, cycles: float, length: int, rng: np.random.Generator,
             noisy: bool = True) -> np.ndarray:
    t = np.arange(length)[:, None]
    f = cycles / cfg.window_length
    phase = rng.uniform(0, 2 * np.pi)
    amp = profile["gain"] * rng.uniform(0.9, 1.1)
    x = amp * np.sin(2 * np.pi * f * t + phase + profile["phase_offsets"])
    # harmonic locked to the fundamental so every series of a class shares one waveform shape
    x += amp * profile["harmonic"] * np.sin(4 * np.pi * f * t + 2 * phase + profile["harmonic_phase"])
    if noisy:
        x += rng.normal(0.0, cfg.noise_std, size=x.shape)
    return x


def _inject(kind: str, carrier: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Burst or dropout over a contiguous segment of V/4..V/3 samples."""
    v, n = carrier.shape
    x = carrier.copy()
    seg = int(rng.integers(v // 4, v // 3 + 1))
    start = int(rng.integers(0, v - seg + 1))
    if kind == "burst":
        chans = rng.permutation(n)[: int(rng.integers(1, n + 1))]
        # broadband jitter: too fast for the autoencoder to follow
        amp = rng.uniform(0.6, 1.2)
        x[start:start + seg, chans] += amp * rng.standard_normal((seg, len(chans)))
    elif kind == "dropout":
        x[start:start + seg, :] = 0.0
    else:
        raise DataError(f"unknown anomaly kind {kind!r}")
    return x


def anomaly_deviation_fraction(anomaly: np.ndarray, carrier: np.ndarray, noise_std: float) -> float:
    """Fraction of samples where the anomaly departs from its carrier by more than 3 sigma."""
    return float(np.mean(np.abs(anomaly - carrier) > 3 * noise_std))


def synth_generate(cfg: SynthConfig = SynthConfig(), seed: int = 0, return_carriers: bool = False):
    """Normal classes: two-tone sinusoids with class-specific frequency and channel phases.
    Anomalies: normal carriers with injected bursts, dropouts or a frequency shift
    out of the normal band.

    Returns (normals, anomalies[, carriers]) as lists of LabeledSeries.
    """
    profiles = [_class_profile(cfg, seed, k) for k in range(cfg.n_classes)]
    normals = []
    sid = 0
    for k in range(cfg.n_classes):
        for j in range(cfg.series_per_class):
            rng = rng_for(seed, 22, k, j)
            x = _carrier(cfg, profiles[k], cfg.class_cycles(k), cfg.series_length, rng)
            normals.append(LabeledSeries(x, k, series_id=sid))
            sid += 1

    anomalies, carriers = [], []
    kinds = cfg.anomaly_kinds
    for a in range(cfg.n_anomalies):
        kind = kinds[a % len(kinds)]
        for attempt in range(100):
            rng = rng_for(seed, 23, a, attempt)
            k = int(rng.integers(cfg.n_classes))
            clean = _carrier(cfg, profiles[k], cfg.class_cycles(k), cfg.window_length, rng, noisy=False)
            carrier = clean + rng.normal(0.0, cfg.noise_std, size=clean.shape)
            if kind == "shift":
                cycles = rng.uniform(8.0, 11.0)
                x = _carrier(cfg, profiles[k], cycles, cfg.window_length, rng, noisy=False) + (carrier - clean)
            else:
                x = _inject(kind, carrier, rng)
            if anomaly_deviation_fraction(x, carrier, cfg.noise_std) >= 0.05:
                break
        else:
            raise DataError(f"could not generate a {kind} anomaly that departs from its carrier")
        anomalies.append(LabeledSeries(x, ANOMALY_KIND_IDS[kind], series_id=sid))
        carriers.append(LabeledSeries(carrier, k, series_id=sid))
        sid += 1
    if return_carriers:
        return normals, anomalies, carriers
    return normals, anomalies
