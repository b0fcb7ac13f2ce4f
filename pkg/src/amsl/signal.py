"""Windowing, min-max scaling, and the six self-supervised signal transformations.

Transforms act on ``(V, N)`` arrays (timesteps x channels) and are pure given
their inputs and seed. ``expand`` stacks the raw window and its transformed
variants in a fixed order so that variant ``i`` carries pseudo-label ``i``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.signal import savgol_filter

from .config import TRANSFORM_ORDER

SCALE_FACTORS = (0.5, 0.8, 1.5, 2.0)
CLIP_RANGE = (-0.5, 1.5)


class ParameterError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


@dataclass
class Window:
    values: np.ndarray
    source_id: object = None
    start_index: int = 0

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError(f"window must be (V, N), got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("window holds non-finite values")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class TransformedBatch:
    variants: np.ndarray  # (R, V, N)
    pseudo_labels: np.ndarray  # (R,)


# ---------------------------------------------------------------------------
# preprocessing


def fit_minmax(series: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    stacked = np.concatenate([np.asarray(s, dtype=np.float64) for s in series], axis=0)
    _check_finite(stacked)
    return stacked.min(axis=0), stacked.max(axis=0)


def apply_minmax(x: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                 clip: tuple[float, float] | None = CLIP_RANGE) -> np.ndarray:
    """Scale with stored per-channel bounds; constant channels map to 0."""
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (x - lo) / safe, 0.0)
    if clip is not None:
        out = np.clip(out, *clip)
    return out


def normalize(series: np.ndarray) -> np.ndarray:
    """Per-channel min-max scaling of a (T, N) series onto [0, 1]."""
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 2 or series.shape[0] < 1:
        raise ValueError(f"normalize expects a (T, N) array with T >= 1, got {series.shape}")
    lo, hi = fit_minmax([series])
    return apply_minmax(series, lo, hi, clip=None)


def _check_finite(x: np.ndarray) -> None:
    bad = ~np.isfinite(x)
    if bad.any():
        channel = int(np.argwhere(bad)[0][-1]) if x.ndim == 2 else 0
        raise ValueError(f"non-finite value in channel {channel}")


def sliding_windows(series: np.ndarray, length: int, stride: int,
                    source_id: object = None) -> list[Window]:
    """Windows of ``length`` rows every ``stride`` rows; the trailing remainder is dropped."""
    series = np.asarray(series)
    if stride < 1:
        raise ParameterError("stride must be >= 1")
    t = series.shape[0]
    if length > t or length < 1:
        raise EmptyInputError(f"window length {length} exceeds series length {t}")
    count = (t - length) // stride + 1
    return [Window(series[k * stride:k * stride + length], source_id, k * stride)
            for k in range(count)]


# ---------------------------------------------------------------------------
# transformations


def t_noise(x: np.ndarray, sigma: float, seed) -> np.ndarray:
    if sigma <= 0:
        raise ParameterError("noise sigma must be > 0")
    rng = np.random.default_rng(seed)
    return x + rng.normal(0.0, sigma, size=x.shape)


def t_reverse(x: np.ndarray) -> np.ndarray:
    return x[::-1].copy()


def permute_segments(x: np.ndarray, order: Sequence[int]) -> np.ndarray:
    """Split rows into len(order) contiguous chunks (earlier chunks take the extra rows)
    and concatenate them in ``order``."""
    chunks = np.array_split(x, len(order), axis=0)
    return np.concatenate([chunks[i] for i in order], axis=0)


def t_permute(x: np.ndarray, segments: int, seed) -> np.ndarray:
    """Shuffle contiguous chunks with a uniformly drawn non-identity permutation."""
    if not 2 <= segments <= x.shape[0]:
        raise ParameterError(f"segments must lie in 2..{x.shape[0]}, got {segments}")
    rng = np.random.default_rng(seed)
    identity = np.arange(segments)
    while True:
        order = rng.permutation(segments)
        if not np.array_equal(order, identity):
            return permute_segments(x, order)


def t_scale(x: np.ndarray, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return x * SCALE_FACTORS[rng.integers(len(SCALE_FACTORS))]


def t_negate(x: np.ndarray) -> np.ndarray:
    return -x


def t_smooth(x: np.ndarray, sg_window: int = 5, sg_poly: int = 2) -> np.ndarray:
    """Savitzky-Golay smoothing along time, per channel.

    Edge samples take the value of the least-squares polynomial fitted to the
    first/last full window, so polynomials of degree <= sg_poly pass unchanged.
    """
    if sg_window % 2 == 0 or sg_window < 3:
        raise ParameterError("sg_window must be odd and >= 3")
    if sg_poly >= sg_window or sg_poly < 0:
        raise ParameterError("sg_poly must satisfy 0 <= sg_poly < sg_window")
    if sg_window > x.shape[0]:
        raise ParameterError(f"sg_window {sg_window} exceeds window length {x.shape[0]}")
    return savgol_filter(x, sg_window, sg_poly, axis=0, mode="interp")


@dataclass(frozen=True)
class TransformParams:
    transforms: tuple[str, ...] = TRANSFORM_ORDER
    noise_sigma: float = 0.1
    permute_segments: int = 4
    sg_window: int = 5
    sg_poly: int = 2

    @classmethod
    def from_config(cls, cfg) -> "TransformParams":
        return cls(cfg.transforms, cfg.noise_sigma, cfg.permute_segments, cfg.sg_window, cfg.sg_poly)


def window_seed(seed: int, source_id: object, start_index: int) -> np.random.SeedSequence:
    """Stable per-window seed; independent of process, platform and hash randomization."""
    sid = zlib.crc32(repr(source_id).encode("utf-8"))
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, sid, int(start_index)])


def expand(window: Window | np.ndarray, params: TransformParams = TransformParams(),
           seed=0) -> TransformedBatch:
    """Stack [raw, *transforms] (fixed order) with pseudo-labels 0..R-1.

    ``seed`` may be an int or a SeedSequence. Each transform draws from its own
    child stream keyed by its name, so dropping one leaves the others unchanged.
    """
    x = window.values if isinstance(window, Window) else np.asarray(window)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    # generate_state is pure; spawn() would mutate ss between calls
    base = [int(v) for v in ss.generate_state(4)]
    streams = {name: np.random.SeedSequence(base + [i]) for i, name in enumerate(TRANSFORM_ORDER)}
    variants = [x]
    for name in params.transforms:
        if name == "noise":
            variants.append(t_noise(x, params.noise_sigma, streams[name]))
        elif name == "reverse":
            variants.append(t_reverse(x))
        elif name == "permute":
            variants.append(t_permute(x, params.permute_segments, streams[name]))
        elif name == "scale":
            variants.append(t_scale(x, streams[name]))
        elif name == "negate":
            variants.append(t_negate(x))
        elif name == "smooth":
            variants.append(t_smooth(x, params.sg_window, params.sg_poly))
        else:
            raise ParameterError(f"unknown transform {name!r}")
    stacked = np.stack(variants)
    return TransformedBatch(stacked, np.arange(len(variants)))


def expand_windows(windows: Sequence[Window], params: TransformParams, seed: int,
                   dtype=np.float32) -> np.ndarray:
    """Expand many windows into a (B, R, V, N) array using per-window seeds."""
    out = [expand(w, params, window_seed(seed, w.source_id, w.start_index)).variants
           for w in windows]
    r = 1 + len(params.transforms)
    if not out:
        return np.zeros((0, r, 0, 0), dtype=dtype)
    return np.stack(out).astype(dtype)

