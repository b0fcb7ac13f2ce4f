"""Run configuration and shape-composition checks."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

ABLATIONS = ("cae", "cae-mem", "cae-ssl", "cae-ssl-mem", "full")

# Variant order after the raw window; pseudo-labels follow this order.
TRANSFORM_ORDER = ("noise", "reverse", "permute", "scale", "negate", "smooth")
# Order in which transforms are discarded when R is reduced.
TRANSFORM_DROP_ORDER = ("noise", "scale", "permute", "reverse", "negate", "smooth")

KERNEL = 4


class ConfigError(ValueError):
    """Invalid configuration or a model geometry that does not compose."""


@dataclass
class RunConfig:
    window_length: int = 128
    stride: int | None = None
    channels: int | None = None
    memory_size: int = 800
    feature_size: int = 64
    lambda1: float = 1.0
    lambda2: float = 0.0002
    lr: float = 0.001
    epochs: int = 100
    batch_size: int = 32
    percentile: float = 99.0
    n_transforms: int = 7
    noise_sigma: float = 0.1
    permute_segments: int = 4
    sg_window: int = 5
    sg_poly: int = 2
    ablation: str = "full"
    seed: int = 0
    conv_padding: str = "same"
    encoder_channels: int = 32
    decoder_channels: tuple[int, ...] | None = None
    classifier_units: int = 128
    dropout: float = 0.5
    share_decoders: bool = False
    noise_ratio: float = 0.0
    noise_ratio_sigma: float = 0.3
    anomaly_pct: float | None = None
    normal_classes: tuple[int, ...] | None = None

    @property
    def use_ssl(self) -> bool:
        return self.ablation in ("cae-ssl", "cae-ssl-mem", "full")

    @property
    def use_memory(self) -> bool:
        return self.ablation in ("cae-mem", "cae-ssl-mem", "full")

    @property
    def adaptive_fusion(self) -> bool:
        return self.ablation == "full"

    @property
    def decoder_widths(self) -> tuple[int, ...]:
        """Transposed-conv kernel counts; default (2F, F, F/2, 1), i.e. (128, 64, 32, 1) at F=64."""
        if self.decoder_channels is not None:
            return tuple(self.decoder_channels)
        f = self.feature_size
        return (2 * f, f, max(1, f // 2), 1)

    @property
    def window_stride(self) -> int:
        return self.stride if self.stride is not None else max(1, self.window_length // 2)

    @property
    def transforms(self) -> tuple[str, ...]:
        """Active transforms in variant order (raw excluded)."""
        if not self.use_ssl:
            return ()
        dropped = set(TRANSFORM_DROP_ORDER[: 7 - self.n_transforms])
        return tuple(t for t in TRANSFORM_ORDER if t not in dropped)

    @property
    def n_variants(self) -> int:
        return 1 + len(self.transforms)

    def replace(self, **changes: Any) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        if self.decoder_channels is not None:
            d["decoder_channels"] = list(self.decoder_channels)
        if self.normal_classes is not None:
            d["normal_classes"] = list(self.normal_classes)
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        data = dict(data)
        if data.get("decoder_channels") is not None:
            data["decoder_channels"] = tuple(int(c) for c in data["decoder_channels"])
        if data.get("normal_classes") is not None:
            data["normal_classes"] = tuple(int(c) for c in data["normal_classes"])
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(data)

    def validate(self, channels: int | None = None) -> "Geometry":
        """Check every field and the layer shape algebra; return the geometry."""
        n = channels if channels is not None else self.channels
        if n is None:
            raise ConfigError("channel count unknown: set `channels` or supply a corpus")
        if self.channels is not None and channels is not None and self.channels != channels:
            raise ConfigError(f"config says {self.channels} channels, data has {channels}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.conv_padding not in ("same", "valid"):
            raise ConfigError("conv_padding must be 'same' or 'valid'")
        checks = [
            (self.window_length >= 1, "window_length must be >= 1"),
            (self.window_stride >= 1, "stride must be >= 1"),
            (self.memory_size >= 1, "memory_size must be >= 1"),
            (self.feature_size >= 1, "feature_size must be >= 1"),
            (self.encoder_channels >= 1, "encoder_channels must be >= 1"),
            (self.lambda1 >= 0 and self.lambda2 >= 0, "lambdas must be nonnegative"),
            (self.lr >= 0, "lr must be nonnegative"),
            (self.epochs >= 0, "epochs must be nonnegative"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (0 < self.percentile <= 100, "percentile must lie in (0, 100]"),
            (1 <= self.n_transforms <= 7, "n_transforms (R) must lie in 1..7"),
            (self.noise_sigma > 0, "noise_sigma must be > 0"),
            (0 <= self.dropout < 1, "dropout must lie in [0, 1)"),
            (0 <= self.noise_ratio <= 0.3, "noise_ratio must lie in [0, 0.3]"),
            (len(self.decoder_widths) == 4, "decoder_channels needs four entries"),
            (self.decoder_widths[-1] == 1, "last decoder layer must have 1 kernel"),
            (min(self.decoder_widths) >= 1, "decoder_channels must be positive"),
            (self.sg_window % 2 == 1 and self.sg_window >= 3, "sg_window must be odd and >= 3"),
            (0 <= self.sg_poly < self.sg_window, "sg_poly must be < sg_window"),
            (self.sg_window <= self.window_length, "sg_window must be <= window_length"),
            (2 <= self.permute_segments <= self.window_length,
             "permute_segments must lie in 2..window_length"),
        ]
        if self.anomaly_pct is not None:
            checks.append((0 < self.anomaly_pct < 1, "anomaly_pct must lie in (0, 1)"))
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return compute_geometry(self.window_length, n, self.conv_padding)


@dataclass(frozen=True)
class DeconvGeometry:
    stride: tuple[int, int]
    crop: tuple[int, int, int, int]  # top, bottom, left, right


@dataclass(frozen=True)
class Geometry:
    window: tuple[int, int]
    conv_pad: tuple[int, int, int, int]
    code: tuple[int, int]
    decoder: tuple[DeconvGeometry, ...] = field(default=())

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _conv_extent(n: int, padding: str) -> int:
    return n if padding == "same" else n - KERNEL + 1


def _pool_extent(n: int) -> int:
    return -(-n // 2)


def _crop_to(n_in: int, stride: int, target: int) -> tuple[int, int]:
    total = (n_in - 1) * stride + KERNEL - target
    return total // 2, total - total // 2


def compute_geometry(window_length: int, channels: int, padding: str = "same") -> Geometry:
    """Derive every intermediate extent of the encoder/decoder stack.

    Encoder: conv 4x4 -> pool 2x2 -> conv 4x4 -> pool 2x2 (pooling rounds up).
    Decoder: four 4x4 transposed convolutions with strides 2, 2, 1, 1; the
    last one is cropped so the output equals the window extents.
    """
    if window_length < 1 or channels < 1:
        raise ConfigError("window extents must be positive")
    if padding == "same":
        pad = ((KERNEL - 1) // 2, KERNEL - 1 - (KERNEL - 1) // 2)
        conv_pad = (pad[0], pad[1], pad[0], pad[1])
    else:
        conv_pad = (0, 0, 0, 0)

    extents = []
    for n in (window_length, channels):
        a = _conv_extent(n, padding)
        if a < 1:
            raise ConfigError(f"first 4x4 conv ({padding}) leaves no output for extent {n}")
        b = _pool_extent(a)
        c = _conv_extent(b, padding)
        if c < 1:
            raise ConfigError(f"second 4x4 conv ({padding}) leaves no output for extent {n}")
        extents.append(_pool_extent(c))
    h, w = extents
    if padding == "valid" and (h < KERNEL or w < KERNEL):
        raise ConfigError("code too small for the classifier's valid 4x4 conv")

    layers = []
    cur = [h, w]
    for stride in (2, 2, 1):
        crops = []
        for ax in range(2):
            if padding == "same":
                target = cur[ax] * stride
                crops.extend(_crop_to(cur[ax], stride, target))
            else:
                target = (cur[ax] - 1) * stride + KERNEL
                crops.extend((0, 0))
            cur[ax] = target
        layers.append(DeconvGeometry((stride, stride), tuple(crops)))
    crops = []
    for ax, target in enumerate((window_length, channels)):
        top, bottom = _crop_to(cur[ax], 1, target)
        if top < 0 or bottom < 0:
            raise ConfigError(
                f"decoder reaches extent {cur[ax] + KERNEL - 1} < window extent {target}")
        crops.extend((top, bottom))
    layers.append(DeconvGeometry((1, 1), tuple(crops)))
    return Geometry((window_length, channels), conv_pad, (h, w), tuple(layers))
