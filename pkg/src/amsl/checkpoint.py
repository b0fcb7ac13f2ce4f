"""Versioned binary checkpoint container.

Layout (little-endian throughout)::

    b"AMSL" | u32 format_version | u32 len | config JSON (utf-8)
    u32 n_blobs, then per blob: u16 len | name (utf-8) | u8 ndim | u32 dims... | float32 data
    u8 has_threshold [| f64 mu | f64 percentile | u64 source]
    u64 seed
    32-byte SHA-256 of everything before it
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .config import RunConfig
from .detect import Threshold
from .model import AmslModel

MAGIC = b"AMSL"
FORMAT_VERSION = 1
_DIGEST = 32


class CheckpointError(ValueError):
    pass


def _pack_blob(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    a = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim)
    head += struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def save_checkpoint(model: AmslModel, path: str | Path) -> None:
    cfg_json = json.dumps({"config": model.cfg.to_dict(), "channels": model.channels,
                           "geometry": model.geometry.to_dict()}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(cfg_json)), cfg_json]
    blobs = dict(model.state_dict())
    blobs["trace.alpha"] = model.alpha_trace
    parts.append(struct.pack("<I", len(blobs)))
    parts.extend(_pack_blob(name, blobs[name]) for name in sorted(blobs))
    th = model.threshold
    if th is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<BddQ", 1, th.mu, th.percentile, th.source))
    parts.append(struct.pack("<Q", model.cfg.seed & 0xFFFFFFFFFFFFFFFF))
    body = b"".join(parts)
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint body ends early")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> AmslModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < len(MAGIC) + 8 + _DIGEST or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an AMSL checkpoint or truncated (checksum unavailable)")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (file truncated or corrupted)")
    r = _Reader(body)
    r.take(4)
    version, cfg_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    meta = json.loads(r.take(cfg_len).decode("utf-8"))
    (n_blobs,) = r.unpack("<I")
    blobs = {}
    for _ in range(n_blobs):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        blobs[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    (has_th,) = r.unpack("<B")
    threshold = None
    if has_th:
        mu, pct, src = r.unpack("<ddQ")
        threshold = Threshold(mu, pct, src)
    r.unpack("<Q")
    if r.pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after checkpoint body")

    model = AmslModel(RunConfig.from_dict(meta["config"]), meta["channels"])
    model.alpha_trace = blobs.pop("trace.alpha")
    model.load_state_dict(blobs)
    model.threshold = threshold
    return model
