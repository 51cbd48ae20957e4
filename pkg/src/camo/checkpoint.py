"""Versioned binary checkpoints.

Layout (little-endian)::

    b"CAMO" | u32 version | u32 config_len | config JSON (UTF-8)
    u32 param_count
    per param: u16 name_len | name | u8 ndim | u32 dims[ndim] | f64 data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import CaptionModel, ModelConfig

MAGIC = b"CAMO"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(config: dict, params: dict[str, np.ndarray]) -> bytes:
    blob = json.dumps(config, ensure_ascii=False, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def decode_checkpoint(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a CAMO checkpoint")
    try:
        version, clen = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 12
        config = json.loads(buf[off : off + clen].decode("utf-8"))
        off += clen
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 8 * size > len(buf):
                raise CheckpointError("truncated checkpoint")
            params[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 8 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint ({exc})") from None
    if off != len(buf):
        raise CheckpointError("trailing bytes in checkpoint")
    return config, params


def save_checkpoint(path, model: CaptionModel, extra: dict | None = None) -> None:
    config = {"model": model.config.to_dict(), **(extra or {})}
    Path(path).write_bytes(encode_checkpoint(config, model.state_dict()))


def load_checkpoint(path) -> tuple[CaptionModel, dict]:
    """Rebuild the model; returns it with the full config block."""
    config, params = decode_checkpoint(Path(path).read_bytes())
    model = CaptionModel(ModelConfig.from_dict(config["model"]))
    model.load_state_dict(params)
    return model, config
