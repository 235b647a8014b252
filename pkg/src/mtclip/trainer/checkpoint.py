"""Binary checkpoints.

Layout (little-endian)::

    b"MTCK" | u16 version | 32-byte config digest | u64 step | i64 seed
    u32 config_text_length | config text (UTF-8, key=value lines)
    u32 param_count
    per param: u16 name_length | name | u8 ndim | u32 dims[ndim] | f32 data
    8-byte blake2b checksum of everything above

Parameters are stored as float32 and widened back to float64 on load.
"""

from __future__ import annotations

import dataclasses
import hashlib
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from mtclip import config as cfgio
from mtclip.errors import CheckpointError
from mtclip.models import ModelBundle, ModelConfig, build_model

MAGIC = b"MTCK"
VERSION = 1
_HEAD = struct.Struct("<4sH32sQq")
CHECKSUM_BYTES = 8


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=CHECKSUM_BYTES).digest()


@dataclasses.dataclass
class CheckpointData:
    digest: bytes
    step: int
    seed: int
    config_text: str
    arrays: "OrderedDict[str, np.ndarray]"


def write_checkpoint(path, arrays: Dict[str, np.ndarray], config_text: str, step: int = 0, seed: int = 0) -> Path:
    digest = hashlib.sha256(config_text.encode("utf-8")).digest()
    text = config_text.encode("utf-8")
    parts = [_HEAD.pack(MAGIC, VERSION, digest, int(step), int(seed)), struct.pack("<I", len(text)), text,
             struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    path = Path(path)
    path.write_bytes(body + _checksum(body))
    return path


def read_checkpoint(path) -> CheckpointData:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size + CHECKSUM_BYTES:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    body, stored = raw[:-CHECKSUM_BYTES], raw[-CHECKSUM_BYTES:]
    if _checksum(body) != stored:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupted)")
    _, version, digest, step, seed = _HEAD.unpack_from(body, 0)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = _HEAD.size
    try:
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        text = body[pos:pos + n].decode("utf-8")
        pos += n
        if hashlib.sha256(text.encode("utf-8")).digest() != digest:
            raise CheckpointError(f"{path}: embedded config does not match its digest")
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + ln].decode("utf-8")
            pos += ln
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(body):
                raise CheckpointError(f"{path}: parameter {name!r} truncated")
            arrays[name] = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 4 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint body ({exc})") from exc
    if pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - pos} unexpected bytes before the checksum")
    return CheckpointData(digest, step, seed, text, arrays)


def save_checkpoint(model: ModelBundle, path, step: int = 0, seed: Optional[int] = None) -> Path:
    arrays = OrderedDict((name, p.data) for name, p in model.parameter_map().items())
    return write_checkpoint(path, arrays, cfgio.dumps(model.config), step, model.seed if seed is None else seed)


def load_checkpoint(path, config: Optional[ModelConfig] = None) -> ModelBundle:
    """Rebuild a model from ``path``.

    When ``config`` is given its digest must match the one stored in the file.
    """
    ck = read_checkpoint(path)
    if config is not None and config.digest() != ck.digest:
        raise CheckpointError(f"{path}: model config digest mismatch (checkpoint was written for a different config)")
    stored = cfgio.from_flat(ModelConfig, cfgio.parse_text(ck.config_text))
    if stored.digest() != ck.digest:
        raise CheckpointError(f"{path}: embedded text is not a canonical model config")
    model = build_model(stored, ck.seed)
    params = model.parameter_map()
    if list(params) != list(ck.arrays):
        missing = sorted(set(params) ^ set(ck.arrays))
        raise CheckpointError(f"{path}: parameter set differs from the model config: {missing[:5]}")
    for name, p in params.items():
        if p.data.shape != ck.arrays[name].shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}: {ck.arrays[name].shape} vs {p.data.shape}")
        p.data[...] = ck.arrays[name]
    model.step = ck.step
    return model
