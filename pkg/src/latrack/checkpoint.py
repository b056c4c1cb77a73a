"""Binary checkpoint serialization.

Layout: magic, format version, a JSON model-config snapshot, then named
tensor records (UTF-8 name, dtype tag, shape, little-endian raw scalars),
and a trailing SHA-256 over everything before it. Loading verifies the magic,
the version, and the digest; round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .model import ModelConfig, TrackerModel

MAGIC = b"LATRCKPT"
VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    """Malformed, corrupted, or unsupported checkpoint data."""


def dump_bytes(config: dict, tensors: dict[str, np.ndarray]) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(cfg))
    out += cfg
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        tag = _DTYPE_TAGS.get(le.dtype)
        if tag is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb))
        out += nb
        out += struct.pack("<BB", tag, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += le.tobytes()
    out += hashlib.sha256(bytes(out)).digest()
    return bytes(out)


def parse_bytes(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < len(MAGIC) + 4 + 32:
        raise CheckpointError("truncated checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch: checkpoint is corrupted")
    if body[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError("truncated checkpoint body")
        chunk = body[pos : pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    config = json.loads(take(cfg_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        tag, ndim = struct.unpack("<BB", take(2))
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dtype = _TAG_DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(take(nbytes), dtype=dtype).reshape(shape).copy()
        tensors[name] = arr
    if pos != len(body):
        raise CheckpointError("trailing bytes after tensor records")
    return config, tensors


def save_model(path, model: TrackerModel) -> None:
    tensors = {name: p.data for name, p in model.named_params()}
    with open(path, "wb") as fh:
        fh.write(dump_bytes(model.config.to_dict(), tensors))


def load_model(path) -> TrackerModel:
    """Rebuild a model from its config snapshot and stored tensors."""
    with open(path, "rb") as fh:
        config, tensors = parse_bytes(fh.read())
    model = TrackerModel(ModelConfig.from_dict(config))
    params = model.param_dict()
    missing = sorted(set(params) - set(tensors))
    extra = sorted(set(tensors) - set(params))
    if missing or extra:
        raise CheckpointError(f"tensor-name mismatch: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        arr = tensors[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
        p.data = np.ascontiguousarray(arr, dtype=p.data.dtype)
    return model


def load_model_file_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return parse_bytes(fh.read())
