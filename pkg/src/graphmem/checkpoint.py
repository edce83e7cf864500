"""Binary checkpoint format with bit-exact round trips.

Layout: magic b"GMTCKPT1", a uint64-length-prefixed JSON metadata block
(config snapshot + hash, step, tau, RNG state, best validation loss,
optimizer step count, tensor count), then named tensors as
(uint32 name length, name, uint8 dtype tag, uint32 ndim, uint64 dims,
little-endian payload), and a trailing CRC32 over everything before it.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .config_io import config_hash, model_config_from_dict, model_config_to_dict
from .errors import CheckpointError
from .model import Model, ModelConfig

MAGIC = b"GMTCKPT1"
FORMAT_VERSION = 1

_DTYPE_TAGS = {1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("<u2")}
_TAG_FOR = {np.dtype(np.float64): 1, np.dtype(np.int64): 2, np.dtype(np.uint16): 3}


def _write_tensor(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    tag = _TAG_FOR.get(arr.dtype)
    if tag is None:
        raise CheckpointError(f"unsupported tensor dtype {arr.dtype} for {name}")
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<I", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<B", tag))
    buf.write(struct.pack("<I", arr.ndim))
    for dim in arr.shape:
        buf.write(struct.pack("<Q", dim))
    buf.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


class _Reader:
    def __init__(self, blob: bytes):
        self._blob = blob
        self._pos = 0

    def take(self, n: int) -> bytes:
        if self._pos + n > len(self._blob):
            raise CheckpointError("truncated checkpoint")
        out = self._blob[self._pos:self._pos + n]
        self._pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def _read_tensor(reader: _Reader) -> tuple[str, np.ndarray]:
    name = reader.take(reader.unpack("<I")).decode("utf-8")
    dtype = _DTYPE_TAGS.get(reader.unpack("<B"))
    if dtype is None:
        raise CheckpointError(f"unknown dtype tag for tensor {name}")
    ndim = reader.unpack("<I")
    shape = tuple(reader.unpack("<Q") for _ in range(ndim))
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    arr = np.frombuffer(reader.take(count * dtype.itemsize), dtype=dtype).reshape(shape)
    return name, arr.copy()


def save_checkpoint(path: str | Path, model: Model, *, step: int, tau: float,
                    best_val_loss: float | None = None,
                    rng_state: dict | None = None,
                    optimizer_state: dict | None = None,
                    train_config=None) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, p in model.parameters().items():
        tensors[name] = p.data
    for name, arr in model.memory_state().items():
        tensors[name] = arr
    if optimizer_state is not None:
        for name, arr in optimizer_state["m"].items():
            tensors[f"opt.m.{name}"] = arr
        for name, arr in optimizer_state["v"].items():
            tensors[f"opt.v.{name}"] = arr

    meta = {
        "format_version": FORMAT_VERSION,
        "config": model_config_to_dict(model.config),
        "train_config": (dataclasses.asdict(train_config)
                         if train_config is not None else None),
        "config_hash": config_hash(model.config, train_config),
        "step": int(step),
        "tau": float(tau),
        "best_val_loss": best_val_loss,
        "rng_state": rng_state,
        "adam_t": None if optimizer_state is None else optimizer_state["t"],
        "tensor_count": len(tensors),
    }

    buf = io.BytesIO()
    buf.write(MAGIC)
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(meta_blob)))
    buf.write(meta_blob)
    for name in sorted(tensors):
        _write_tensor(buf, name, tensors[name])
    body = buf.getvalue()
    payload = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None,
                    expected_train_config=None):
    """Rebuilds the model (and returns metadata + raw tensors).

    Verifies magic, CRC32, the stored config hash, and, when an expected
    config is given, that it matches the snapshot exactly; any failure
    raises before any state is handed out.
    """
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 12:
        raise CheckpointError(f"{path}: too short to be a checkpoint")
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic bytes")
    body, crc_stored = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError(f"{path}: CRC32 mismatch (corrupt or truncated)")

    reader = _Reader(body)
    reader.take(len(MAGIC))
    meta = json.loads(reader.take(reader.unpack("<Q")).decode("utf-8"))
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')}")

    tensors: dict[str, np.ndarray] = {}
    for _ in range(meta["tensor_count"]):
        name, arr = _read_tensor(reader)
        tensors[name] = arr

    config = model_config_from_dict(meta["config"])
    train_config = None
    if meta.get("train_config") is not None:
        from .training import TrainConfig

        train_config = TrainConfig(**meta["train_config"])
    if config_hash(config, train_config) != meta["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch")
    if expected_config is not None and model_config_to_dict(expected_config) != meta["config"]:
        raise CheckpointError(f"{path}: checkpoint config does not match the requested config")
    if expected_train_config is not None and train_config is not None:
        if dataclasses.asdict(expected_train_config) != dataclasses.asdict(train_config):
            raise CheckpointError(f"{path}: checkpoint training config does not match")

    model = Model(config, seed=0)
    for name, p in model.parameters().items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name}")
        p.assign(tensors[name])
    for i, block in enumerate(model.blocks):
        if block.cell is not None:
            block.cell.bank.usage = tensors[f"block{i}.cell.usage"].astype(np.float64)
            block.cell.bank.age = tensors[f"block{i}.cell.age"].astype(np.int64)

    optimizer_state = None
    if meta.get("adam_t") is not None:
        m = {k[len("opt.m."):]: v for k, v in tensors.items() if k.startswith("opt.m.")}
        v = {k[len("opt.v."):]: v for k, v in tensors.items() if k.startswith("opt.v.")}
        optimizer_state = {"m": m, "v": v, "t": meta["adam_t"]}

    return model, meta, train_config, optimizer_state
