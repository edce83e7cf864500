"""Token-stream preparation: tokenizers, document split, window packing.

Streams are flat uint16 id arrays with an end-of-text id after every
document. The default tokenizer is byte-level (ids 0-255 are raw bytes,
256 is end-of-text); anything implementing the small Tokenizer protocol
can be plugged in as long as its ids fit in 16 bits.
"""

from __future__ import annotations

import importlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import ConfigurationError, DomainError

MAX_ID = 2 ** 16


class Tokenizer(Protocol):
    name: str
    vocab_size: int
    eot_id: int

    def encode(self, text: str) -> list[int]: ...

    def decode(self, ids: list[int]) -> str: ...


class ByteTokenizer:
    """UTF-8 bytes as ids 0-255 plus a dedicated end-of-text id 256."""

    name = "byte"
    vocab_size = 257
    eot_id = 256

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids) -> str:
        return bytes(i for i in ids if i != self.eot_id).decode("utf-8", errors="replace")

    def token_text(self, token_id: int) -> str:
        if token_id == self.eot_id:
            return "<eot>"
        return bytes([token_id]).decode("utf-8", errors="replace")


def load_tokenizer(spec: str) -> Tokenizer:
    """'byte' or a 'module:attr' path to a Tokenizer factory or instance."""
    if spec == "byte":
        return ByteTokenizer()
    if ":" not in spec:
        raise ConfigurationError(f"unknown tokenizer {spec!r} (use 'byte' or 'module:attr')")
    mod_name, attr = spec.split(":", 1)
    obj = getattr(importlib.import_module(mod_name), attr)
    return obj() if callable(obj) else obj


def token_text(tokenizer: Tokenizer, token_id: int) -> str:
    if hasattr(tokenizer, "token_text"):
        return tokenizer.token_text(token_id)
    return tokenizer.decode([token_id])


@dataclass
class TokenWindowStream:
    """Contiguous packed token ids; windows are read non-overlapping."""

    ids: np.ndarray
    vocab_size: int
    eot_id: int
    tokenizer_name: str

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.uint16)
        if self.ids.ndim != 1:
            raise ConfigurationError("stream ids must be a flat vector")
        if self.ids.size and int(self.ids.max()) >= self.vocab_size:
            raise ConfigurationError("stream contains ids outside the vocabulary")

    def __len__(self) -> int:
        return int(self.ids.size)


@dataclass
class SplitSpec:
    train_fraction: float = 0.95

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigurationError("train_fraction must be in (0, 1)")


def tokenize_documents(docs: list[str], tokenizer: Tokenizer) -> TokenWindowStream:
    """Concatenate per-document ids, appending end-of-text after each one."""
    if tokenizer.vocab_size > MAX_ID or tokenizer.eot_id >= MAX_ID:
        raise ConfigurationError("tokenizer ids must fit in 16 bits")
    pieces: list[int] = []
    for doc in docs:
        ids = tokenizer.encode(doc)
        if any(i >= MAX_ID or i < 0 for i in ids):
            raise ConfigurationError("tokenizer produced an id outside 16 bits")
        pieces.extend(ids)
        pieces.append(tokenizer.eot_id)
    return TokenWindowStream(ids=np.array(pieces, dtype=np.uint16),
                             vocab_size=tokenizer.vocab_size,
                             eot_id=tokenizer.eot_id,
                             tokenizer_name=tokenizer.name)


def split_documents(docs: list[str], spec: SplitSpec) -> tuple[list[str], list[str]]:
    """First floor(f * D) documents to train, the rest to validation."""
    if len(docs) < 2:
        raise ConfigurationError("need at least 2 documents to split")
    cut = int(spec.train_fraction * len(docs))
    if cut == 0 or cut == len(docs):
        raise ConfigurationError(
            f"split of {len(docs)} documents at {spec.train_fraction} leaves one side empty")
    return docs[:cut], docs[cut:]


def window_count(stream: TokenWindowStream, t: int) -> int:
    """floor((N - 1) / T): windows need T inputs plus one lookahead target."""
    if t < 1:
        raise ConfigurationError("window length must be >= 1")
    return max(0, (len(stream) - 1) // t)


def get_window(stream: TokenWindowStream, i: int, t: int) -> tuple[np.ndarray, np.ndarray]:
    """(input, target) id vectors; target is the one-token-shifted input."""
    n = window_count(stream, t)
    if i < 0 or i >= n:
        raise DomainError(f"window {i} out of range (have {n})")
    start = i * t
    chunk = stream.ids[start:start + t + 1].astype(np.int64)
    return chunk[:t], chunk[1:t + 1]


# ---------------------------------------------------------------------------
# stream files: little-endian uint16 ids + JSON sidecar manifest

def stream_paths(base: str | Path) -> tuple[Path, Path]:
    base = Path(base)
    return base.parent / f"{base.name}.bin", base.parent / f"{base.name}.json"


def save_stream(stream: TokenWindowStream, base: str | Path) -> Path:
    bin_path, manifest_path = stream_paths(base)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    stream.ids.astype("<u2").tofile(bin_path)
    manifest = {"vocab_size": stream.vocab_size, "eot_id": stream.eot_id,
                "token_count": len(stream), "tokenizer_name": stream.tokenizer_name}
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return bin_path


def load_stream(base: str | Path) -> TokenWindowStream:
    bin_path, manifest_path = stream_paths(base)
    if not bin_path.exists() or not manifest_path.exists():
        raise ConfigurationError(f"stream {base}: missing {bin_path.name} or {manifest_path.name}")
    manifest = json.loads(manifest_path.read_text())
    ids = np.fromfile(bin_path, dtype="<u2")
    if ids.size != manifest["token_count"]:
        raise ConfigurationError(
            f"stream {base}: file has {ids.size} ids, manifest says {manifest['token_count']}")
    return TokenWindowStream(ids=ids, vocab_size=manifest["vocab_size"],
                             eot_id=manifest["eot_id"],
                             tokenizer_name=manifest["tokenizer_name"])


def read_documents(input_dir: str | Path, doc_mode: str = "file") -> list[str]:
    """UTF-8 text files under input_dir, one document per file, or one per
    blank-line-separated block when doc_mode='block'. Sorted path order."""
    input_dir = Path(input_dir)
    if not input_dir.is_dir():
        raise ConfigurationError(f"{input_dir} is not a directory")
    if doc_mode not in ("file", "block"):
        raise ConfigurationError(f"doc_mode must be 'file' or 'block', got {doc_mode!r}")
    docs: list[str] = []
    for path in sorted(input_dir.rglob("*.txt")):
        text = path.read_text(encoding="utf-8")
        if doc_mode == "file":
            docs.append(text)
        else:
            docs.extend(block for block in
                        (b.strip("\n") for b in text.split("\n\n")) if block.strip())
    if not docs:
        raise ConfigurationError(f"no .txt documents found under {input_dir}")
    return docs
