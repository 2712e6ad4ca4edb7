"""Checkpoint container and token-corpus file I/O.

Checkpoint container layout:
    [8-byte little-endian unsigned header length]
    [UTF-8 JSON header]
    [raw little-endian float32 payload]

The header is a flat JSON object with one reserved key, "config" (the
model configuration), and one entry per tensor:
    name -> {"dtype": "f32", "shape": [...], "offset": o, "length": n}
Offsets are byte offsets into the payload region. Tensors are laid out
in sorted-name order and the header JSON uses sorted keys, so writing
the same tensors twice produces byte-identical files.

Token corpora are flat arrays of 4-byte little-endian unsigned token
ids, with a JSON sidecar at `<path>.json` describing provenance.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

HEADER_LEN_BYTES = 8
CONFIG_KEY = "config"
TOKEN_DTYPE = np.dtype("<u4")


def write_container(path: str | Path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write a checkpoint container; deterministic for identical inputs."""
    if CONFIG_KEY in tensors:
        raise FormatError(f"tensor name {CONFIG_KEY!r} is reserved")
    header: dict[str, object] = {CONFIG_KEY: config}
    blobs: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        blob = arr.tobytes()
        header[name] = {
            "dtype": "f32",
            "shape": list(arr.shape),
            "offset": offset,
            "length": len(blob),
        }
        blobs.append(blob)
        offset += len(blob)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint container into (config dict, name -> float32 array)."""
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"checkpoint file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < HEADER_LEN_BYTES:
        raise FormatError(f"{path}: truncated container (no header length)")
    (hlen,) = struct.unpack("<Q", raw[:HEADER_LEN_BYTES])
    header_end = HEADER_LEN_BYTES + hlen
    if len(raw) < header_end:
        raise FormatError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(raw[HEADER_LEN_BYTES:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header parse failure: {exc}") from exc
    if not isinstance(header, dict) or CONFIG_KEY not in header:
        raise FormatError(f"{path}: header missing {CONFIG_KEY!r} object")
    config = header[CONFIG_KEY]
    payload = raw[header_end:]
    tensors: dict[str, np.ndarray] = {}
    for name, entry in header.items():
        if name == CONFIG_KEY:
            continue
        try:
            dtype, shape = entry["dtype"], entry["shape"]
            off, length = int(entry["offset"]), int(entry["length"])
        except (TypeError, KeyError) as exc:
            raise FormatError(f"{path}: malformed header entry for {name!r}") from exc
        if dtype != "f32":
            raise FormatError(f"{path}: tensor {name!r} has unsupported dtype {dtype!r}")
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        if length != expected:
            raise FormatError(
                f"{path}: tensor {name!r} length {length} != shape {shape} bytes {expected}"
            )
        if off < 0 or off + length > len(payload):
            raise FormatError(f"{path}: tensor {name!r} extends past payload end")
        arr = np.frombuffer(payload, dtype="<f4", count=length // 4, offset=off)
        tensors[name] = arr.reshape(shape).astype(np.float32, copy=True)
    return config, tensors


@dataclass
class TokenCorpus:
    """A token-id stream plus the sidecar metadata it was written with."""

    ids: np.ndarray
    corpus_id: str
    vocab_size: int
    source: str
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.ids.shape[0])


def sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".json")


def write_corpus(
    path: str | Path,
    ids,
    *,
    corpus_id: str,
    vocab_size: int,
    source: str,
    extra: dict | None = None,
) -> None:
    """Write token ids (4-byte LE unsigned) and the `<path>.json` sidecar."""
    ids = np.asarray(ids)
    if ids.ndim != 1:
        raise FormatError(f"corpus ids must be 1-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise FormatError("corpus contains token ids outside [0, vocab_size)")
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(ids, dtype=TOKEN_DTYPE).tobytes())
    sidecar = {
        "corpus_id": corpus_id,
        "vocab_size": int(vocab_size),
        "source": source,
        "token_count": int(ids.size),
    }
    if extra:
        sidecar.update(extra)
    sidecar_path(path).write_text(
        json.dumps(sidecar, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def read_corpus(path: str | Path) -> TokenCorpus:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"corpus file not found: {path}")
    side = sidecar_path(path)
    if not side.is_file():
        raise FormatError(f"corpus sidecar not found: {side}")
    try:
        meta = json.loads(side.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{side}: sidecar parse failure: {exc}") from exc
    for key in ("corpus_id", "vocab_size", "source"):
        if key not in meta:
            raise FormatError(f"{side}: sidecar missing {key!r}")
    raw = path.read_bytes()
    if len(raw) % TOKEN_DTYPE.itemsize != 0:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of 4")
    ids = np.frombuffer(raw, dtype=TOKEN_DTYPE).astype(np.int64)
    vocab = int(meta["vocab_size"])
    if ids.size and ids.max() >= vocab:
        raise FormatError(f"{path}: token id {int(ids.max())} >= vocab_size {vocab}")
    if "token_count" in meta and int(meta["token_count"]) != ids.size:
        raise FormatError(
            f"{side}: sidecar token_count {meta['token_count']} != file count {ids.size}"
        )
    return TokenCorpus(
        ids=ids,
        corpus_id=str(meta["corpus_id"]),
        vocab_size=vocab,
        source=str(meta["source"]),
        meta=meta,
    )
