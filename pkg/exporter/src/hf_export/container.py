"""Writers and readers for the measurement tool's on-disk formats.

Implemented against the documented byte layout rather than by importing
the tool's own serializer: this module is a second, independent producer
of the formats, so any drift between the two implementations surfaces as
a test failure instead of being defined away.

Checkpoint container:
    [8-byte little-endian unsigned header length]
    [UTF-8 JSON header: {"config": {...}, name: {dtype, shape, offset, length}}]
    [raw little-endian float32 payload, tensors in sorted-name order]

Token corpus: flat <u4 ids plus a JSON sidecar at `<path>.json`.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import ExportError

CONFIG_KEY = "config"
TOKEN_DTYPE = np.dtype("<u4")


def write_container(path: str | Path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    if CONFIG_KEY in tensors:
        raise ExportError(f"tensor name {CONFIG_KEY!r} is reserved")
    header: dict[str, object] = {CONFIG_KEY: config}
    blobs: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        if not np.isfinite(arr).all():
            raise ExportError(f"tensor {name!r} contains non-finite values")
        blob = arr.tobytes()
        header[name] = {
            "dtype": "f32",
            "shape": list(arr.shape),
            "offset": offset,
            "length": len(blob),
        }
        blobs.append(blob)
        offset += len(blob)
    body = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(body)))
        fh.write(body)
        for blob in blobs:
            fh.write(blob)


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ExportError(f"{path}: truncated container")
    (hlen,) = struct.unpack("<Q", raw[:8])
    if len(raw) < 8 + hlen:
        raise ExportError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ExportError(f"{path}: header parse failure: {exc}") from exc
    if not isinstance(header, dict) or CONFIG_KEY not in header:
        raise ExportError(f"{path}: header missing {CONFIG_KEY!r}")
    payload = raw[8 + hlen :]
    tensors: dict[str, np.ndarray] = {}
    for name, entry in header.items():
        if name == CONFIG_KEY:
            continue
        off, length = int(entry["offset"]), int(entry["length"])
        arr = np.frombuffer(payload, dtype="<f4", count=length // 4, offset=off)
        tensors[name] = arr.reshape(entry["shape"]).astype(np.float32, copy=True)
    return header[CONFIG_KEY], tensors


def write_corpus(
    path: str | Path,
    ids,
    *,
    corpus_id: str,
    vocab_size: int,
    source: str,
    extra: dict | None = None,
) -> dict:
    """Write the token binary and sidecar; returns the sidecar dict."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ExportError(f"corpus ids must be 1-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise ExportError("corpus contains token ids outside [0, vocab_size)")
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
    Path(str(path) + ".json").write_text(
        json.dumps(sidecar, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return sidecar
