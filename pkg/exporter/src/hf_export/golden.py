"""Golden-logit fixtures: short sequences plus source-framework logits.

A fixture is a container file whose config block holds the metadata and
token sequences, and whose tensors are the per-sequence logits. Keeping
it in the same binary format as checkpoints means any implementation
that can read one can read the other.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import ExportError
from .container import read_container, write_container

GOLDEN_FORMAT = "golden-logits"
DEFAULT_TOLERANCE = 1e-3


def sample_sequences(vocab_size: int, n: int, max_len: int, seed: int) -> list[list[int]]:
    """Deterministic short token sequences with varied lengths (>= 2)."""
    rng = np.random.default_rng([seed, vocab_size, max_len])
    lengths = rng.integers(max(2, max_len // 2), max_len + 1, size=n)
    return [rng.integers(0, vocab_size, size=int(ln)).tolist() for ln in lengths]


def build_golden(
    model,
    *,
    family: str,
    model_id: str,
    vocab_size: int,
    n_sequences: int,
    max_len: int,
    seed: int,
    tolerance: float = DEFAULT_TOLERANCE,
) -> tuple[dict, dict[str, np.ndarray]]:
    import torch

    sequences = sample_sequences(vocab_size, n_sequences, max_len, seed)
    logits: dict[str, np.ndarray] = {}
    with torch.no_grad():
        for idx, ids in enumerate(sequences):
            out = model(input_ids=torch.tensor([ids], dtype=torch.long))
            logits[f"logits.{idx}"] = (
                out.logits[0].detach().to("cpu").float().numpy()
            )
    meta = {
        "format": GOLDEN_FORMAT,
        "family": family,
        "model_id": model_id,
        "vocab_size": int(vocab_size),
        "tolerance": float(tolerance),
        "seed": int(seed),
        "sequences": sequences,
    }
    return meta, logits


def write_golden(path: str | Path, meta: dict, logits: dict[str, np.ndarray]) -> None:
    if meta.get("format") != GOLDEN_FORMAT:
        raise ExportError(f"golden metadata must declare format {GOLDEN_FORMAT!r}")
    if len(meta["sequences"]) != len(logits):
        raise ExportError("one logits tensor per sequence required")
    write_container(path, meta, logits)


def read_golden(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    meta, logits = read_container(path)
    if meta.get("format") != GOLDEN_FORMAT:
        raise ExportError(f"{path} is not a golden-logit fixture")
    return meta, logits


def check_parity(checkpoint_path: str | Path, golden_path: str | Path,
                 tolerance: float | None = None) -> dict:
    """Replay golden sequences through the measurement tool's loader.

    Returns {"ok", "tolerance", "max_abs_diff", "per_sequence"}. This is
    the one place the exporter touches that package, and only through
    its public load/forward surface.
    """
    try:
        from protogap.model import forward, load_checkpoint
    except ImportError as exc:
        raise ExportError(
            "golden verification needs the protogap package installed"
        ) from exc

    meta, logits = read_golden(golden_path)
    tol = float(tolerance if tolerance is not None else meta["tolerance"])
    model = load_checkpoint(checkpoint_path)
    if model.config.vocab_size != meta["vocab_size"]:
        raise ExportError(
            f"vocab mismatch: checkpoint {model.config.vocab_size}, "
            f"fixture {meta['vocab_size']}"
        )
    diffs = []
    for idx, ids in enumerate(meta["sequences"]):
        got = forward(model, np.asarray(ids, dtype=np.int64)).logits
        want = logits[f"logits.{idx}"]
        if got.shape != want.shape:
            raise ExportError(
                f"sequence {idx}: logits shape {got.shape} != fixture {want.shape}"
            )
        diffs.append(float(np.max(np.abs(got - want))))
    return {
        "ok": bool(max(diffs) < tol),
        "tolerance": tol,
        "max_abs_diff": max(diffs),
        "per_sequence": diffs,
    }
