"""Checkpoint conversion: HF state dict -> canonical container."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import ExportError
from .container import write_container
from .families import HEAD_FUSED, SPLIT_COLS, TensorRule, apply_rule, build_plan, detect_family
from .golden import build_golden, write_golden
from .recipe import ExportRecipe

CHECKPOINT_NAME = "model.ckpt"
GOLDEN_NAME = "golden.bin"


def _state_dict_arrays(model) -> dict[str, np.ndarray]:
    sd = model.state_dict()
    return {k: v.detach().to("cpu").float().numpy() for k, v in sd.items()}


def translate_tensors(
    table: dict[str, TensorRule], state: dict[str, np.ndarray]
) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name, rule in table.items():
        if rule.source not in state:
            raise ExportError(f"source checkpoint is missing tensor {rule.source!r} "
                              f"(needed for {name!r})")
        out[name] = np.ascontiguousarray(apply_rule(rule, state[rule.source]), dtype=np.float32)
    return out


def load_source_model(source: str):
    import torch
    from transformers import AutoModelForCausalLM

    model = AutoModelForCausalLM.from_pretrained(source, dtype=torch.float32)
    model.eval()
    return model


def export_checkpoint(
    recipe: ExportRecipe, out_dir: str | Path, model=None
) -> tuple[Path, Path]:
    """Write `model.ckpt` and its golden-logit fixture; returns both paths.

    `model` short-circuits loading for callers that already hold the
    source model (tests construct theirs in memory).
    """
    if model is None:
        model = load_source_model(recipe.source)
    family = recipe.family or detect_family(model.config)
    config, table = build_plan(family, model.config, recipe)
    tensors = translate_tensors(table, _state_dict_arrays(model))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / CHECKPOINT_NAME
    write_container(ckpt_path, config, tensors)

    meta, logits = build_golden(
        model,
        family=family,
        model_id=config["model_id"],
        vocab_size=config["vocab_size"],
        n_sequences=recipe.golden_sequences,
        max_len=min(recipe.golden_max_len, config["max_position"]),
        seed=recipe.golden_seed,
    )
    golden_path = out_dir / GOLDEN_NAME
    write_golden(golden_path, meta, logits)
    return ckpt_path, golden_path


def reconstruct_state_dict(
    table: dict[str, TensorRule], tensors: dict[str, np.ndarray]
) -> dict[str, np.ndarray]:
    """Invert a conversion back into source-framework layout.

    Fused q/k/v tensors reassemble from their three parts; embedding rows
    dropped by an offset rule come back as zeros (the source never reads
    them). Used to check that exports are lossless where it matters.
    """
    grouped: dict[str, list[tuple[str, TensorRule]]] = {}
    for name, rule in table.items():
        grouped.setdefault(rule.source, []).append((name, rule))
    out: dict[str, np.ndarray] = {}
    for source, entries in grouped.items():
        rule = entries[0][1]
        if rule.transform == "copy":
            out[source] = tensors[entries[0][0]]
        elif rule.transform == "transpose":
            out[source] = np.ascontiguousarray(tensors[entries[0][0]].T)
        elif rule.transform == "rows_from":
            kept = tensors[entries[0][0]]
            full = np.zeros((kept.shape[0] + rule.offset,) + kept.shape[1:], dtype=kept.dtype)
            full[rule.offset :] = kept
            out[source] = full
        elif rule.transform == SPLIT_COLS:
            parts = [tensors[n] for n, _ in sorted(entries, key=lambda e: e[1].part)]
            out[source] = np.concatenate(parts, axis=-1)
        elif rule.transform == HEAD_FUSED:
            parts = [tensors[n] for n, _ in sorted(entries, key=lambda e: e[1].part)]
            heads = rule.heads
            hd = parts[0].shape[-1] // heads
            lead = parts[0].shape[:-1]
            stacked = np.stack([p.reshape(*lead, heads, hd) for p in parts], axis=-2)
            fused = stacked.reshape(*lead, heads * 3 * hd)
            out[source] = np.ascontiguousarray(fused.T) if fused.ndim == 2 else fused
        else:
            raise ExportError(f"unknown transform {rule.transform!r}")
    return out
