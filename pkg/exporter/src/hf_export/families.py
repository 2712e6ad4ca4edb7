"""Per-family weight translation tables.

A family turns a Hugging Face config into (a) the canonical config block
and (b) a tensor table mapping every canonical tensor name to a rule:
which state-dict key supplies it and how the bytes are rearranged. The
tables are plain data so tests can audit coverage without running a
conversion.

Canonical layout reminder: projection weights are stored (in, out) and
applied as x @ W, so nn.Linear weights transpose and GPT-2's Conv1D
weights copy through unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ExportError

FAMILIES = ("gpt2", "gpt-neox", "opt", "bloom")

_MODEL_TYPE_TO_FAMILY = {
    "gpt2": "gpt2",
    "gpt_neox": "gpt-neox",
    "opt": "opt",
    "bloom": "bloom",
}

# HF activation names the canonical runtime can reproduce exactly.
_ACTIVATION_MAP = {
    "gelu": "gelu",
    "gelu_new": "gelu_tanh",
    "gelu_pytorch_tanh": "gelu_tanh",
    "relu": "relu",
    "silu": "silu",
}

# Fused qkv layouts. GPT-2's Conv1D packs [q | k | v] as three d-wide
# column blocks; NeoX and BLOOM pack per head as (heads, 3, head_dim)
# along the fused output axis.
SPLIT_COLS = "split_cols"
HEAD_FUSED = "head_fused"


@dataclass(frozen=True)
class TensorRule:
    """How one canonical tensor is produced from the source state dict."""

    source: str
    transform: str = "copy"  # copy | transpose | rows_from | split_cols | head_fused
    part: int = 0            # 0=q 1=k 2=v for the fused transforms
    offset: int = 0          # leading embedding rows dropped (rows_from)
    heads: int = 0           # head count for head_fused


def detect_family(hf_config) -> str:
    family = _MODEL_TYPE_TO_FAMILY.get(getattr(hf_config, "model_type", ""))
    if family is None:
        raise ExportError(
            f"unsupported model_type {getattr(hf_config, 'model_type', None)!r}; "
            f"supported families: {', '.join(FAMILIES)}"
        )
    return family


def map_activation(name: str) -> str:
    try:
        return _ACTIVATION_MAP[name]
    except KeyError:
        raise ExportError(f"activation {name!r} has no exact canonical equivalent") from None


def _require(condition: bool, what: str) -> None:
    if not condition:
        raise ExportError(f"unsupported source config: {what}")


def _rope_settings(cfg) -> tuple[float, float]:
    rope = getattr(cfg, "rope_parameters", None) or {}
    theta = float(rope.get("rope_theta", getattr(cfg, "rotary_emb_base", 10000.0)))
    fraction = float(rope.get("partial_rotary_factor", getattr(cfg, "rotary_pct", 1.0)))
    return theta, fraction


def apply_rule(rule: TensorRule, arr: np.ndarray) -> np.ndarray:
    """Numpy side of a rule: HF tensor (f32) -> canonical tensor."""
    if rule.transform == "copy":
        return arr
    if rule.transform == "transpose":
        return arr.T
    if rule.transform == "rows_from":
        return arr[rule.offset :]
    if rule.transform == SPLIT_COLS:
        span = arr.shape[-1] // 3
        return arr[..., rule.part * span : (rule.part + 1) * span]
    if rule.transform == HEAD_FUSED:
        # fused axis is laid out (heads, 3, head_dim); weights arrive
        # (3d, d) from nn.Linear and transpose to (d, 3d) first
        fused = arr.T if arr.ndim == 2 else arr
        lead = fused.shape[:-1]
        hd = fused.shape[-1] // (3 * rule.heads)
        parts = fused.reshape(*lead, rule.heads, 3, hd)
        return np.ascontiguousarray(parts[..., rule.part, :]).reshape(*lead, rule.heads * hd)
    raise ExportError(f"unknown transform {rule.transform!r}")


# ---------------------------------------------------------------------------
# family tables


def _gpt2(cfg, recipe) -> tuple[dict, dict[str, TensorRule]]:
    _require(not getattr(cfg, "scale_attn_by_inverse_layer_idx", False),
             "scale_attn_by_inverse_layer_idx")
    _require(not getattr(cfg, "reorder_and_upcast_attn", False), "reorder_and_upcast_attn")
    _require(getattr(cfg, "scale_attn_weights", True), "scale_attn_weights=False")
    tied = bool(getattr(cfg, "tie_word_embeddings", True))
    config = {
        "n_layers": cfg.n_layer,
        "d_model": cfg.n_embd,
        "n_heads": cfg.n_head,
        "n_kv_heads": cfg.n_head,
        "d_ff": cfg.n_inner if cfg.n_inner is not None else 4 * cfg.n_embd,
        "vocab_size": cfg.vocab_size,
        "pe_type": "absolute",
        "norm_kind": "layernorm",
        "activation": map_activation(cfg.activation_function),
        "max_position": cfg.n_positions,
        "tied_lm_head": tied,
        "norm_eps": cfg.layer_norm_epsilon,
    }
    table = {
        "embedding": TensorRule("transformer.wte.weight"),
        "position_embedding": TensorRule("transformer.wpe.weight"),
        "final_norm.gain": TensorRule("transformer.ln_f.weight"),
        "final_norm.bias": TensorRule("transformer.ln_f.bias"),
    }
    if not tied:
        table["lm_head"] = TensorRule("lm_head.weight", "transpose")
    for i in range(cfg.n_layer):
        src = f"transformer.h.{i}."
        dst = f"layers.{i}."
        table[dst + "attn_norm.gain"] = TensorRule(src + "ln_1.weight")
        table[dst + "attn_norm.bias"] = TensorRule(src + "ln_1.bias")
        table[dst + "mlp_norm.gain"] = TensorRule(src + "ln_2.weight")
        table[dst + "mlp_norm.bias"] = TensorRule(src + "ln_2.bias")
        for part, qkv in enumerate("qkv"):
            table[dst + f"W{qkv}"] = TensorRule(src + "attn.c_attn.weight", SPLIT_COLS, part=part)
            table[dst + f"b{qkv}"] = TensorRule(src + "attn.c_attn.bias", SPLIT_COLS, part=part)
        table[dst + "Wo"] = TensorRule(src + "attn.c_proj.weight")
        table[dst + "bo"] = TensorRule(src + "attn.c_proj.bias")
        table[dst + "W_in"] = TensorRule(src + "mlp.c_fc.weight")
        table[dst + "b_in"] = TensorRule(src + "mlp.c_fc.bias")
        table[dst + "W_out"] = TensorRule(src + "mlp.c_proj.weight")
        table[dst + "b_out"] = TensorRule(src + "mlp.c_proj.bias")
    return config, table


def _gpt_neox(cfg, recipe) -> tuple[dict, dict[str, TensorRule]]:
    _require(getattr(cfg, "attention_bias", True), "attention_bias=False")
    theta, fraction = _rope_settings(cfg)
    heads = cfg.num_attention_heads
    tied = bool(getattr(cfg, "tie_word_embeddings", False))
    config = {
        "n_layers": cfg.num_hidden_layers,
        "d_model": cfg.hidden_size,
        "n_heads": heads,
        "n_kv_heads": heads,
        "d_ff": cfg.intermediate_size,
        "vocab_size": cfg.vocab_size,
        "pe_type": "rotary",
        "norm_kind": "layernorm",
        "activation": map_activation(cfg.hidden_act),
        "max_position": cfg.max_position_embeddings,
        "tied_lm_head": tied,
        "norm_eps": cfg.layer_norm_eps,
        "rope_theta": theta,
        "rotary_fraction": fraction,
        "parallel_residual": bool(cfg.use_parallel_residual),
    }
    table = {
        "embedding": TensorRule("gpt_neox.embed_in.weight"),
        "final_norm.gain": TensorRule("gpt_neox.final_layer_norm.weight"),
        "final_norm.bias": TensorRule("gpt_neox.final_layer_norm.bias"),
    }
    if not tied:
        table["lm_head"] = TensorRule("embed_out.weight", "transpose")
    for i in range(cfg.num_hidden_layers):
        src = f"gpt_neox.layers.{i}."
        dst = f"layers.{i}."
        table[dst + "attn_norm.gain"] = TensorRule(src + "input_layernorm.weight")
        table[dst + "attn_norm.bias"] = TensorRule(src + "input_layernorm.bias")
        table[dst + "mlp_norm.gain"] = TensorRule(src + "post_attention_layernorm.weight")
        table[dst + "mlp_norm.bias"] = TensorRule(src + "post_attention_layernorm.bias")
        fused = src + "attention.query_key_value."
        for part, qkv in enumerate("qkv"):
            table[dst + f"W{qkv}"] = TensorRule(fused + "weight", HEAD_FUSED, part=part, heads=heads)
            table[dst + f"b{qkv}"] = TensorRule(fused + "bias", HEAD_FUSED, part=part, heads=heads)
        table[dst + "Wo"] = TensorRule(src + "attention.dense.weight", "transpose")
        table[dst + "bo"] = TensorRule(src + "attention.dense.bias")
        table[dst + "W_in"] = TensorRule(src + "mlp.dense_h_to_4h.weight", "transpose")
        table[dst + "b_in"] = TensorRule(src + "mlp.dense_h_to_4h.bias")
        table[dst + "W_out"] = TensorRule(src + "mlp.dense_4h_to_h.weight", "transpose")
        table[dst + "b_out"] = TensorRule(src + "mlp.dense_4h_to_h.bias")
    return config, table


def _opt(cfg, recipe) -> tuple[dict, dict[str, TensorRule]]:
    _require(getattr(cfg, "do_layer_norm_before", True), "do_layer_norm_before=False (post-norm)")
    _require(cfg.word_embed_proj_dim == cfg.hidden_size,
             f"word_embed_proj_dim {cfg.word_embed_proj_dim} != hidden_size {cfg.hidden_size}")
    _require(not getattr(cfg, "_remove_final_layer_norm", False), "_remove_final_layer_norm")
    _require(getattr(cfg, "layer_norm_elementwise_affine", True),
             "layer_norm_elementwise_affine=False")
    bias = bool(getattr(cfg, "enable_bias", True))
    tied = bool(getattr(cfg, "tie_word_embeddings", True))
    config = {
        "n_layers": cfg.num_hidden_layers,
        "d_model": cfg.hidden_size,
        "n_heads": cfg.num_attention_heads,
        "n_kv_heads": cfg.num_attention_heads,
        "d_ff": cfg.ffn_dim,
        "vocab_size": cfg.vocab_size,
        "pe_type": "absolute",
        "norm_kind": "layernorm",
        "activation": map_activation(cfg.activation_function),
        "max_position": cfg.max_position_embeddings,
        "tied_lm_head": tied,
        "norm_eps": 1e-5,
    }
    dec = "model.decoder."
    # the learned position table carries two unused leading rows
    table = {
        "embedding": TensorRule(dec + "embed_tokens.weight"),
        "position_embedding": TensorRule(dec + "embed_positions.weight", "rows_from", offset=2),
        "final_norm.gain": TensorRule(dec + "final_layer_norm.weight"),
        "final_norm.bias": TensorRule(dec + "final_layer_norm.bias"),
    }
    if not tied:
        table["lm_head"] = TensorRule("lm_head.weight", "transpose")
    for i in range(cfg.num_hidden_layers):
        src = f"{dec}layers.{i}."
        dst = f"layers.{i}."
        table[dst + "attn_norm.gain"] = TensorRule(src + "self_attn_layer_norm.weight")
        table[dst + "attn_norm.bias"] = TensorRule(src + "self_attn_layer_norm.bias")
        table[dst + "mlp_norm.gain"] = TensorRule(src + "final_layer_norm.weight")
        table[dst + "mlp_norm.bias"] = TensorRule(src + "final_layer_norm.bias")
        for qkv, proj in (("q", "q_proj"), ("k", "k_proj"), ("v", "v_proj")):
            table[dst + f"W{qkv}"] = TensorRule(src + f"self_attn.{proj}.weight", "transpose")
            if bias:
                table[dst + f"b{qkv}"] = TensorRule(src + f"self_attn.{proj}.bias")
        table[dst + "Wo"] = TensorRule(src + "self_attn.out_proj.weight", "transpose")
        table[dst + "W_in"] = TensorRule(src + "fc1.weight", "transpose")
        table[dst + "W_out"] = TensorRule(src + "fc2.weight", "transpose")
        if bias:
            table[dst + "bo"] = TensorRule(src + "self_attn.out_proj.bias")
            table[dst + "b_in"] = TensorRule(src + "fc1.bias")
            table[dst + "b_out"] = TensorRule(src + "fc2.bias")
    return config, table


def _bloom(cfg, recipe) -> tuple[dict, dict[str, TensorRule]]:
    _require(not getattr(cfg, "apply_residual_connection_post_layernorm", False),
             "apply_residual_connection_post_layernorm")
    _require(getattr(cfg, "pretraining_tp", 1) == 1, "pretraining_tp > 1")
    _require(not getattr(cfg, "slow_but_exact", False), "slow_but_exact")
    heads = cfg.n_head
    tied = bool(getattr(cfg, "tie_word_embeddings", True))
    # BLOOM declares no positional limit (ALiBi extrapolates); the
    # canonical config needs one, so the recipe supplies it
    max_position = recipe.max_position if recipe.max_position else 2048
    config = {
        "n_layers": cfg.n_layer,
        "d_model": cfg.hidden_size,
        "n_heads": heads,
        "n_kv_heads": heads,
        "d_ff": 4 * cfg.hidden_size,
        "vocab_size": cfg.vocab_size,
        "pe_type": "alibi",
        "norm_kind": "layernorm",
        "activation": "gelu_tanh",
        "max_position": max_position,
        "tied_lm_head": tied,
        "norm_eps": cfg.layer_norm_epsilon,
        "embedding_norm": True,
    }
    table = {
        "embedding": TensorRule("transformer.word_embeddings.weight"),
        "embedding_norm.gain": TensorRule("transformer.word_embeddings_layernorm.weight"),
        "embedding_norm.bias": TensorRule("transformer.word_embeddings_layernorm.bias"),
        "final_norm.gain": TensorRule("transformer.ln_f.weight"),
        "final_norm.bias": TensorRule("transformer.ln_f.bias"),
    }
    if not tied:
        table["lm_head"] = TensorRule("lm_head.weight", "transpose")
    for i in range(cfg.n_layer):
        src = f"transformer.h.{i}."
        dst = f"layers.{i}."
        table[dst + "attn_norm.gain"] = TensorRule(src + "input_layernorm.weight")
        table[dst + "attn_norm.bias"] = TensorRule(src + "input_layernorm.bias")
        table[dst + "mlp_norm.gain"] = TensorRule(src + "post_attention_layernorm.weight")
        table[dst + "mlp_norm.bias"] = TensorRule(src + "post_attention_layernorm.bias")
        fused = src + "self_attention.query_key_value."
        for part, qkv in enumerate("qkv"):
            table[dst + f"W{qkv}"] = TensorRule(fused + "weight", HEAD_FUSED, part=part, heads=heads)
            table[dst + f"b{qkv}"] = TensorRule(fused + "bias", HEAD_FUSED, part=part, heads=heads)
        table[dst + "Wo"] = TensorRule(src + "self_attention.dense.weight", "transpose")
        table[dst + "bo"] = TensorRule(src + "self_attention.dense.bias")
        table[dst + "W_in"] = TensorRule(src + "mlp.dense_h_to_4h.weight", "transpose")
        table[dst + "b_in"] = TensorRule(src + "mlp.dense_h_to_4h.bias")
        table[dst + "W_out"] = TensorRule(src + "mlp.dense_4h_to_h.weight", "transpose")
        table[dst + "b_out"] = TensorRule(src + "mlp.dense_4h_to_h.bias")
    return config, table


_BUILDERS = {
    "gpt2": _gpt2,
    "gpt-neox": _gpt_neox,
    "opt": _opt,
    "bloom": _bloom,
}


def build_plan(family: str, hf_config, recipe) -> tuple[dict, dict[str, TensorRule]]:
    """(canonical config block, tensor table) for one source model."""
    try:
        builder = _BUILDERS[family]
    except KeyError:
        raise ExportError(
            f"unknown family {family!r}; supported: {', '.join(FAMILIES)}"
        ) from None
    if recipe.max_position and family != "bloom":
        # absolute/rotary families declare their own limit, and for
        # learned tables the limit must equal the row count we export
        raise ExportError(f"max_position override is only meaningful for bloom, not {family}")
    config, table = builder(hf_config, recipe)
    config["model_id"] = recipe.resolved_model_id
    return config, table
