"""Tiny offline source models, one per supported family."""

import torch
from transformers import (
    BloomConfig,
    BloomForCausalLM,
    GPT2Config,
    GPT2LMHeadModel,
    GPTNeoXConfig,
    GPTNeoXForCausalLM,
    OPTConfig,
    OPTForCausalLM,
)

VOCAB = 97
D_MODEL = 32
LAYERS = 2
HEADS = 4
D_FF = 128
MAX_POS = 32


def tiny_source_model(family: str, seed: int = 11, **over):
    """A randomly initialized 2-layer causal LM in eval mode."""
    torch.manual_seed(seed)
    if family == "gpt2":
        config = GPT2Config(
            vocab_size=VOCAB, n_positions=MAX_POS, n_embd=D_MODEL, n_layer=LAYERS,
            n_head=HEADS, n_inner=D_FF, bos_token_id=0, eos_token_id=0, **over,
        )
        model = GPT2LMHeadModel(config)
    elif family == "gpt-neox":
        config = GPTNeoXConfig(
            vocab_size=VOCAB, hidden_size=D_MODEL, num_hidden_layers=LAYERS,
            num_attention_heads=HEADS, intermediate_size=D_FF,
            max_position_embeddings=MAX_POS, rotary_pct=over.pop("rotary_pct", 0.25),
            bos_token_id=0, eos_token_id=0, **over,
        )
        model = GPTNeoXForCausalLM(config)
    elif family == "opt":
        config = OPTConfig(
            vocab_size=VOCAB, hidden_size=D_MODEL, num_hidden_layers=LAYERS,
            num_attention_heads=HEADS, ffn_dim=D_FF, max_position_embeddings=MAX_POS,
            bos_token_id=0, eos_token_id=0, pad_token_id=1, **over,
        )
        model = OPTForCausalLM(config)
    elif family == "bloom":
        config = BloomConfig(
            vocab_size=VOCAB, hidden_size=over.pop("hidden_size", D_MODEL),
            n_layer=LAYERS, n_head=over.pop("n_head", HEADS),
            bos_token_id=0, eos_token_id=0, **over,
        )
        model = BloomForCausalLM(config)
    else:
        raise ValueError(f"no tiny model for family {family!r}")
    model.eval()
    return model
