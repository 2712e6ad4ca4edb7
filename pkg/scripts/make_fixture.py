#!/usr/bin/env python3
"""Generate a synthetic fixture directory: checkpoint, corpus, contracts.

The weights are small-scale Gaussian so activations stay well inside
float32 range at any depth; --identical-layers copies layer 0 into every
slot, which makes all pair distances exactly zero (handy for smoke tests
of the tied verdict).
"""

import argparse
import json
import math
from pathlib import Path

import numpy as np

from protogap.container import write_corpus
from protogap.model import Model, ModelConfig, expected_tensor_shapes, save_checkpoint


def synthetic_model(config: ModelConfig, seed: int, identical_layers: bool) -> Model:
    rng = np.random.default_rng(seed)
    required, _ = expected_tensor_shapes(config)
    shrink = 1.0 / math.sqrt(2.0 * config.n_layers)
    tensors = {}
    for name, shape in required.items():
        if name.endswith("norm.gain"):
            w = 1.0 + 0.1 * rng.standard_normal(shape)
        else:
            w = 0.08 * rng.standard_normal(shape)
            if name.endswith((".Wo", ".W_out")):
                w = w * shrink
        tensors[name] = w.astype(np.float32)
    if identical_layers:
        first = {
            k[len("layers.0."):]: v
            for k, v in tensors.items() if k.startswith("layers.0.")
        }
        for i in range(1, config.n_layers):
            for suffix, v in first.items():
                tensors[f"layers.{i}.{suffix}"] = v.copy()
    return Model(config, tensors)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="fixtures", help="output directory")
    ap.add_argument("--layers", type=int, default=6)
    ap.add_argument("--d-model", type=int, default=32)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--vocab", type=int, default=64)
    ap.add_argument("--pe", choices=("rotary", "learned", "alibi"), default="rotary")
    ap.add_argument("--tokens", type=int, default=2048, help="corpus length")
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--identical-layers", action="store_true")
    args = ap.parse_args()

    config = ModelConfig(
        n_layers=args.layers,
        d_model=args.d_model,
        n_heads=args.heads,
        n_kv_heads=args.heads,
        d_ff=4 * args.d_model,
        vocab_size=args.vocab,
        pe_type=args.pe,
        norm_kind="rmsnorm",
        activation="gelu",
        max_position=512,
        tied_lm_head=True,
        model_id=f"synthetic-L{args.layers}-d{args.d_model}",
    )
    model = synthetic_model(config, args.seed, args.identical_layers)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.ckpt")

    rng = np.random.default_rng([args.seed, 1])
    ids = rng.integers(0, args.vocab, size=args.tokens)
    corpus_id = f"synthetic-{args.seed}"
    write_corpus(
        out / "corpus.tok", ids,
        corpus_id=corpus_id, vocab_size=args.vocab, source="make_fixture",
    )

    contracts = {
        "fast": {"corpus_id": corpus_id, "window": 32, "stride": 16},
        "oracle": {"corpus_id": corpus_id, "window": 64, "stride": 32},
        "budgeted": {
            "corpus_id": corpus_id, "window": 32, "stride": 16,
            "token_budget": min(args.tokens, 1024),
        },
    }
    (out / "contracts.json").write_text(json.dumps(contracts, indent=2) + "\n")

    print(f"checkpoint: {out / 'model.ckpt'}  ({config.model_id})")
    print(f"corpus:     {out / 'corpus.tok'}  ({args.tokens} tokens, id {corpus_id})")
    print(f"contracts:  {out / 'contracts.json'}  ({', '.join(contracts)})")


if __name__ == "__main__":
    main()
