"""Builders for tiny random models and corpora used across the test suite."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from protogap.container import write_corpus
from protogap.metrics import (
    ClassifierThresholds,
    DistanceMatrix,
    PairDistanceRecord,
    classify_pair,
)
from protogap.model import Model, ModelConfig, expected_tensor_shapes, save_checkpoint


def build_config(**over) -> ModelConfig:
    base = dict(
        n_layers=4,
        d_model=16,
        n_heads=4,
        n_kv_heads=4,
        d_ff=32,
        vocab_size=40,
        pe_type="rotary",
        norm_kind="rmsnorm",
        activation="gelu",
        max_position=64,
        tied_lm_head=True,
        model_id="tiny-test",
    )
    base.update(over)
    return ModelConfig(**base)


def random_tensors(
    config: ModelConfig,
    seed: int = 0,
    scale: float = 0.08,
    with_biases: bool | None = None,
    zero_lm_head: bool = False,
    identical_layers: bool = False,
) -> dict[str, np.ndarray]:
    """Random weights shaped for `config`, scaled to keep activations tame.

    with_biases=None follows convention: projection biases present only
    for layernorm models. Residual-writing projections (Wo, W_out) are
    shrunk by 1/sqrt(2L) so deep stacks stay in float32 comfort.
    """
    rng = np.random.default_rng(seed)
    if with_biases is None:
        with_biases = config.norm_kind == "layernorm"
    required, optional = expected_tensor_shapes(config)
    shrink = 1.0 / np.sqrt(2.0 * config.n_layers)

    def gen(name: str, shape) -> np.ndarray:
        if name.endswith("norm.gain"):
            return (1.0 + 0.1 * rng.standard_normal(shape)).astype(np.float32)
        if name.endswith("norm.bias"):
            return (0.05 * rng.standard_normal(shape)).astype(np.float32)
        if name == "lm_head" and zero_lm_head:
            return np.zeros(shape, dtype=np.float32)
        w = scale * rng.standard_normal(shape)
        if name.endswith(".Wo") or name.endswith(".W_out"):
            w = w * shrink
        if name.endswith(("bq", "bk", "bv", "bo", "b_in", "b_out")):
            w = 0.02 * rng.standard_normal(shape)
        return w.astype(np.float32)

    tensors = {name: gen(name, shape) for name, shape in required.items()}
    if with_biases:
        for name, shape in optional.items():
            if ".b" in name:
                tensors[name] = gen(name, shape)
    if identical_layers:
        p0 = "layers.0."
        first = {k[len(p0):]: v for k, v in tensors.items() if k.startswith(p0)}
        for i in range(1, config.n_layers):
            for suffix, v in first.items():
                tensors[f"layers.{i}.{suffix}"] = v.copy()
    return tensors


def build_model(config: ModelConfig | None = None, seed: int = 0, **kwargs) -> Model:
    over = {
        k: kwargs.pop(k)
        for k in list(kwargs)
        if k not in ("scale", "with_biases", "zero_lm_head", "identical_layers")
    }
    if config is None:
        config = build_config(**over)
    elif over:
        raise TypeError(f"config given alongside config overrides: {sorted(over)}")
    return Model(config, random_tensors(config, seed=seed, **kwargs))


def synthetic_matrix(protocol: str, pair_ds, thresholds=None) -> DistanceMatrix:
    """A DistanceMatrix built from explicit ((i, j), distance) entries."""
    thresholds = thresholds or ClassifierThresholds()
    records = [
        PairDistanceRecord(
            i=i, j=j, protocol=protocol,
            kl_ij=d, kl_ji=d, d_max=d, d_mean=d, d_geo=d, d_min=d,
            classification=classify_pair(d, thresholds),
        )
        for (i, j), d in pair_ds
    ]
    return DistanceMatrix(
        model_id="synthetic", protocol=protocol, pair_filter="explicit",
        prompt_provenance="synthetic", records=records,
        strong_count=sum(1 for r in records if r.d_max < thresholds.strong),
        conditional_count=sum(1 for r in records if r.d_max < thresholds.conditional),
    )


def write_fixture(
    dir_path,
    *,
    seed: int = 7,
    corpus_tokens: int = 400,
    corpus_id: str = "calib",
    model: Model | None = None,
    **model_kwargs,
) -> tuple[Model, Path, Path]:
    """Write a checkpoint plus a matching token corpus under dir_path."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    if model is None:
        model = build_model(seed=seed, **model_kwargs)
    elif model_kwargs:
        raise TypeError(f"model given alongside overrides: {sorted(model_kwargs)}")
    ckpt = dir_path / "model.ckpt"
    save_checkpoint(model, ckpt)
    rng = np.random.default_rng([seed, 1])
    ids = rng.integers(0, model.config.vocab_size, size=corpus_tokens)
    corpus = dir_path / "corpus.tok"
    write_corpus(
        corpus, ids,
        corpus_id=corpus_id, vocab_size=model.config.vocab_size, source="synthetic",
    )
    return model, ckpt, corpus


def random_prompts(
    vocab_size: int, n: int, min_len: int = 6, max_len: int = 12, seed: int = 0
) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        out.append(rng.integers(0, vocab_size, size=length).astype(np.int64))
    return out
