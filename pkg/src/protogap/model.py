"""Decoder-only transformer forward passes with weight-routing interventions.

A checkpoint is loaded once and never mutated. Interventions (replace,
interchange, delete, average, share, head replace, rotary off) are
resolved into an ExecutionPlan: the list of block slots that still
execute and, per slot, which weights run there. Plans are per-call
values, so concurrent forwards over one checkpoint are safe.

All math is float32. There is no KV cache: every call is a full
teacher-forced pass over the sequence.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor_ops as T
from .container import read_container, write_container
from .errors import (
    ConfigError,
    DimensionError,
    FormatError,
    InterventionError,
    NonFiniteError,
)

PE_TYPES = ("absolute", "rotary", "alibi")
NORM_KINDS = ("layernorm", "rmsnorm")

NEG_INF = np.float32(-np.inf)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    n_kv_heads: int
    d_ff: int
    vocab_size: int
    pe_type: str
    norm_kind: str
    activation: str
    max_position: int
    tied_lm_head: bool
    norm_eps: float = 1e-5
    rope_theta: float = 10000.0
    rotary_fraction: float = 1.0
    parallel_residual: bool = False
    embedding_norm: bool = False
    model_id: str = "unnamed"

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.n_heads % self.n_kv_heads != 0:
            raise ConfigError(
                f"n_heads {self.n_heads} not divisible by n_kv_heads {self.n_kv_heads}"
            )
        if self.vocab_size < 1 or self.d_ff < 1 or self.max_position < 1:
            raise ConfigError("vocab_size, d_ff and max_position must be >= 1")
        if self.pe_type not in PE_TYPES:
            raise ConfigError(f"pe_type must be one of {PE_TYPES}, got {self.pe_type!r}")
        if self.norm_kind not in NORM_KINDS:
            raise ConfigError(f"norm_kind must be one of {NORM_KINDS}")
        if self.activation not in T.ACTIVATIONS:
            raise ConfigError(
                f"activation must be one of {sorted(T.ACTIVATIONS)}, got {self.activation!r}"
            )
        if not (0.0 < self.rotary_fraction <= 1.0):
            raise ConfigError("rotary_fraction must be in (0, 1]")
        if self.norm_eps <= 0:
            raise ConfigError("norm_eps must be > 0")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def kv_dim(self) -> int:
        return self.n_kv_heads * self.head_dim


CONFIG_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)}
REQUIRED_CONFIG_FIELDS = {
    f.name for f in dataclasses.fields(ModelConfig)
    if f.default is dataclasses.MISSING
}


def config_to_dict(config: ModelConfig) -> dict:
    return dataclasses.asdict(config)


def config_from_dict(d: dict) -> ModelConfig:
    if not isinstance(d, dict):
        raise FormatError("config block must be a JSON object")
    unknown = set(d) - CONFIG_FIELDS
    if unknown:
        raise FormatError(f"config has unknown fields: {sorted(unknown)}")
    missing = REQUIRED_CONFIG_FIELDS - set(d)
    if missing:
        raise FormatError(f"config is missing fields: {sorted(missing)}")
    return ModelConfig(**d)


# ---------------------------------------------------------------------------
# tensor layout

# Per-layer tensors live under "layers.<i>."; weights are stored (in, out)
# so the forward pass is always x @ W.
LAYER_REQUIRED = ("Wq", "Wk", "Wv", "Wo", "W_in", "W_out", "attn_norm.gain", "mlp_norm.gain")
LAYER_FIELD_BY_NAME = {
    "Wq": "Wq",
    "Wk": "Wk",
    "Wv": "Wv",
    "Wo": "Wo",
    "bq": "bq",
    "bk": "bk",
    "bv": "bv",
    "bo": "bo",
    "W_in": "W_in",
    "W_gate": "W_gate",
    "W_out": "W_out",
    "b_in": "b_in",
    "b_out": "b_out",
    "attn_norm.gain": "attn_norm_gain",
    "attn_norm.bias": "attn_norm_bias",
    "mlp_norm.gain": "mlp_norm_gain",
    "mlp_norm.bias": "mlp_norm_bias",
    "q_norm.gain": "q_norm_gain",
    "k_norm.gain": "k_norm_gain",
}


@dataclass
class LayerWeights:
    """One block's tensors. Optional fields are None when absent."""

    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    Wo: np.ndarray
    W_in: np.ndarray
    W_out: np.ndarray
    attn_norm_gain: np.ndarray
    mlp_norm_gain: np.ndarray
    bq: np.ndarray | None = None
    bk: np.ndarray | None = None
    bv: np.ndarray | None = None
    bo: np.ndarray | None = None
    W_gate: np.ndarray | None = None
    b_in: np.ndarray | None = None
    b_out: np.ndarray | None = None
    attn_norm_bias: np.ndarray | None = None
    mlp_norm_bias: np.ndarray | None = None
    q_norm_gain: np.ndarray | None = None
    k_norm_gain: np.ndarray | None = None


def expected_tensor_shapes(config: ModelConfig) -> tuple[dict, dict]:
    """(required, optional) maps of tensor name -> shape for this config."""
    d, dff, v = config.d_model, config.d_ff, config.vocab_size
    kv = config.kv_dim
    required: dict[str, tuple] = {"embedding": (v, d), "final_norm.gain": (d,)}
    optional: dict[str, tuple] = {}
    ln = config.norm_kind == "layernorm"
    if ln:
        required["final_norm.bias"] = (d,)
    if config.pe_type == "absolute":
        required["position_embedding"] = (config.max_position, d)
    if config.embedding_norm:
        required["embedding_norm.gain"] = (d,)
        if ln:
            required["embedding_norm.bias"] = (d,)
    if not config.tied_lm_head:
        required["lm_head"] = (d, v)
    gated = config.activation == "silu"
    for i in range(config.n_layers):
        p = f"layers.{i}."
        required[p + "Wq"] = (d, d)
        required[p + "Wk"] = (d, kv)
        required[p + "Wv"] = (d, kv)
        required[p + "Wo"] = (d, d)
        required[p + "W_in"] = (d, dff)
        required[p + "W_out"] = (dff, d)
        required[p + "attn_norm.gain"] = (d,)
        required[p + "mlp_norm.gain"] = (d,)
        if ln:
            required[p + "attn_norm.bias"] = (d,)
            required[p + "mlp_norm.bias"] = (d,)
        if gated:
            required[p + "W_gate"] = (d, dff)
        optional[p + "bq"] = (d,)
        optional[p + "bk"] = (kv,)
        optional[p + "bv"] = (kv,)
        optional[p + "bo"] = (d,)
        optional[p + "b_in"] = (dff,)
        optional[p + "b_out"] = (d,)
        optional[p + "q_norm.gain"] = (d,)
        optional[p + "k_norm.gain"] = (kv,)
    return required, optional


def _validate_tensors(config: ModelConfig, tensors: dict[str, np.ndarray]) -> None:
    required, optional = expected_tensor_shapes(config)
    for name, arr in tensors.items():
        if name in required:
            expected = required[name]
        elif name in optional:
            expected = optional[name]
        else:
            raise FormatError(f"unexpected tensor {name!r} for this config")
        if tuple(arr.shape) != expected:
            raise DimensionError(
                f"tensor {name!r}: expected shape {expected}, got {tuple(arr.shape)}"
            )
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor {name!r} contains non-finite values")
    missing = set(required) - set(tensors)
    if missing:
        raise FormatError(f"checkpoint is missing tensors: {sorted(missing)[:6]}")


def _layer_from_tensors(tensors: dict[str, np.ndarray], i: int) -> LayerWeights:
    kwargs = {}
    p = f"layers.{i}."
    for suffix, field in LAYER_FIELD_BY_NAME.items():
        kwargs[field] = tensors.get(p + suffix)
    return LayerWeights(**kwargs)


# ---------------------------------------------------------------------------
# model


class Model:
    """Immutable (config, tensors) pair with per-layer weight views."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray], validate: bool = True):
        tensors = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in tensors.items()}
        if validate:
            _validate_tensors(config, tensors)
        self.config = config
        self.tensors = tensors
        self.layers = [_layer_from_tensors(tensors, i) for i in range(config.n_layers)]
        self._lm = tensors["embedding"].T if config.tied_lm_head else tensors["lm_head"]
        self._bias_cache: dict[int, np.ndarray | None] = {}
        self._bias_lock = threading.Lock()

    def payload_hash(self) -> str:
        """SHA-256 over tensor names and bytes; unchanged by any forward."""
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode("utf-8"))
            h.update(self.tensors[name].tobytes())
        return h.hexdigest()

    def attn_bias(self, seq: int) -> np.ndarray | None:
        """Additive attention bias (1, H-or-1, seq, seq): causal mask + ALiBi."""
        with self._bias_lock:
            if seq in self._bias_cache:
                return self._bias_cache[seq]
        if seq == 1 and self.config.pe_type != "alibi":
            bias = None
        else:
            mask = np.triu(np.full((seq, seq), NEG_INF, dtype=np.float32), k=1)
            if self.config.pe_type == "alibi":
                slopes = alibi_slopes(self.config.n_heads).astype(np.float32)
                rel = (np.arange(seq)[None, :] - np.arange(seq)[:, None]).astype(np.float32)
                bias = slopes[:, None, None] * rel[None, :, :] + mask[None, :, :]
                bias = bias[None, ...]
            else:
                bias = mask[None, None, :, :]
        with self._bias_lock:
            if len(self._bias_cache) > 64:
                self._bias_cache.clear()
            self._bias_cache[seq] = bias
        return bias


def alibi_slopes(n_heads: int) -> np.ndarray:
    """Geometric head slopes; non-power-of-two counts interleave the next octave."""

    def pow2(n: int) -> list[float]:
        start = 2.0 ** (-(2.0 ** -(math.log2(n) - 3)))
        return [start ** (i + 1) for i in range(n)]

    if math.log2(n_heads).is_integer():
        return np.array(pow2(n_heads))
    closest = 2 ** math.floor(math.log2(n_heads))
    extra = pow2(2 * closest)[0::2][: n_heads - closest]
    return np.array(pow2(closest) + extra)


def load_checkpoint(path: str | Path) -> Model:
    config_dict, tensors = read_container(path)
    config = config_from_dict(config_dict)
    return Model(config, tensors)


def save_checkpoint(model: Model, path: str | Path) -> None:
    write_container(path, config_to_dict(model.config), model.tensors)


# ---------------------------------------------------------------------------
# intervention algebra


def _as_index_tuple(value, what: str) -> tuple[int, ...]:
    items = tuple(int(v) for v in value)
    if len(set(items)) != len(items):
        raise InterventionError(f"{what} has duplicate layer indices: {items}")
    return tuple(sorted(items))


@dataclass(frozen=True)
class Replace:
    target: int
    source: int


@dataclass(frozen=True)
class Interchange:
    i: int
    j: int


@dataclass(frozen=True)
class Delete:
    layers: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", _as_index_tuple(self.layers, "Delete set"))


@dataclass(frozen=True)
class AverageMerge:
    i: int
    j: int


@dataclass(frozen=True)
class Share:
    source: int
    positions: tuple[int, ...]

    def __post_init__(self):
        if not tuple(self.positions):
            raise InterventionError("Share positions must be nonempty")
        object.__setattr__(self, "positions", _as_index_tuple(self.positions, "Share positions"))


@dataclass(frozen=True)
class HeadReplace:
    target: int
    source: int
    head: int


@dataclass(frozen=True)
class RopeOff:
    pass


Intervention = Replace | Interchange | Delete | AverageMerge | Share | HeadReplace | RopeOff


@dataclass
class ExecutionPlan:
    """Resolved routing: which slots run, with whose weights."""

    slots: tuple[int, ...]
    weights: dict[int, LayerWeights]
    rope_enabled: bool
    min_affected: int

    @property
    def is_identity(self) -> bool:
        return self.min_affected >= len(self.slots) and len(self.weights) == len(self.slots)


def _check_index(i: int, L: int, what: str) -> int:
    i = int(i)
    if not (0 <= i < L):
        raise InterventionError(f"{what} index {i} out of range [0, {L})")
    return i


def _average_weights(a: LayerWeights, b: LayerWeights) -> LayerWeights:
    kwargs = {}
    for f in dataclasses.fields(LayerWeights):
        x, y = getattr(a, f.name), getattr(b, f.name)
        if (x is None) != (y is None):
            raise InterventionError(f"cannot average layers: {f.name} present in only one")
        kwargs[f.name] = None if x is None else ((x + y) * np.float32(0.5))
    return LayerWeights(**kwargs)


def _head_spliced(
    target: LayerWeights, source: LayerWeights, head: int, config: ModelConfig
) -> LayerWeights:
    hd = config.head_dim
    kv_head = head * config.n_kv_heads // config.n_heads
    qs = slice(head * hd, (head + 1) * hd)
    ks = slice(kv_head * hd, (kv_head + 1) * hd)

    out = dataclasses.replace(target)

    def splice(field: str, sl: slice, axis: int):
        t, s = getattr(out, field), getattr(source, field)
        if t is None and s is None:
            return
        if (t is None) != (s is None):
            raise InterventionError(f"cannot head-splice: {field} present in only one layer")
        t = t.copy()
        if axis == 0:
            t[sl] = s[sl]
        else:
            t[:, sl] = s[:, sl]
        setattr(out, field, t)

    splice("Wq", qs, 1)
    splice("bq", qs, 0)
    splice("Wk", ks, 1)
    splice("bk", ks, 0)
    splice("Wv", ks, 1)
    splice("bv", ks, 0)
    splice("Wo", qs, 0)  # rows of the output projection belong to the head
    splice("q_norm_gain", qs, 0)
    splice("k_norm_gain", ks, 0)
    return out


def resolve_interventions(model: Model, interventions) -> ExecutionPlan:
    """Fold a left-to-right edit list into the executed-slot routing.

    Sources always refer to the ORIGINAL checkpoint layers; a later edit
    on a slot overwrites an earlier one. Delete indices are original
    indices too and are resolved after routing, so deleting a slot that
    another edit targets is a conflict.
    """
    cfg = model.config
    L = cfg.n_layers
    original = model.layers
    routing: dict[int, LayerWeights] = {i: original[i] for i in range(L)}
    deleted: set[int] = set()
    touched: set[int] = set()
    rope_enabled = True
    rope_off = False

    for iv in interventions:
        if isinstance(iv, Replace):
            t = _check_index(iv.target, L, "Replace target")
            s = _check_index(iv.source, L, "Replace source")
            routing[t] = original[s]
            touched.add(t)
        elif isinstance(iv, Interchange):
            i = _check_index(iv.i, L, "Interchange")
            j = _check_index(iv.j, L, "Interchange")
            routing[i], routing[j] = original[j], original[i]
            touched.update((i, j))
        elif isinstance(iv, AverageMerge):
            i = _check_index(iv.i, L, "AverageMerge")
            j = _check_index(iv.j, L, "AverageMerge")
            avg = _average_weights(original[i], original[j])
            routing[i] = routing[j] = avg
            touched.update((i, j))
        elif isinstance(iv, Share):
            s = _check_index(iv.source, L, "Share source")
            for p in iv.positions:
                p = _check_index(p, L, "Share position")
                routing[p] = original[s]
                touched.add(p)
        elif isinstance(iv, HeadReplace):
            t = _check_index(iv.target, L, "HeadReplace target")
            s = _check_index(iv.source, L, "HeadReplace source")
            if not (0 <= int(iv.head) < cfg.n_heads):
                raise InterventionError(
                    f"HeadReplace head {iv.head} out of range [0, {cfg.n_heads})"
                )
            routing[t] = _head_spliced(original[t], original[s], int(iv.head), cfg)
            touched.add(t)
        elif isinstance(iv, Delete):
            for d in iv.layers:
                deleted.add(_check_index(d, L, "Delete"))
        elif isinstance(iv, RopeOff):
            if cfg.pe_type != "rotary":
                raise InterventionError("RopeOff requires a rotary-position model")
            rope_off = True
        else:
            raise InterventionError(f"unknown intervention {iv!r}")

    conflict = deleted & touched
    if conflict:
        raise InterventionError(
            f"layers {sorted(conflict)} are both deleted and targeted by a routing edit"
        )
    if len(deleted) >= L:
        raise InterventionError("cannot delete every layer")
    if rope_off:
        rope_enabled = False

    slots = tuple(i for i in range(L) if i not in deleted)
    weights = {s: routing[s] for s in slots}
    affected = set(deleted)
    affected.update(s for s in slots if weights[s] is not original[s])
    if rope_off:
        affected.add(0)
    min_affected = min(affected) if affected else L
    return ExecutionPlan(slots=slots, weights=weights, rope_enabled=rope_enabled,
                         min_affected=min_affected)


def identity_plan(model: Model) -> ExecutionPlan:
    return resolve_interventions(model, ())


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class ForwardResult:
    logits: np.ndarray
    next_token: np.ndarray
    positions: tuple[int, ...]
    hidden: list[np.ndarray] | None = None


def _attention(cfg: ModelConfig, w: LayerWeights, a_in: np.ndarray,
               positions: np.ndarray, rope_enabled: bool,
               bias: np.ndarray | None) -> np.ndarray:
    B, s, d = a_in.shape
    H, Hkv, hd = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
    q = T.matmul(a_in, w.Wq)
    if w.bq is not None:
        q = q + w.bq
    k = T.matmul(a_in, w.Wk)
    if w.bk is not None:
        k = k + w.bk
    v = T.matmul(a_in, w.Wv)
    if w.bv is not None:
        v = v + w.bv
    q = q.reshape(B, s, H, hd)
    k = k.reshape(B, s, Hkv, hd)
    v = v.reshape(B, s, Hkv, hd)
    if w.q_norm_gain is not None:
        q = T.normalize(q, w.q_norm_gain.reshape(H, hd), "rmsnorm", cfg.norm_eps)
    if w.k_norm_gain is not None:
        k = T.normalize(k, w.k_norm_gain.reshape(Hkv, hd), "rmsnorm", cfg.norm_eps)
    if cfg.pe_type == "rotary":
        q = T.apply_rotary(q, positions, cfg.rope_theta, rope_enabled, cfg.rotary_fraction)
        k = T.apply_rotary(k, positions, cfg.rope_theta, rope_enabled, cfg.rotary_fraction)
    if Hkv != H:
        rep = H // Hkv
        k = np.repeat(k, rep, axis=2)
        v = np.repeat(v, rep, axis=2)
    qh = q.transpose(0, 2, 1, 3) * np.float32(1.0 / math.sqrt(hd))
    scores = T.matmul(qh, k.transpose(0, 2, 3, 1))
    if bias is not None:
        scores = scores + bias
    probs = T.softmax(scores, axis=-1)
    ctx = T.matmul(probs, v.transpose(0, 2, 1, 3))
    out = T.matmul(ctx.transpose(0, 2, 1, 3).reshape(B, s, H * hd), w.Wo)
    if w.bo is not None:
        out = out + w.bo
    return out


def _mlp(cfg: ModelConfig, w: LayerWeights, x: np.ndarray) -> np.ndarray:
    act = T.ACTIVATIONS[cfg.activation]
    up = T.matmul(x, w.W_in)
    if w.b_in is not None:
        up = up + w.b_in
    if w.W_gate is not None:
        hidden = act(T.matmul(x, w.W_gate)) * up
    else:
        hidden = act(up)
    out = T.matmul(hidden, w.W_out)
    if w.b_out is not None:
        out = out + w.b_out
    return out


def _block(cfg: ModelConfig, w: LayerWeights, h: np.ndarray, positions: np.ndarray,
           rope_enabled: bool, bias: np.ndarray | None) -> np.ndarray:
    a_in = T.normalize(h, w.attn_norm_gain, cfg.norm_kind, cfg.norm_eps, w.attn_norm_bias)
    attn = _attention(cfg, w, a_in, positions, rope_enabled, bias)
    if cfg.parallel_residual:
        m_in = T.normalize(h, w.mlp_norm_gain, cfg.norm_kind, cfg.norm_eps, w.mlp_norm_bias)
        return T.ensure_finite(h + attn + _mlp(cfg, w, m_in), "block")
    h = h + attn
    m_in = T.normalize(h, w.mlp_norm_gain, cfg.norm_kind, cfg.norm_eps, w.mlp_norm_bias)
    return T.ensure_finite(h + _mlp(cfg, w, m_in), "block")


def _embed(model: Model, tokens: np.ndarray) -> np.ndarray:
    cfg = model.config
    h = model.tensors["embedding"][tokens]
    if cfg.pe_type == "absolute":
        h = h + model.tensors["position_embedding"][: tokens.shape[1]]
    if cfg.embedding_norm:
        h = T.normalize(
            h,
            model.tensors["embedding_norm.gain"],
            cfg.norm_kind,
            cfg.norm_eps,
            model.tensors.get("embedding_norm.bias"),
        )
    return T.ensure_finite(np.ascontiguousarray(h, dtype=np.float32), "embedding")


def _final_logits(model: Model, h: np.ndarray, head_positions) -> np.ndarray:
    cfg = model.config
    hfin = T.normalize(
        h,
        model.tensors["final_norm.gain"],
        cfg.norm_kind,
        cfg.norm_eps,
        model.tensors.get("final_norm.bias"),
    )
    if head_positions is not None:
        hfin = hfin[:, head_positions, :]
    return T.matmul(hfin, model._lm)


def _forward_batch(
    model: Model,
    tokens: np.ndarray,
    plan: ExecutionPlan | None = None,
    *,
    capture: bool = False,
    head_positions=None,
    start_layer: int = 0,
    initial_hidden: np.ndarray | None = None,
) -> tuple[np.ndarray, list[np.ndarray] | None]:
    """Batched forward over (B, seq) token ids; returns (logits, boundaries).

    With `initial_hidden` the pass resumes at `start_layer` from a cached
    boundary state; valid only when everything below start_layer matches
    the baseline, which resolve_interventions guarantees via min_affected.
    """
    cfg = model.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise DimensionError(f"token batch must be 2-D, got shape {tokens.shape}")
    B, s = tokens.shape
    if s < 1:
        raise DimensionError("empty token sequence")
    if s > cfg.max_position:
        raise DimensionError(f"sequence length {s} exceeds max_position {cfg.max_position}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise DimensionError("token id out of vocabulary range")
    if plan is None:
        plan = identity_plan(model)
    if initial_hidden is not None and capture:
        raise ConfigError("capture and resume are mutually exclusive")

    if initial_hidden is None:
        h = _embed(model, tokens)
        if start_layer != 0:
            raise ConfigError("start_layer requires initial_hidden")
    else:
        h = initial_hidden
    positions = np.arange(s)
    bias = model.attn_bias(s)
    boundaries: list[np.ndarray] | None = [h] if capture else None
    for slot in plan.slots:
        if slot < start_layer:
            continue
        h = _block(cfg, plan.weights[slot], h, positions, plan.rope_enabled, bias)
        if capture:
            boundaries.append(h)
    logits = _final_logits(model, h, head_positions)
    return logits, boundaries


def forward(
    model: Model,
    tokens,
    interventions=(),
    capture: bool = False,
    head_positions=None,
) -> ForwardResult:
    """Single-sequence forward; next_token holds softmax rows at the
    requested positions (default: the last position only)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1:
        raise DimensionError(f"forward takes a 1-D token sequence, got shape {tokens.shape}")
    plan = resolve_interventions(model, interventions)
    s = tokens.shape[0]
    logits, boundaries = _forward_batch(
        model, tokens[None, :], plan, capture=capture, head_positions=head_positions
    )
    out_logits = logits[0]
    if head_positions is None:
        ppos = (s - 1,)
        probs = T.softmax(out_logits[-1:], axis=-1)
    else:
        ppos = tuple(int(p) for p in head_positions)
        probs = T.softmax(out_logits, axis=-1)
    hidden = [b[0] for b in boundaries] if boundaries is not None else None
    return ForwardResult(logits=out_logits, next_token=probs, positions=ppos, hidden=hidden)


def materialize_pruned(model: Model, delete_set) -> Model:
    """A physically smaller checkpoint: kept layers renumbered in order."""
    L = model.config.n_layers
    delete = {_check_index(i, L, "Delete") for i in delete_set}
    keep = [i for i in range(L) if i not in delete]
    if not keep:
        raise InterventionError("cannot delete every layer")
    tensors: dict[str, np.ndarray] = {}
    for name, arr in model.tensors.items():
        if not name.startswith("layers."):
            tensors[name] = arr.copy()
    for new_i, old_i in enumerate(keep):
        old_p, new_p = f"layers.{old_i}.", f"layers.{new_i}."
        for name, arr in model.tensors.items():
            if name.startswith(old_p):
                tensors[new_p + name[len(old_p):]] = arr.copy()
    config = dataclasses.replace(model.config, n_layers=len(keep))
    return Model(config, tensors)


# ---------------------------------------------------------------------------
# incremental last-row evaluation

# Causality means replacing only the final token's boundary vector leaves
# every other row of the block computation unchanged, so probe batches can
# reuse the prefix keys/values instead of full block forwards.


def last_row_block_fn(model: Model, layer_index: int, context: np.ndarray,
                      rope_enabled: bool = True):
    """Callable (R, d) -> (R, d): block output at the last position when
    each probe row replaces the last row of `context` (the block's input
    boundary state, shape (seq, d))."""
    cfg = model.config
    w = model.layers[_check_index(layer_index, cfg.n_layers, "layer")]
    s, d = context.shape
    H, Hkv, hd = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
    rep = H // Hkv
    scale = np.float32(1.0 / math.sqrt(hd))

    prefix = context[:-1]
    if s > 1:
        a_prev = T.normalize(prefix, w.attn_norm_gain, cfg.norm_kind, cfg.norm_eps,
                             w.attn_norm_bias)
        k_prev = T.matmul(a_prev, w.Wk)
        if w.bk is not None:
            k_prev = k_prev + w.bk
        v_prev = T.matmul(a_prev, w.Wv)
        if w.bv is not None:
            v_prev = v_prev + w.bv
        k_prev = k_prev.reshape(s - 1, Hkv, hd)
        v_prev = v_prev.reshape(s - 1, Hkv, hd)
        if w.k_norm_gain is not None:
            k_prev = T.normalize(k_prev, w.k_norm_gain.reshape(Hkv, hd), "rmsnorm",
                                 cfg.norm_eps)
        if cfg.pe_type == "rotary":
            k_prev = T.apply_rotary(k_prev, np.arange(s - 1), cfg.rope_theta,
                                    rope_enabled, cfg.rotary_fraction)
        if rep != 1:
            k_prev = np.repeat(k_prev, rep, axis=1)
            v_prev = np.repeat(v_prev, rep, axis=1)
        # (H, s-1, hd) for per-head matmuls
        k_prev = np.ascontiguousarray(k_prev.transpose(1, 0, 2))
        v_prev = np.ascontiguousarray(v_prev.transpose(1, 0, 2))
    else:
        k_prev = v_prev = None

    if cfg.pe_type == "alibi":
        slopes = alibi_slopes(H).astype(np.float32)
        alibi_row = slopes[:, None] * (np.arange(s, dtype=np.float32)[None, :] - (s - 1))
    else:
        alibi_row = None
    last_pos = np.array([s - 1])

    def block_last(xs: np.ndarray) -> np.ndarray:
        xs = np.ascontiguousarray(xs, dtype=np.float32)
        R = xs.shape[0]
        a = T.normalize(xs, w.attn_norm_gain, cfg.norm_kind, cfg.norm_eps, w.attn_norm_bias)
        q = T.matmul(a, w.Wq)
        if w.bq is not None:
            q = q + w.bq
        k_own = T.matmul(a, w.Wk)
        if w.bk is not None:
            k_own = k_own + w.bk
        v_own = T.matmul(a, w.Wv)
        if w.bv is not None:
            v_own = v_own + w.bv
        q = q.reshape(R, H, hd)
        k_own = k_own.reshape(R, Hkv, hd)
        v_own = v_own.reshape(R, Hkv, hd)
        if w.q_norm_gain is not None:
            q = T.normalize(q, w.q_norm_gain.reshape(H, hd), "rmsnorm", cfg.norm_eps)
        if w.k_norm_gain is not None:
            k_own = T.normalize(k_own, w.k_norm_gain.reshape(Hkv, hd), "rmsnorm", cfg.norm_eps)
        if cfg.pe_type == "rotary":
            q = T.apply_rotary(q[:, None], last_pos, cfg.rope_theta, rope_enabled,
                               cfg.rotary_fraction)[:, 0]
            k_own = T.apply_rotary(k_own[:, None], last_pos, cfg.rope_theta, rope_enabled,
                                   cfg.rotary_fraction)[:, 0]
        if rep != 1:
            k_own = np.repeat(k_own, rep, axis=1)
            v_own = np.repeat(v_own, rep, axis=1)
        q = q * scale
        own_score = np.einsum("rhd,rhd->rh", q, k_own)
        if k_prev is not None:
            prev_scores = np.einsum("rhd,hsd->rhs", q, k_prev)
            scores = np.concatenate([prev_scores, own_score[:, :, None]], axis=-1)
        else:
            scores = own_score[:, :, None]
        if alibi_row is not None:
            scores = scores + alibi_row[None, :, :]
        probs = T.softmax(scores, axis=-1)
        if v_prev is not None:
            ctx = np.einsum("rhs,hsd->rhd", probs[:, :, :-1], v_prev)
            ctx = ctx + probs[:, :, -1:] * v_own
        else:
            ctx = probs[:, :, -1:] * v_own
        attn = T.matmul(ctx.reshape(R, H * hd), w.Wo)
        if w.bo is not None:
            attn = attn + w.bo
        if cfg.parallel_residual:
            m_in = T.normalize(xs, w.mlp_norm_gain, cfg.norm_kind, cfg.norm_eps,
                               w.mlp_norm_bias)
            out = xs + attn + _mlp(cfg, w, m_in)
        else:
            h1 = xs + attn
            m_in = T.normalize(h1, w.mlp_norm_gain, cfg.norm_kind, cfg.norm_eps,
                               w.mlp_norm_bias)
            out = h1 + _mlp(cfg, w, m_in)
        return T.ensure_finite(out, "last-row block")

    return block_last
