"""Deterministic float32 tensor primitives shared by all forward-pass code.

Tensors are C-order float32 numpy arrays. Every primitive validates its
inputs and checks its output for NaN/Inf: a non-finite value is an error
here, never data. Reductions use fixed orders (numpy/BLAS kernels), so
repeated runs on one machine are bit-identical.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError, DomainError, NonFiniteError

F32 = np.float32


def ensure_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values produced in {where}")
    return x


def as_f32(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=F32)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product in float32. Supports stacked (batched) operands."""
    a = np.asarray(a, dtype=F32)
    b = np.asarray(b, dtype=F32)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    return ensure_finite(a @ b, "matmul")


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Probabilities along `axis`, computed with max-subtraction.

    Entries of -inf are allowed (they get probability 0, used by the
    causal mask); NaN or +inf inputs are rejected via the output check.
    """
    x = np.asarray(logits, dtype=F32)
    if x.size == 0 or x.shape[axis] == 0:
        raise DomainError("softmax of an empty vector")
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / np.sum(e, axis=axis, keepdims=True)
    return ensure_finite(out, "softmax")


def normalize(
    x: np.ndarray,
    gain: np.ndarray,
    kind: str,
    eps: float,
    bias: np.ndarray | None = None,
) -> np.ndarray:
    """Layer or RMS normalization over the last axis, then gain (and bias).

    layernorm: (x - mean) / sqrt(var + eps); rmsnorm: x / sqrt(mean(x^2) + eps).
    `gain`/`bias` must broadcast against x's trailing dimensions.
    """
    x = np.asarray(x, dtype=F32)
    gain = np.asarray(gain, dtype=F32)
    if x.shape[-1] != gain.shape[-1]:
        raise DimensionError(
            f"normalize gain length {gain.shape[-1]} != vector length {x.shape[-1]}"
        )
    if eps <= 0:
        raise DomainError("normalize eps must be > 0")
    if kind == "layernorm":
        mu = np.mean(x, axis=-1, keepdims=True, dtype=F32)
        var = np.mean(np.square(x - mu), axis=-1, keepdims=True, dtype=F32)
        y = (x - mu) / np.sqrt(var + F32(eps))
    elif kind == "rmsnorm":
        ms = np.mean(np.square(x), axis=-1, keepdims=True, dtype=F32)
        y = x / np.sqrt(ms + F32(eps))
    else:
        raise ConfigError(f"unknown normalization kind {kind!r}")
    y = y * gain
    if bias is not None:
        bias = np.asarray(bias, dtype=F32)
        if bias.shape[-1] != x.shape[-1]:
            raise DimensionError("normalize bias length mismatch")
        y = y + bias
    return ensure_finite(y, "normalize")


def rotary_tables(
    positions: np.ndarray, rot_dims: int, theta_base: float
) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (len(positions), rot_dims), half-split layout."""
    inv_freq = theta_base ** (
        -np.arange(0, rot_dims, 2, dtype=np.float64) / float(rot_dims)
    )
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    emb = np.concatenate([angles, angles], axis=-1)
    return np.cos(emb).astype(F32), np.sin(emb).astype(F32)


def apply_rotary(
    x: np.ndarray,
    positions: np.ndarray,
    theta_base: float = 10000.0,
    enabled: bool = True,
    fraction: float = 1.0,
) -> np.ndarray:
    """Rotary position rotation on head vectors; identity when disabled.

    x has shape (..., seq, heads, head_dim); positions has shape (seq,).
    The rotation pairs dimension d with d + rot/2 (half-split convention)
    and applies angle pos * theta_base^(-2d/rot). With fraction < 1 only
    the first int(head_dim * fraction) dims rotate; the rest pass through.
    Disabled means cos=1, sin=0: the input is returned unchanged.
    """
    x = np.asarray(x, dtype=F32)
    if not enabled:
        return x
    head_dim = x.shape[-1]
    rot = int(head_dim * fraction)
    if rot % 2 != 0 or rot <= 0:
        raise ConfigError(f"rotary needs a positive even rotated dimension, got {rot}")
    positions = np.asarray(positions)
    if positions.shape[0] != x.shape[-3]:
        raise DimensionError("positions length must match the sequence axis")
    cos, sin = rotary_tables(positions, rot, theta_base)
    cos = cos[:, None, :]
    sin = sin[:, None, :]
    xr = x[..., :rot]
    half = rot // 2
    rotated = np.concatenate([-xr[..., half:], xr[..., :half]], axis=-1)
    out_r = xr * cos + rotated * sin
    if rot == head_dim:
        out = out_r
    else:
        out = np.concatenate([out_r, x[..., rot:]], axis=-1)
    return ensure_finite(out, "apply_rotary")


def _erf(x: np.ndarray) -> np.ndarray:
    # Abramowitz & Stegun 7.1.26 rational approximation, max abs error
    # 1.5e-7: below float32 resolution, which is all the forward pass keeps.
    sign = np.sign(x)
    ax = np.abs(x)
    t = 1.0 / (1.0 + 0.3275911 * ax)
    poly = t * (
        0.254829592
        + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429)))
    )
    return sign * (1.0 - poly * np.exp(-ax * ax))


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact (erf-based) GELU in float32."""
    x64 = np.asarray(x, dtype=np.float64)
    out = 0.5 * x64 * (1.0 + _erf(x64 / np.sqrt(2.0)))
    return ensure_finite(out.astype(F32), "gelu")


def gelu_tanh(x: np.ndarray) -> np.ndarray:
    """Tanh-approximated GELU (the GPT-2/BLOOM variant)."""
    x = np.asarray(x, dtype=F32)
    c = F32(np.sqrt(2.0 / np.pi))
    out = F32(0.5) * x * (F32(1.0) + np.tanh(c * (x + F32(0.044715) * x * x * x)))
    return ensure_finite(out, "gelu_tanh")


def silu(x: np.ndarray) -> np.ndarray:
    """x * sigmoid(x) in float32."""
    x = np.asarray(x, dtype=F32)
    # exp only of non-positive arguments, so it cannot overflow
    pos = x >= 0
    e = np.exp(np.where(pos, -x, x))
    sig = np.where(pos, F32(1.0) / (F32(1.0) + e), e / (F32(1.0) + e))
    return ensure_finite(x * sig, "silu")


def relu(x: np.ndarray) -> np.ndarray:
    """max(x, 0) in float32 (OPT-family checkpoints)."""
    x = np.asarray(x, dtype=F32)
    return ensure_finite(np.maximum(x, F32(0.0)), "relu")


ACTIVATIONS = {"gelu": gelu, "gelu_tanh": gelu_tanh, "silu": silu, "relu": relu}
