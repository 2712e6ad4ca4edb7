"""Spectral norms of residual-update Jacobians by finite differences.

The residual update of block k is g(x) = block(x) - x at a probe point
(the last-token input boundary of a prompt). We never materialize J for
a model: v -> Jv comes from a central difference along v, and Jt u from
central differences along the coordinate axes, so only black-box calls
to g are needed. The read-out is a Rayleigh-Ritz estimate over the
accumulated Krylov iterates, which converges much faster than the raw
Rayleigh quotient of the last iterate at the same call budget.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .model import Model, forward, last_row_block_fn


def _fd_axis_jacobian(g_fn, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Central-difference Jacobian columns: J[:, i] = dg/dx_i at x."""
    d = x.size
    eye = np.eye(d, dtype=np.float64) * epsilon
    rows = np.concatenate([x[None, :] + eye, x[None, :] - eye], axis=0)
    vals = np.asarray(g_fn(rows), dtype=np.float64)
    return (vals[:d] - vals[d:]).T / (2.0 * epsilon)


def _ritz_sigma(vs: list[np.ndarray], ws: list[np.ndarray]) -> float:
    """Top Ritz value of JtJ over span(vs), using ws[t] = JtJ vs[t]."""
    m = len(ws)
    V = np.stack(vs[:m], axis=0)
    W = np.stack(ws, axis=0)
    G = V @ V.T
    H = V @ W.T
    H = (H + H.T) / 2.0
    evals, evecs = np.linalg.eigh(G)
    keep = evals > max(evals[-1], 0.0) * 1e-10
    if not keep.any():
        return 0.0
    B = evecs[:, keep] / np.sqrt(evals[keep])
    lam = np.linalg.eigvalsh(B.T @ H @ B)
    return float(np.sqrt(max(lam[-1], 0.0)))


def spectral_norm_estimate(
    g_fn,
    x,
    *,
    iterations: int = 20,
    epsilon: float = 1e-3,
    seed=0,
):
    """Estimate ||J_g(x)||_2 from batched black-box calls to g.

    Returns (sigma, estimate_trace, flagged). On non-finite differences
    (epsilon under float32 noise) the whole probe retries once at 10x
    epsilon; if that also fails, sigma is nan and flagged is True.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if iterations < 1:
        raise DomainError(f"iterations must be >= 1, got {iterations}")
    if not epsilon > 0:
        raise DomainError(f"epsilon must be > 0, got {epsilon}")
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(x.size)
    v0 /= np.linalg.norm(v0)

    for eps in (epsilon, 10.0 * epsilon):
        jac = _fd_axis_jacobian(g_fn, x, eps)
        if not np.isfinite(jac).all():
            continue
        v = v0.copy()
        vs = [v]
        ws: list[np.ndarray] = []
        estimates: list[float] = []
        bad = False
        for _ in range(iterations):
            pair = np.asarray(
                g_fn(np.stack([x + eps * v, x - eps * v])), dtype=np.float64
            )
            if not np.isfinite(pair).all():
                bad = True
                break
            jv = (pair[0] - pair[1]) / (2.0 * eps)
            w = jac.T @ jv
            ws.append(w)
            estimates.append(_ritz_sigma(vs, ws))
            norm = np.linalg.norm(w)
            if norm == 0.0:
                break
            v = w / norm
            vs.append(v)
        if not bad:
            return estimates[-1], estimates, False
    return float("nan"), [], True


@dataclass
class JacobianReport:
    rows: list[dict]
    iterations: int
    epsilon: float
    seed: int

    def to_json_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "epsilon": self.epsilon,
            "seed": self.seed,
            "layers": self.rows,
        }


def residual_jacobian_norms(
    model: Model,
    prompts,
    layers=None,
    *,
    iterations: int = 20,
    epsilon: float = 1e-3,
    seed: int = 42,
) -> JacobianReport:
    """Per-layer spread of ||J_k||_2 over probe prompts.

    The probe point is each prompt's last-token input boundary; prompts
    whose probe stays non-finite after the epsilon retry are excluded
    from the aggregates and listed per layer.
    """
    L = model.config.n_layers
    layer_list = list(range(L)) if layers is None else [int(k) for k in layers]
    for k in layer_list:
        if not (0 <= k < L):
            raise DomainError(f"layer {k} out of range for {L} layers")
    prompts = list(prompts)
    if not prompts:
        raise DomainError("need at least one probe prompt")

    boundaries = []
    for prompt in prompts:
        res = forward(model, prompt, capture=True)
        boundaries.append(res.hidden)

    rows = []
    for k in layer_list:
        sigmas = []
        flagged = []
        residuals = []
        for p_idx, prompt in enumerate(prompts):
            context = boundaries[p_idx][k]
            block_fn = last_row_block_fn(model, k, context)
            x = context[-1]

            def g_fn(rows_in):
                out = block_fn(rows_in.astype(np.float32))
                return out - rows_in

            sigma, trace, bad = spectral_norm_estimate(
                g_fn, x, iterations=iterations, epsilon=epsilon,
                seed=[seed, k, p_idx],
            )
            if bad:
                flagged.append(p_idx)
                continue
            sigmas.append(sigma)
            residuals.append(
                abs(trace[-1] - trace[-2]) if len(trace) > 1 else 0.0
            )
        row = {
            "layer": k,
            "mean": float(np.mean(sigmas)) if sigmas else None,
            "max": float(np.max(sigmas)) if sigmas else None,
            "min": float(np.min(sigmas)) if sigmas else None,
            "n_prompts": len(sigmas),
            "flagged_prompts": flagged,
            "residual": float(np.max(residuals)) if residuals else None,
        }
        rows.append(row)
    return JacobianReport(rows=rows, iterations=iterations, epsilon=epsilon, seed=seed)
