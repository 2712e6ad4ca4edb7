"""Small-sample statistics: percentile bootstrap, rank correlations, sign test.

These are deliberately hand-rolled rather than pulled from scipy: every
consumer needs exact, documented tie and zero handling, and the test
suite pins each routine against brute-force oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class CIResult:
    point: float
    lo: float
    hi: float
    level: float
    n_resamples: int
    seed: int

    @property
    def width(self) -> float:
        return self.hi - self.lo


def bootstrap_ci(
    samples,
    statistic=None,
    *,
    n_resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> CIResult:
    """Percentile bootstrap CI for `statistic` over row resampling.

    `samples` is (n,) or (n, k); rows are resampled with replacement and
    passed to `statistic` (default: mean of a 1-D sample). Deterministic
    for a given seed. Constant samples yield a zero-width interval.
    """
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    elif statistic is None:
        raise DomainError("multi-column samples need an explicit statistic")
    n = arr.shape[0]
    if n < 1:
        raise DomainError("bootstrap needs at least one sample")
    if not (0.0 < level < 1.0):
        raise DomainError(f"level must be in (0, 1), got {level}")
    if n_resamples < 1:
        raise DomainError("n_resamples must be >= 1")
    if not np.isfinite(arr).all():
        raise DomainError("bootstrap samples must be finite")
    rng = np.random.default_rng(seed)
    # one index matrix regardless of statistic so both paths below see
    # identical resamples for a given seed
    idx = rng.integers(0, n, size=(n_resamples, n))
    if statistic is None:
        point = float(np.mean(arr[:, 0]))
        draws = arr[idx, 0].mean(axis=1)
    else:
        point = float(statistic(arr))
        draws = np.array([float(statistic(arr[row])) for row in idx])
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(draws, [alpha, 1.0 - alpha])
    return CIResult(point=point, lo=float(lo), hi=float(hi), level=level,
                    n_resamples=n_resamples, seed=seed)


def _average_ranks(v: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties sharing the average of their positions."""
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    sv = v[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(np.dot(xc, xc)) * float(np.dot(yc, yc)))
    if denom == 0.0:
        raise DomainError("correlation undefined for a constant input")
    return float(np.dot(xc, yc) / denom)


def rank_correlation(x, y, method: str = "spearman") -> float:
    """Spearman rho (Pearson on average ranks) or Kendall tau-b."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DomainError(f"rank_correlation needs equal-length vectors, got {x.shape} vs {y.shape}")
    if len(x) < 2:
        raise DomainError("rank_correlation needs at least 2 points")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise DomainError("rank_correlation inputs must be finite")
    if method == "spearman":
        return _pearson(_average_ranks(x), _average_ranks(y))
    if method == "kendall":
        sx = np.sign(x[:, None] - x[None, :])
        sy = np.sign(y[:, None] - y[None, :])
        iu = np.triu_indices(len(x), k=1)
        s = float(np.sum(sx[iu] * sy[iu]))
        n0 = len(x) * (len(x) - 1) / 2.0
        tx = n0 - float(np.sum(sx[iu] != 0))
        ty = n0 - float(np.sum(sy[iu] != 0))
        denom = math.sqrt((n0 - tx) * (n0 - ty))
        if denom == 0.0:
            raise DomainError("correlation undefined for a constant input")
        return s / denom
    raise DomainError(f"unknown rank correlation method {method!r}")


@dataclass(frozen=True)
class SignTestResult:
    n_positive: int
    n_negative: int
    n_zero: int
    p_greater: float
    p_less: float
    p_two_sided: float


def sign_test(deltas, zero_tol: float = 0.0) -> SignTestResult:
    """Exact binomial sign test; |delta| <= zero_tol counts as a dropped zero.

    p_greater is P(X >= n_positive) for X ~ Binomial(m, 1/2) over the m
    nonzero deltas; the two-sided p doubles the smaller tail (capped at 1).
    """
    d = np.asarray(deltas, dtype=np.float64)
    if d.ndim != 1 or len(d) == 0:
        raise DomainError("sign_test needs a nonempty 1-D delta vector")
    if not np.isfinite(d).all():
        raise DomainError("sign_test deltas must be finite; filter undefined entries first")
    zero = np.abs(d) <= zero_tol
    n_zero = int(zero.sum())
    pos = int((d > zero_tol).sum())
    neg = int((d < -zero_tol).sum())
    m = pos + neg
    if m == 0:
        raise DomainError("sign_test undefined: all deltas are zero")
    denom = float(2**m)
    p_greater = sum(math.comb(m, k) for k in range(pos, m + 1)) / denom
    p_less = sum(math.comb(m, k) for k in range(0, pos + 1)) / denom
    return SignTestResult(
        n_positive=pos,
        n_negative=neg,
        n_zero=n_zero,
        p_greater=p_greater,
        p_less=p_less,
        p_two_sided=min(1.0, 2.0 * min(p_greater, p_less)),
    )
