"""Swap-protocol distances between layer pairs, measured at the output.

The replacement distance between layers i and j runs the model twice,
once with i's weights overwritten by j's and once the reverse, and takes
the max of the two mean next-token KLs. The interchange distance swaps
both layers in a single model, which is symmetric by construction. The
gap between the two protocols is what the regime report summarizes.

Baseline forwards are computed once per prompt and shared across every
pair; intervened forwards resume from the cached boundary state below
the first affected layer.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor_ops as T
from .container import TokenCorpus
from .errors import DimensionError, DomainError, NonFiniteError
from .model import (
    ExecutionPlan,
    Interchange,
    Model,
    Replace,
    HeadReplace,
    RopeOff,
    _forward_batch,
    resolve_interventions,
)
from .stats import bootstrap_ci

PROB_FLOOR = 1e-12
SYMMETRIZE_KINDS = ("max", "mean", "geometric", "min")
RATIO_FLOOR = 1e-9


def default_thread_count() -> int:
    raw = os.environ.get("PROTOGAP_THREADS", "")
    if raw.strip():
        try:
            return max(1, int(raw))
        except ValueError:
            raise DomainError(f"PROTOGAP_THREADS must be an integer, got {raw!r}") from None
    return 1


# ---------------------------------------------------------------------------
# prompt sets


@dataclass
class PromptSet:
    prompts: list
    provenance: str = "unspecified"
    nominal_length: int | None = None

    def __post_init__(self):
        if not self.prompts:
            raise DomainError("PromptSet needs at least one prompt")
        normalized = []
        for k, p in enumerate(self.prompts):
            arr = np.asarray(p, dtype=np.int64)
            if arr.ndim != 1 or arr.shape[0] < 2:
                raise DomainError(f"prompt {k} must be a token sequence of length >= 2")
            normalized.append(arr)
        self.prompts = normalized
        if self.nominal_length is None:
            self.nominal_length = int(np.median([len(p) for p in normalized]))

    def __len__(self) -> int:
        return len(self.prompts)


def prompts_from_corpus(
    corpus: TokenCorpus, n_prompts: int, length: int, offset: int = 0
) -> PromptSet:
    """Consecutive non-overlapping windows of `length` tokens."""
    if length < 2:
        raise DomainError("prompt length must be >= 2")
    if n_prompts < 1:
        raise DomainError("need at least one prompt")
    needed = offset + n_prompts * length
    if needed > len(corpus):
        raise DomainError(
            f"corpus {corpus.corpus_id} has {len(corpus)} tokens, "
            f"need {needed} for {n_prompts} prompts of length {length}"
        )
    prompts = [
        corpus.ids[offset + k * length : offset + (k + 1) * length] for k in range(n_prompts)
    ]
    return PromptSet(
        prompts=prompts,
        provenance=f"{corpus.corpus_id}:w{length}x{n_prompts}@{offset}",
        nominal_length=length,
    )


# ---------------------------------------------------------------------------
# KL and symmetrization


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats; q is floored at 1e-12 before the log."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise DimensionError(f"kl_divergence shapes differ: {p.shape} vs {q.shape}")
    for name, v in (("p", p), ("q", q)):
        if (v < 0).any():
            raise DomainError(f"{name} has negative entries")
        if abs(v.sum() - 1.0) > 1e-4:
            raise DomainError(f"{name} sums to {v.sum():.6f}, not 1 within 1e-4")
    return _kl_rows(p[None, :], q[None, :])[0]


def _kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL over the last axis; p rows with zero mass contribute 0."""
    q = np.maximum(q.astype(np.float64), PROB_FLOOR)
    p = p.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * (np.log(p) - np.log(q)), 0.0)
    out = terms.sum(axis=-1)
    return np.maximum(out, 0.0)


def symmetrize(kl_ij: float, kl_ji: float, kind: str) -> float:
    """Combine the two directed distances; max >= mean >= geometric >= min."""
    if kl_ij < 0 or kl_ji < 0:
        raise DomainError(f"directed distances must be >= 0, got ({kl_ij}, {kl_ji})")
    if kind == "max":
        return max(kl_ij, kl_ji)
    if kind == "mean":
        return (kl_ij + kl_ji) / 2.0
    if kind == "geometric":
        # sqrt each factor (avoids subnormal underflow), then clamp the rounded
        # product into [min, mean] where the true geometric mean always lies
        g = math.sqrt(kl_ij) * math.sqrt(kl_ji)
        return min(max(g, min(kl_ij, kl_ji)), (kl_ij + kl_ji) / 2.0)
    if kind == "min":
        return min(kl_ij, kl_ji)
    raise DomainError(f"unknown symmetrization {kind!r}")


@dataclass(frozen=True)
class ClassifierThresholds:
    strong: float = 0.05
    conditional: float = 0.10

    def __post_init__(self):
        if not (0.0 < self.strong < self.conditional):
            raise DomainError(
                f"need 0 < strong < conditional, got ({self.strong}, {self.conditional})"
            )


def classify_pair(d: float, thresholds: ClassifierThresholds | None = None) -> str:
    thresholds = thresholds or ClassifierThresholds()
    if d < 0:
        raise DomainError(f"distance must be >= 0, got {d}")
    if d < thresholds.strong:
        return "strong"
    if d < thresholds.conditional:
        return "conditional"
    return "non"


# ---------------------------------------------------------------------------
# pair filters


def pair_list(n_layers: int, pair_filter: str) -> list[tuple[int, int]]:
    """Expand 'all' | 'adjacent' | 'gap:<k>' into (i, j) pairs with i < j."""
    if pair_filter == "all":
        pairs = [(i, j) for i in range(n_layers) for j in range(i + 1, n_layers)]
    elif pair_filter == "adjacent":
        pairs = [(i, i + 1) for i in range(n_layers - 1)]
    elif pair_filter.startswith("gap:"):
        try:
            k = int(pair_filter[4:])
        except ValueError:
            raise DomainError(f"bad pair filter {pair_filter!r}") from None
        if k < 1:
            raise DomainError(f"gap filter needs k >= 1, got {k}")
        pairs = [
            (i, j) for i in range(n_layers) for j in range(i + 1, min(i + k, n_layers - 1) + 1)
        ]
    else:
        raise DomainError(f"unknown pair filter {pair_filter!r}; use all|adjacent|gap:<k>")
    if not pairs:
        raise DomainError(f"pair filter {pair_filter!r} yields no pairs for L={n_layers}")
    return pairs


# ---------------------------------------------------------------------------
# records


@dataclass
class PairDistanceRecord:
    i: int
    j: int
    protocol: str  # replacement | interchange
    kl_ij: float | None  # mean KL against M_{i<-j} (interchange: the swap KL)
    kl_ji: float | None
    d_max: float | None
    d_mean: float | None
    d_geo: float | None
    d_min: float | None
    classification: str | None
    ci: tuple[float, float] | None = None
    flagged: bool = False
    flag_reason: str | None = None
    per_prompt: dict = field(default_factory=dict, repr=False)

    @property
    def distance(self) -> float | None:
        """The protocol's canonical distance: bidirectional max, or the swap mean."""
        return self.d_max

    @property
    def gap(self) -> int:
        return abs(self.i - self.j)

    def to_json_dict(self) -> dict:
        return {
            "i": self.i,
            "j": self.j,
            "gap": self.gap,
            "kl_ij": self.kl_ij,
            "kl_ji": self.kl_ji,
            "d_max": self.d_max,
            "d_mean": self.d_mean,
            "d_geo": self.d_geo,
            "d_min": self.d_min,
            "class": self.classification,
            "ci": list(self.ci) if self.ci is not None else None,
        }


@dataclass
class DistanceMatrix:
    model_id: str
    protocol: str
    pair_filter: str
    prompt_provenance: str
    records: list[PairDistanceRecord]
    strong_count: int
    conditional_count: int

    def record_for(self, i: int, j: int) -> PairDistanceRecord:
        a, b = min(i, j), max(i, j)
        for r in self.records:
            if (r.i, r.j) == (a, b):
                return r
        raise DomainError(f"no record for pair ({i}, {j})")

    @property
    def flagged_pairs(self) -> list[tuple[int, int]]:
        return [(r.i, r.j) for r in self.records if r.flagged]

    def to_json_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "protocol": self.protocol,
            "pair_filter": self.pair_filter,
            "prompt_provenance": self.prompt_provenance,
            "records": [r.to_json_dict() for r in self.records],
            "strong_count": self.strong_count,
            "conditional_count": self.conditional_count,
        }


def _cumulative_counts(records, thresholds: ClassifierThresholds) -> tuple[int, int]:
    # COND is cumulative: every strong pair is also below the conditional cut
    strong = sum(1 for r in records if not r.flagged and r.distance < thresholds.strong)
    cond = sum(1 for r in records if not r.flagged and r.distance < thresholds.conditional)
    return strong, cond


# ---------------------------------------------------------------------------
# sweep engine


@dataclass
class _Bucket:
    prompt_indices: list[int]
    tokens: np.ndarray                 # (B, s)
    head_positions: list[int]
    boundaries: list[np.ndarray]       # L+1 states of (B, s, d)
    base_probs: np.ndarray             # (B, P, V)


def _plan_delta_start(base: ExecutionPlan, variant: ExecutionPlan, n_layers: int) -> int:
    """First block index where `variant` departs from `base`; the cached
    baseline boundary at that index is still valid for the variant."""
    if base.rope_enabled != variant.rope_enabled:
        return 0
    affected = set(base.slots).symmetric_difference(variant.slots)
    for slot in base.slots:
        if slot in variant.weights and variant.weights[slot] is not base.weights[slot]:
            affected.add(slot)
    return min(affected) if affected else n_layers


class _SweepEngine:
    """Per-(model, prompts) context: cached baselines plus resume logic.

    base_interventions (e.g. RopeOff for the counterfactual condition)
    define the condition's baseline and are folded into every variant.
    Boundary caching stays valid because the variant plan can only lower
    min_affected relative to the shared base edits.
    """

    def __init__(self, model: Model, prompt_set: PromptSet, positions: str = "last",
                 base_interventions=()):
        if positions not in ("last", "all"):
            raise DomainError(f"positions must be 'last' or 'all', got {positions!r}")
        self.model = model
        self.prompt_set = prompt_set
        self.positions = positions
        self.base_interventions = tuple(base_interventions)
        base_plan = resolve_interventions(model, self.base_interventions)
        self.base_plan = base_plan
        self.buckets: list[_Bucket] = []
        by_len: dict[int, list[int]] = {}
        for idx, p in enumerate(prompt_set.prompts):
            by_len.setdefault(len(p), []).append(idx)
        for length in sorted(by_len):
            idxs = by_len[length]
            tokens = np.stack([prompt_set.prompts[k] for k in idxs])
            head = [length - 1] if positions == "last" else list(range(length))
            logits, boundaries = _forward_batch(
                model, tokens, base_plan, capture=True, head_positions=head
            )
            self.buckets.append(
                _Bucket(
                    prompt_indices=idxs,
                    tokens=tokens,
                    head_positions=head,
                    boundaries=boundaries,
                    base_probs=T.softmax(logits, axis=-1),
                )
            )

    def variant_probs(self, interventions) -> list[np.ndarray]:
        """Per-prompt next-token distributions under base + interventions,
        each of shape (P, V), ordered like the prompt set."""
        plan = resolve_interventions(
            self.model, list(self.base_interventions) + list(interventions)
        )
        out: list[np.ndarray | None] = [None] * len(self.prompt_set)
        start = _plan_delta_start(self.base_plan, plan, self.model.config.n_layers)
        for bucket in self.buckets:
            logits, _ = _forward_batch(
                self.model,
                bucket.tokens,
                plan,
                head_positions=bucket.head_positions,
                start_layer=start,
                initial_hidden=bucket.boundaries[start],
            )
            probs = T.softmax(logits, axis=-1)
            for row, prompt_idx in enumerate(bucket.prompt_indices):
                out[prompt_idx] = probs[row]
        return out

    def kl_against_baseline(self, interventions) -> np.ndarray:
        """Per-prompt mean KL(baseline || intervened) at the head positions."""
        variant = self.variant_probs(interventions)
        vals = np.empty(len(self.prompt_set), dtype=np.float64)
        for bucket in self.buckets:
            for row, prompt_idx in enumerate(bucket.prompt_indices):
                kl = _kl_rows(bucket.base_probs[row], variant[prompt_idx])
                vals[prompt_idx] = float(kl.mean())
        return vals


def _replacement_record(
    engine: _SweepEngine,
    i: int,
    j: int,
    thresholds: ClassifierThresholds,
    bootstrap: dict | None,
) -> PairDistanceRecord:
    try:
        kl_ij_prompts = engine.kl_against_baseline([Replace(i, j)])
        kl_ji_prompts = engine.kl_against_baseline([Replace(j, i)])
    except NonFiniteError as exc:
        return PairDistanceRecord(
            i=min(i, j), j=max(i, j), protocol="replacement",
            kl_ij=None, kl_ji=None, d_max=None, d_mean=None, d_geo=None,
            d_min=None, classification=None, flagged=True, flag_reason=str(exc),
        )
    if not (np.isfinite(kl_ij_prompts).all() and np.isfinite(kl_ji_prompts).all()):
        return PairDistanceRecord(
            i=min(i, j), j=max(i, j), protocol="replacement",
            kl_ij=None, kl_ji=None, d_max=None, d_mean=None, d_geo=None,
            d_min=None, classification=None, flagged=True,
            flag_reason="non-finite per-prompt KL",
        )
    if i > j:
        kl_ij_prompts, kl_ji_prompts = kl_ji_prompts, kl_ij_prompts
        i, j = j, i
    m_ij = float(kl_ij_prompts.mean())
    m_ji = float(kl_ji_prompts.mean())
    ci = None
    if bootstrap is not None:
        paired = np.stack([kl_ij_prompts, kl_ji_prompts], axis=1)
        res = bootstrap_ci(
            paired,
            statistic=lambda rows: max(float(rows[:, 0].mean()), float(rows[:, 1].mean())),
            **bootstrap,
        )
        ci = (res.lo, res.hi)
    return PairDistanceRecord(
        i=i, j=j, protocol="replacement",
        kl_ij=m_ij, kl_ji=m_ji,
        d_max=symmetrize(m_ij, m_ji, "max"),
        d_mean=symmetrize(m_ij, m_ji, "mean"),
        d_geo=symmetrize(m_ij, m_ji, "geometric"),
        d_min=symmetrize(m_ij, m_ji, "min"),
        classification=classify_pair(symmetrize(m_ij, m_ji, "max"), thresholds),
        ci=ci,
        per_prompt={"kl_ij": kl_ij_prompts, "kl_ji": kl_ji_prompts},
    )


def _interchange_record(
    engine: _SweepEngine,
    i: int,
    j: int,
    thresholds: ClassifierThresholds,
    bootstrap: dict | None,
) -> PairDistanceRecord:
    a, b = min(i, j), max(i, j)
    try:
        kl_swap = engine.kl_against_baseline([Interchange(a, b)])
    except NonFiniteError as exc:
        return PairDistanceRecord(
            i=a, j=b, protocol="interchange",
            kl_ij=None, kl_ji=None, d_max=None, d_mean=None, d_geo=None,
            d_min=None, classification=None, flagged=True, flag_reason=str(exc),
        )
    if not np.isfinite(kl_swap).all():
        return PairDistanceRecord(
            i=a, j=b, protocol="interchange",
            kl_ij=None, kl_ji=None, d_max=None, d_mean=None, d_geo=None,
            d_min=None, classification=None, flagged=True,
            flag_reason="non-finite per-prompt KL",
        )
    d = float(kl_swap.mean())
    ci = None
    if bootstrap is not None:
        res = bootstrap_ci(kl_swap, **bootstrap)
        ci = (res.lo, res.hi)
    return PairDistanceRecord(
        i=a, j=b, protocol="interchange",
        kl_ij=d, kl_ji=d, d_max=d, d_mean=d, d_geo=d, d_min=d,
        classification=classify_pair(d, thresholds),
        ci=ci,
        per_prompt={"kl_swap": kl_swap},
    )


def replacement_distance(
    model: Model,
    i: int,
    j: int,
    prompts: PromptSet,
    positions: str = "last",
    thresholds: ClassifierThresholds | None = None,
    bootstrap: dict | None = None,
) -> PairDistanceRecord:
    engine = _SweepEngine(model, prompts, positions)
    return _replacement_record(engine, i, j, thresholds or ClassifierThresholds(), bootstrap)


def interchange_distance(
    model: Model,
    i: int,
    j: int,
    prompts: PromptSet,
    positions: str = "last",
    thresholds: ClassifierThresholds | None = None,
    bootstrap: dict | None = None,
) -> PairDistanceRecord:
    engine = _SweepEngine(model, prompts, positions)
    return _interchange_record(engine, i, j, thresholds or ClassifierThresholds(), bootstrap)


def head_swap_distance(model: Model, i: int, j: int, head: int, prompts: PromptSet,
                       positions: str = "last") -> float:
    """Mean KL against the model with only head `head` of layer i taken from j."""
    engine = _SweepEngine(model, prompts, positions)
    return float(engine.kl_against_baseline([HeadReplace(i, j, head)]).mean())


def sweep_distances(
    model: Model,
    pair_filter: str,
    protocol: str,
    prompts: PromptSet,
    positions: str = "last",
    thresholds: ClassifierThresholds | None = None,
    bootstrap: dict | None = None,
    threads: int | None = None,
    engine: _SweepEngine | None = None,
) -> DistanceMatrix:
    """One PairDistanceRecord per filtered pair, baseline shared across pairs."""
    if protocol not in ("replacement", "interchange"):
        raise DomainError(f"protocol must be replacement|interchange, got {protocol!r}")
    thresholds = thresholds or ClassifierThresholds()
    pairs = pair_list(model.config.n_layers, pair_filter)
    if engine is None:
        engine = _SweepEngine(model, prompts, positions)
    make = _replacement_record if protocol == "replacement" else _interchange_record
    threads = default_thread_count() if threads is None else max(1, int(threads))
    if threads == 1:
        records = [make(engine, i, j, thresholds, bootstrap) for i, j in pairs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(make, engine, i, j, thresholds, bootstrap) for i, j in pairs]
            records = [f.result() for f in futures]  # merged in pair order
    strong, cond = _cumulative_counts(records, thresholds)
    return DistanceMatrix(
        model_id=model.config.model_id,
        protocol=protocol,
        pair_filter=pair_filter,
        prompt_provenance=prompts.provenance,
        records=records,
        strong_count=strong,
        conditional_count=cond,
    )


# ---------------------------------------------------------------------------
# protocol gap


@dataclass(frozen=True)
class RegimeConfig:
    divergent_cutoff: float = 0.5
    tied_lo: float = 0.8
    tied_hi: float = 1.25
    ratio_floor: float = RATIO_FLOOR

    def __post_init__(self):
        if not (0 < self.divergent_cutoff <= self.tied_lo <= self.tied_hi):
            raise DomainError("regime cutoffs must satisfy 0 < divergent <= tied_lo <= tied_hi")


@dataclass
class GapReport:
    pairs: list[dict]
    pooled: dict
    verdict: str
    evidence: dict
    regime: RegimeConfig
    thresholds: ClassifierThresholds

    def to_json_dict(self) -> dict:
        return {
            "pairs": self.pairs,
            "pooled": self.pooled,
            "verdict": self.verdict,
            "evidence": self.evidence,
            "regime": {
                "divergent_cutoff": self.regime.divergent_cutoff,
                "tied_band": [self.regime.tied_lo, self.regime.tied_hi],
                "ratio_floor": self.regime.ratio_floor,
            },
            "thresholds": {
                "strong": self.thresholds.strong,
                "conditional": self.thresholds.conditional,
            },
        }


def protocol_gap_report(
    repl: DistanceMatrix,
    inter: DistanceMatrix,
    thresholds: ClassifierThresholds | None = None,
    regime: RegimeConfig | None = None,
) -> GapReport:
    """Per-pair replacement-minus-interchange gaps plus a regime verdict.

    Verdict precedence: divergent, then tied, then weak-signal, then
    indeterminate. A fully degenerate input (every replacement distance
    below the ratio floor and all gaps at zero) counts as tied: the two
    protocols are indistinguishable there.
    """
    thresholds = thresholds or ClassifierThresholds()
    regime = regime or RegimeConfig()
    repl_pairs = [(r.i, r.j) for r in repl.records]
    inter_pairs = [(r.i, r.j) for r in inter.records]
    if repl_pairs != inter_pairs:
        raise DomainError(
            f"pair sets differ: {len(repl_pairs)} replacement vs {len(inter_pairs)} interchange"
        )
    rows: list[dict] = []
    gaps: list[float] = []
    ratios: list[float] = []
    d_repls: list[float] = []
    d_inters: list[float] = []
    for rr, ir in zip(repl.records, inter.records):
        row: dict = {"i": rr.i, "j": rr.j}
        if rr.flagged or ir.flagged:
            row.update(d_repl=None, d_inter=None, gap=None, ratio=None, flagged=True)
            rows.append(row)
            continue
        d_r, d_i = rr.distance, ir.distance
        gap = d_r - d_i
        ratio = (d_i / d_r) if d_r >= regime.ratio_floor else None
        row.update(d_repl=d_r, d_inter=d_i, gap=gap, ratio=ratio, flagged=False)
        rows.append(row)
        gaps.append(gap)
        d_repls.append(d_r)
        d_inters.append(d_i)
        if ratio is not None:
            ratios.append(ratio)

    pooled = {
        "n_pairs": len(rows),
        "n_finite": len(gaps),
        "n_ratio_defined": len(ratios),
        "gap_mean": float(np.mean(gaps)) if gaps else None,
        "gap_median": float(np.median(gaps)) if gaps else None,
        "gap_p75": float(np.percentile(gaps, 75)) if gaps else None,
        "gap_max": float(np.max(gaps)) if gaps else None,
        "ir_ratio_median": float(np.median(ratios)) if ratios else None,
        "d_repl_median": float(np.median(d_repls)) if d_repls else None,
        "d_inter_median": float(np.median(d_inters)) if d_inters else None,
    }

    ir = pooled["ir_ratio_median"]
    med_r = pooled["d_repl_median"]
    med_i = pooled["d_inter_median"]
    if ir is None:
        degenerate = bool(gaps) and all(abs(g) <= regime.ratio_floor for g in gaps)
        verdict = "tied" if degenerate else "indeterminate"
        why = "all ratios undefined; gaps all zero" if degenerate else "ratios undefined"
    elif ir < regime.divergent_cutoff and med_r is not None and med_r > thresholds.conditional:
        verdict, why = "divergent", "pooled I/R below cutoff with substantial replacement KL"
    elif regime.tied_lo <= ir <= regime.tied_hi:
        verdict, why = "tied", "pooled I/R inside the tied band"
    elif (
        med_r is not None and med_i is not None
        and med_r > thresholds.conditional and med_i > thresholds.conditional
    ):
        verdict, why = "weak-signal", "both protocols far from swappable on the median pair"
    else:
        verdict, why = "indeterminate", "no regime rule matched"

    evidence = {
        "ir_ratio_median": ir,
        "d_repl_median": med_r,
        "d_inter_median": med_i,
        "rule": why,
    }
    return GapReport(pairs=rows, pooled=pooled, verdict=verdict, evidence=evidence,
                     regime=regime, thresholds=thresholds)


# ---------------------------------------------------------------------------
# rotary counterfactual


@dataclass
class RopeCounterfactualReport:
    pairs: list[tuple[int, int]]
    normal: GapReport
    disabled: GapReport
    baseline_divergence: float
    ratio_deltas: list[float]  # normal minus disabled I/R per pair; NaN if undefined
    gap_deltas: list[float]    # disabled minus normal gap per pair; NaN if flagged

    def to_json_dict(self) -> dict:
        return {
            "pairs": [list(p) for p in self.pairs],
            "normal": self.normal.to_json_dict(),
            "disabled": self.disabled.to_json_dict(),
            "baseline_divergence": self.baseline_divergence,
            "ratio_deltas": self.ratio_deltas,
            "gap_deltas": self.gap_deltas,
        }


def rope_counterfactual(
    model: Model,
    pairs: list[tuple[int, int]],
    prompts: PromptSet,
    positions: str = "last",
    thresholds: ClassifierThresholds | None = None,
    regime: RegimeConfig | None = None,
    threads: int | None = None,
) -> RopeCounterfactualReport:
    """Protocol gaps with rotary position information on vs off.

    Distances in the disabled condition are measured against the RopeOff
    baseline, so each condition is internally consistent; the reported
    baseline divergence (mean KL normal vs disabled) quantifies how much
    the counterfactual changes the model outright. ratio_deltas are
    positive where the interchange advantage intensifies without rotary.
    """
    if model.config.pe_type != "rotary":
        raise DomainError(
            "rope counterfactual is undefined: model does not use rotary positions"
        )
    pairs = [(min(i, j), max(i, j)) for i, j in pairs]
    thresholds = thresholds or ClassifierThresholds()
    regime = regime or RegimeConfig()

    reports: dict[str, GapReport] = {}
    engines: dict[str, _SweepEngine] = {}
    for condition, base in (("normal", ()), ("disabled", (RopeOff(),))):
        engine = _SweepEngine(model, prompts, positions, base_interventions=base)
        engines[condition] = engine
        matrices = {}
        for protocol in ("replacement", "interchange"):
            matrices[protocol] = _matrix_over_pairs(
                model, engine, pairs, protocol, prompts, thresholds, threads
            )
        reports[condition] = protocol_gap_report(
            matrices["replacement"], matrices["interchange"], thresholds, regime
        )

    base_div = _baseline_divergence(engines["normal"], engines["disabled"])

    ratio_deltas: list[float] = []
    gap_deltas: list[float] = []
    for row_n, row_d in zip(reports["normal"].pairs, reports["disabled"].pairs):
        rn, rd = row_n["ratio"], row_d["ratio"]
        ratio_deltas.append(float(rn - rd) if rn is not None and rd is not None else float("nan"))
        gn, gd = row_n["gap"], row_d["gap"]
        gap_deltas.append(float(gd - gn) if gn is not None and gd is not None else float("nan"))

    return RopeCounterfactualReport(
        pairs=pairs,
        normal=reports["normal"],
        disabled=reports["disabled"],
        baseline_divergence=base_div,
        ratio_deltas=ratio_deltas,
        gap_deltas=gap_deltas,
    )


def _matrix_over_pairs(model, engine, pairs, protocol, prompts, thresholds, threads):
    make = _replacement_record if protocol == "replacement" else _interchange_record
    threads = default_thread_count() if threads is None else max(1, int(threads))
    if threads == 1:
        records = [make(engine, i, j, thresholds, None) for i, j in pairs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(make, engine, i, j, thresholds, None) for i, j in pairs]
            records = [f.result() for f in futures]
    strong, cond = _cumulative_counts(records, thresholds)
    return DistanceMatrix(
        model_id=model.config.model_id,
        protocol=protocol,
        pair_filter="explicit",
        prompt_provenance=prompts.provenance,
        records=records,
        strong_count=strong,
        conditional_count=cond,
    )


def _baseline_divergence(normal: _SweepEngine, disabled: _SweepEngine) -> float:
    vals = []
    for bn, bd in zip(normal.buckets, disabled.buckets):
        kl = _kl_rows(bn.base_probs, bd.base_probs)
        vals.append(kl.mean(axis=-1))
    return float(np.concatenate([np.atleast_1d(v) for v in vals]).mean())
