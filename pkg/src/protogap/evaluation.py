"""Matched-contract sliding-window perplexity and intervention evaluation.

A contract pins (corpus, budget, window, stride, precision, scoring) and
hashes to an id; deltas are only defined between reports sharing the id.
The statistics layer (bootstrap, rank correlation, sign test) lives in
stats.py and is re-exported here for callers that think of it as part of
the evaluator.
"""

from __future__ import annotations

import hashlib
import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .container import TokenCorpus
from .errors import ContractError, DomainError
from .metrics import default_thread_count, sweep_distances
from .model import Model, _forward_batch, resolve_interventions
from .stats import (  # noqa: F401  (re-exported statistics layer)
    CIResult,
    SignTestResult,
    bootstrap_ci,
    rank_correlation,
    sign_test,
)

# fields that feed the contract hash; name is kept outside so renaming a
# contract is visible while silent parameter drift is not possible
CONTRACT_HASH_FIELDS = ("corpus_id", "window", "stride", "token_budget", "precision", "scoring")

_TEMPLATE_RE = re.compile(r"w(\d+)s(\d+)")


@dataclass(frozen=True)
class EvalContract:
    name: str
    corpus_id: str
    window: int
    stride: int
    token_budget: int | None = None
    precision: str = "fp32"
    scoring: str = "sliding"

    def __post_init__(self):
        if not self.name:
            raise ContractError("contract needs a non-empty name")
        if self.window < 2:
            raise ContractError(f"window must be >= 2, got {self.window}")
        if not (0 < self.stride <= self.window):
            raise ContractError(
                f"stride must satisfy 0 < stride <= window, got {self.stride}/{self.window}"
            )
        if self.token_budget is not None and self.token_budget < self.window:
            raise ContractError(
                f"token budget {self.token_budget} is below the window {self.window}"
            )
        if self.scoring != "sliding":
            raise ContractError(f"unknown scoring rule {self.scoring!r}")

    @property
    def contract_id(self) -> str:
        blob = json.dumps(
            {f: getattr(self, f) for f in CONTRACT_HASH_FIELDS},
            sort_keys=True, separators=(",", ":"),
        )
        return f"{self.name}:{hashlib.sha1(blob.encode('utf-8')).hexdigest()[:12]}"


def contract_from_template(template: str, corpus_id: str,
                           token_budget: int | None = None) -> EvalContract:
    """Build a contract from the inline "w<window>s<stride>" shorthand."""
    m = _TEMPLATE_RE.fullmatch(template)
    if m is None:
        raise ContractError(f"cannot parse contract template {template!r}")
    return EvalContract(
        name=template, corpus_id=corpus_id,
        window=int(m.group(1)), stride=int(m.group(2)), token_budget=token_budget,
    )


def load_contracts(path) -> dict[str, EvalContract]:
    """Read a JSON object mapping contract names to their field dicts."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ContractError(f"contract file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ContractError("contract file must be a JSON object of name -> fields")
    out = {}
    allowed = set(CONTRACT_HASH_FIELDS)
    for name, fields in data.items():
        if not isinstance(fields, dict):
            raise ContractError(f"contract {name!r} must map to an object")
        unknown = set(fields) - allowed
        if unknown:
            raise ContractError(f"contract {name!r} has unknown fields {sorted(unknown)}")
        try:
            out[name] = EvalContract(name=name, **fields)
        except TypeError as exc:
            raise ContractError(f"contract {name!r} is missing fields: {exc}") from exc
    return out


@dataclass(frozen=True)
class WindowSpec:
    """One scoring window: tokens [offset, offset+window) predict the
    absolute corpus positions [target_lo, target_hi)."""
    offset: int
    target_lo: int
    target_hi: int

    @property
    def n_scored(self) -> int:
        return self.target_hi - self.target_lo


def window_plan(n_tokens: int, window: int, stride: int):
    """Enumerate scoring windows; returns (specs, skipped, has_partial).

    Full windows start at multiples of stride; each scores only positions
    no earlier window scored. When stride == window each later window's
    first token has no context and is skipped (counted, never scored).
    A trailing partial window covers leftover tokens with full context.
    """
    if n_tokens < window:
        raise ContractError(f"corpus has {n_tokens} tokens, below the window {window}")
    specs = []
    scored_upto = 1  # position 0 has no context under any contract
    skipped = 0
    for o in range(0, n_tokens - window + 1, stride):
        lo = max(scored_upto, o + 1)
        skipped += lo - scored_upto
        specs.append(WindowSpec(offset=o, target_lo=lo, target_hi=o + window))
        scored_upto = o + window
    has_partial = scored_upto < n_tokens
    if has_partial:
        o = n_tokens - window
        specs.append(WindowSpec(offset=o, target_lo=max(scored_upto, o + 1),
                                target_hi=n_tokens))
    return specs, skipped, has_partial


@dataclass
class PplReport:
    contract_id: str
    ppl: float
    window_nlls: list[float] = field(repr=False)
    window_tokens: list[int] = field(repr=False)
    scored_tokens: int
    skipped_tokens: int
    partial_window: bool
    ci: tuple[float, float] | None = None
    degenerate_ci: bool = False

    @property
    def n_windows(self) -> int:
        return len(self.window_nlls)

    def to_json_dict(self) -> dict:
        return {
            "contract_id": self.contract_id,
            "ppl": self.ppl,
            "windows": self.n_windows,
            "scored_tokens": self.scored_tokens,
            "ci": list(self.ci) if self.ci is not None else None,
        }


def _window_nll(model: Model, ids: np.ndarray, plan, spec: WindowSpec):
    """Mean NLL over the window's scored targets, in float64."""
    tokens = ids[spec.offset:spec.target_hi]
    heads = list(range(spec.target_lo - 1 - spec.offset, spec.target_hi - 1 - spec.offset))
    logits, _ = _forward_batch(model, tokens[None, :], plan, head_positions=heads)
    rows = logits[0].astype(np.float64)
    targets = ids[spec.target_lo:spec.target_hi]
    peak = rows.max(axis=-1, keepdims=True)
    lse = peak[:, 0] + np.log(np.exp(rows - peak).sum(axis=-1))
    nll = lse - rows[np.arange(len(targets)), targets]
    return float(nll.mean()), len(targets)


def sliding_window_ppl(
    model: Model,
    corpus: TokenCorpus,
    contract: EvalContract,
    interventions=(),
    *,
    bootstrap: dict | None = None,
    threads: int | None = None,
) -> PplReport:
    """Token-weighted perplexity of the (possibly edited) model under a contract."""
    if corpus.corpus_id != contract.corpus_id:
        raise ContractError(
            f"contract pins corpus {contract.corpus_id!r}, got {corpus.corpus_id!r}"
        )
    ids = np.asarray(corpus.ids, dtype=np.int64)
    if contract.token_budget is not None:
        if len(ids) < contract.token_budget:
            raise ContractError(
                f"contract budget is {contract.token_budget} tokens, "
                f"corpus has only {len(ids)}"
            )
        ids = ids[:contract.token_budget]
    if ids.size and int(ids.max()) >= model.config.vocab_size:
        raise DomainError("corpus contains ids outside the model vocabulary")
    specs, skipped, has_partial = window_plan(len(ids), contract.window, contract.stride)
    plan = resolve_interventions(model, interventions)

    threads = default_thread_count() if threads is None else threads
    if threads > 1 and len(specs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_window_nll, model, ids, plan, s) for s in specs]
            results = [f.result() for f in futures]
    else:
        results = [_window_nll(model, ids, plan, s) for s in specs]

    window_nlls = [r[0] for r in results]
    window_tokens = [r[1] for r in results]
    total = sum(window_tokens)
    mean_nll = float(np.average(window_nlls, weights=window_tokens))
    ppl = float(np.exp(mean_nll))

    ci = None
    degenerate = False
    if bootstrap is not None:
        if len(window_nlls) < 2:
            ci = (ppl, ppl)
            degenerate = True
        else:
            rows = np.column_stack([window_nlls, window_tokens])
            stat = lambda r: float(np.exp(np.average(r[:, 0], weights=r[:, 1])))
            res = bootstrap_ci(rows, stat, **bootstrap)
            # percentile intervals can narrowly miss the point estimate;
            # the report promises containment, so widen to include it
            ci = (min(res.lo, ppl), max(res.hi, ppl))
    return PplReport(
        contract_id=contract.contract_id,
        ppl=ppl,
        window_nlls=window_nlls,
        window_tokens=window_tokens,
        scored_tokens=total,
        skipped_tokens=skipped,
        partial_window=has_partial,
        ci=ci,
        degenerate_ci=degenerate,
    )


def evaluate_intervention(
    model: Model,
    corpus: TokenCorpus,
    interventions,
    contract: EvalContract,
    baseline: PplReport,
    *,
    bootstrap: dict | None = None,
    threads: int | None = None,
) -> tuple[PplReport, float]:
    """Edited-model PPL plus ΔPPL% against a baseline under the SAME contract."""
    if baseline.contract_id != contract.contract_id:
        raise ContractError(
            f"baseline was measured under {baseline.contract_id}, "
            f"refusing to compare against {contract.contract_id}"
        )
    report = sliding_window_ppl(
        model, corpus, contract, interventions, bootstrap=bootstrap, threads=threads
    )
    delta = (report.ppl / baseline.ppl - 1.0) * 100.0
    return report, delta


def _subset_distance(record, idx: np.ndarray) -> float:
    pp = record.per_prompt
    if "kl_swap" in pp:
        return float(np.mean(np.asarray(pp["kl_swap"])[idx]))
    ij = float(np.mean(np.asarray(pp["kl_ij"])[idx]))
    ji = float(np.mean(np.asarray(pp["kl_ji"])[idx]))
    return max(ij, ji)


def prompt_stability(
    model: Model,
    pair_filter: str,
    protocol: str,
    prompts,
    subset_sizes,
    *,
    seed: int = 42,
    top_k: int = 3,
    thresholds=None,
    threads: int | None = None,
) -> list[dict]:
    """How stable is the pair ranking when scored on fewer prompts?

    The full sweep stores per-prompt KLs, so each seeded subset ranking is
    an exact re-aggregation, not a re-run. One row per requested size.
    """
    sizes = list(subset_sizes)
    if not sizes:
        raise DomainError("need at least one subset size")
    if any(s < 2 for s in sizes):
        raise DomainError("subset sizes must be >= 2")
    if max(sizes) > len(prompts):
        raise DomainError(
            f"largest subset size {max(sizes)} exceeds the {len(prompts)} prompts"
        )
    matrix = sweep_distances(
        model, pair_filter, protocol, prompts,
        thresholds=thresholds, threads=threads,
    )
    records = [r for r in matrix.records if not r.flagged]
    if len(records) < 2:
        raise DomainError("stability needs at least two unflagged pairs")
    full = np.array([r.d_max for r in records])
    k = min(top_k, len(records))
    full_top = set(np.argsort(-full, kind="stable")[:k])

    rows = []
    for size in sizes:
        rng = np.random.default_rng([seed, size])
        idx = rng.choice(len(prompts), size=size, replace=False)
        sub = np.array([_subset_distance(r, idx) for r in records])
        with np.errstate(invalid="ignore"):
            rel = np.abs(sub - full) / np.where(full > 0, full, np.nan)
        finite = rel[np.isfinite(rel)]
        sub_top = set(np.argsort(-sub, kind="stable")[:k])
        rows.append({
            "size": int(size),
            "spearman": rank_correlation(full, sub, "spearman"),
            "kendall": rank_correlation(full, sub, "kendall"),
            "top_k": k,
            "top_k_overlap": len(full_top & sub_top),
            "max_rel_deviation": float(finite.max()) if finite.size else None,
        })
    return rows
