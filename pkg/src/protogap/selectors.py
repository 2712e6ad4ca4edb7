"""Turn scores into layer-removal sets.

Methods: the greedy score rule with spacing, representation proxies
(block influence, adjacent CKA), calibration-PPL SLEB in greedy and
iterative variants, uniform random controls, and beam search over
removal sets. Evaluator calls are metered by BudgetLedger so methods
can be compared head-to-head at a fixed call budget.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .evaluation import EvalContract, sliding_window_ppl
from .metrics import DistanceMatrix, default_thread_count
from .model import Delete, Model, forward

_REJECTION_CAP = 200_000


@dataclass
class SelectionResult:
    method: str
    n: int
    layers: tuple[int, ...]
    scores: list | None = None
    delta: int = 0
    evaluator_calls: int = 0
    ppl: float | None = None
    baseline_ppl: float | None = None
    delta_ppl_pct: float | None = None
    contract_id: str | None = None
    shortfall: bool = False
    ledger_budget: int | None = None
    ledger_consumed: int | None = None

    def to_json_dict(self) -> dict:
        ledger = None
        if self.ledger_budget is not None:
            ledger = {"budget": self.ledger_budget, "consumed": self.ledger_consumed}
        return {
            "method": self.method,
            "n": self.n,
            "layers": list(self.layers),
            "delta_ppl_pct": self.delta_ppl_pct,
            "ppl": self.ppl,
            "baseline_ppl": self.baseline_ppl,
            "contract_id": self.contract_id,
            "ledger": ledger,
        }


class BudgetLedger:
    """Append-only meter of full-evaluator PPL calls, capped at `budget`.

    charge() reserves a slot BEFORE the call runs and refuses once the
    budget is consumed; record() fills in the measured value afterwards.
    budget=None means unmetered.
    """

    def __init__(self, budget: int | None):
        if budget is not None and budget < 0:
            raise DomainError(f"budget must be >= 0, got {budget}")
        self.budget = budget
        self._consumed = 0
        self._log: list[dict] = []
        self._lock = threading.Lock()

    @property
    def consumed(self) -> int:
        return self._consumed

    @property
    def entries(self) -> tuple[dict, ...]:
        with self._lock:
            return tuple(dict(e) for e in self._log)

    def charge(self, step: str, candidate) -> int | None:
        """Reserve one call; returns a log token, or None when exhausted."""
        with self._lock:
            if self.budget is not None and self._consumed >= self.budget:
                return None
            self._consumed += 1
            self._log.append({"step": step, "candidate": tuple(candidate), "ppl": None})
            return len(self._log) - 1

    def record(self, token: int, ppl: float) -> None:
        with self._lock:
            self._log[token]["ppl"] = float(ppl)


def _default_ppl_fn(model, corpus, contract, interventions):
    return sliding_window_ppl(model, corpus, contract, interventions).ppl


# -- score-based selection ----------------------------------------------

def layer_scores_from_pairs(
    matrix: DistanceMatrix, mode: str = "min_neighbor", n_layers: int | None = None
) -> np.ndarray:
    """s(i) = min distance to a valid partner (adjacent only in min_neighbor)."""
    if mode not in ("min_neighbor", "min_any"):
        raise DomainError(f"unknown scoring mode {mode!r}")
    records = [r for r in matrix.records if not r.flagged]
    if not records:
        raise DomainError("matrix has no usable records")
    if n_layers is None:
        n_layers = max(r.j for r in matrix.records) + 1
    best = [None] * n_layers
    for r in records:
        if mode == "min_neighbor" and r.j - r.i != 1:
            continue
        for layer in (r.i, r.j):
            if best[layer] is None or r.distance < best[layer]:
                best[layer] = r.distance
    for i, v in enumerate(best):
        if v is None:
            raise DomainError(f"layer {i} appears in no usable pair")
    return np.array(best, dtype=np.float64)


def greedy_select(scores, n: int, delta: int = 0, method: str = "greedy") -> SelectionResult:
    """Ascending-score scan; accept i iff |i - k| > delta for all accepted k.

    Ties break toward the lower layer index. Runs until n layers are
    accepted or candidates are exhausted (then shortfall is flagged).
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or len(s) == 0:
        raise DomainError("scores must be a nonempty 1-D vector")
    if n < 0 or delta < 0:
        raise DomainError("n and delta must be >= 0")
    order = sorted(range(len(s)), key=lambda i: (s[i], i))
    accepted: list[int] = []
    for i in order:
        if len(accepted) == n:
            break
        if all(abs(i - k) > delta for k in accepted):
            accepted.append(i)
    return SelectionResult(
        method=method,
        n=n,
        layers=tuple(sorted(accepted)),
        scores=[float(v) for v in s],
        delta=delta,
        shortfall=len(accepted) < n,
    )


def random_select(n_layers: int, n: int, delta: int = 0, seed: int = 42) -> SelectionResult:
    """Uniform draw over delta-respecting removal sets, by rejection."""
    if n < 0 or delta < 0 or n_layers < 1:
        raise DomainError("need n_layers >= 1 and n, delta >= 0")
    feasible_max = (n_layers + delta) // (delta + 1)
    if n > feasible_max:
        raise DomainError(
            f"no {n}-layer set with spacing > {delta} exists in {n_layers} layers "
            f"(max {feasible_max})"
        )
    rng = np.random.default_rng(seed)
    layers: tuple[int, ...] = ()
    if n > 0:
        for _ in range(_REJECTION_CAP):
            cand = np.sort(rng.choice(n_layers, size=n, replace=False))
            if n == 1 or int(np.diff(cand).min()) > delta:
                layers = tuple(int(v) for v in cand)
                break
        else:
            raise DomainError("rejection sampling failed to find a valid set")
    return SelectionResult(method="random", n=n, layers=layers, delta=delta)


# -- representation proxies ----------------------------------------------

def block_influence(h_in: np.ndarray, h_out: np.ndarray):
    """(sum of 1 - cos, positions used, zero-norm positions excluded)."""
    a = np.asarray(h_in, dtype=np.float64).reshape(-1, h_in.shape[-1])
    b = np.asarray(h_out, dtype=np.float64).reshape(-1, h_out.shape[-1])
    if a.shape != b.shape:
        raise DomainError(f"boundary shapes differ: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    cos = np.einsum("nd,nd->n", a[ok], b[ok]) / (na[ok] * nb[ok])
    return float(np.sum(1.0 - cos)), int(ok.sum()), int((~ok).sum())


@dataclass
class ProxyScores:
    method: str
    scores: list
    excluded_positions: int = 0
    flagged_layers: tuple[int, ...] = ()


def bi_scores(model: Model, prompts) -> ProxyScores:
    """Mean 1 - cos(block input, block output); low = removable."""
    L = model.config.n_layers
    sums = np.zeros(L)
    counts = np.zeros(L, dtype=np.int64)
    excluded = 0
    for prompt in prompts:
        res = forward(model, prompt, capture=True)
        for i in range(L):
            s, c, ex = block_influence(res.hidden[i], res.hidden[i + 1])
            sums[i] += s
            counts[i] += c
            excluded += ex
    if (counts == 0).any():
        raise DomainError("a block had no usable positions (all zero-norm)")
    return ProxyScores(
        method="bi", scores=[float(v) for v in sums / counts],
        excluded_positions=excluded,
    )


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear-kernel CKA with the unbiased HSIC estimator; needs n >= 4."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise DomainError(f"CKA needs matching (n, d) matrices, got {x.shape} vs {y.shape}")
    n = x.shape[0]
    if n < 4:
        raise DomainError(f"unbiased CKA needs >= 4 samples, got {n}")

    def hsic(k: np.ndarray, l: np.ndarray) -> float:
        k = k.copy()
        l = l.copy()
        np.fill_diagonal(k, 0.0)
        np.fill_diagonal(l, 0.0)
        ks = k.sum()
        ls = l.sum()
        term1 = float(np.sum(k * l))
        term2 = ks * ls / ((n - 1) * (n - 2))
        term3 = 2.0 / (n - 2) * float(k.sum(axis=0) @ l.sum(axis=0))
        return (term1 + term2 - term3) / (n * (n - 3))

    kx = x @ x.T
    ky = y @ y.T
    hxx = hsic(kx, kx)
    hyy = hsic(ky, ky)
    # constant representations give an exactly-zero self term in algebra;
    # in floats it shows up as rounding noise relative to the Gram scale
    tol_x = 1e-10 * float(np.abs(kx).max()) ** 2
    tol_y = 1e-10 * float(np.abs(ky).max()) ** 2
    if hxx <= tol_x or hyy <= tol_y:
        raise DomainError("degenerate representation: HSIC self-term is not positive")
    return hsic(kx, ky) / np.sqrt(hxx * hyy)


def cka_scores(model: Model, prompts, *, max_positions: int = 2048) -> ProxyScores:
    """Adjacent-layer linear CKA; a layer scores the max of its two
    adjacent similarities (high = redundant = removable)."""
    L = model.config.n_layers
    if L < 2:
        raise DomainError("adjacent CKA needs at least 2 layers")
    pooled: list[np.ndarray] = [[] for _ in range(L)]
    budget = max_positions
    for prompt in prompts:
        if budget <= 0:
            break
        res = forward(model, prompt, capture=True)
        take = min(budget, len(prompt))
        for i in range(L):
            pooled[i].append(np.asarray(res.hidden[i + 1][:take], dtype=np.float64))
        budget -= take
    reps = [np.concatenate(chunks, axis=0) for chunks in pooled]

    adjacent: list[float | None] = []
    flagged: set[int] = set()
    for i in range(L - 1):
        try:
            adjacent.append(linear_cka(reps[i], reps[i + 1]))
        except DomainError:
            adjacent.append(None)
            flagged.update((i, i + 1))
    scores: list[float | None] = []
    for i in range(L):
        cands = [c for c in (adjacent[i - 1] if i > 0 else None,
                             adjacent[i] if i < L - 1 else None) if c is not None]
        scores.append(max(cands) if cands else None)
        if not cands:
            flagged.add(i)
    return ProxyScores(
        method="cka", scores=scores, flagged_layers=tuple(sorted(flagged))
    )


# -- calibration-PPL methods ----------------------------------------------

def _charge_then_eval(ledger, step, candidates, eval_one, threads):
    """Charge sequentially (deterministic refusal point), then evaluate.

    Returns ([(candidate, ppl), ...] in candidate order, exhausted_flag).
    """
    charged = []
    exhausted = False
    for cand in candidates:
        token = ledger.charge(step, cand)
        if token is None:
            exhausted = True
            break
        charged.append((cand, token))
    if threads > 1 and len(charged) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(eval_one, cand) for cand, _ in charged]
            values = [f.result() for f in futures]
    else:
        values = [eval_one(cand) for cand, _ in charged]
    out = []
    for (cand, token), ppl in zip(charged, values):
        ledger.record(token, ppl)
        out.append((cand, ppl))
    return out, exhausted


def sleb_select(
    model: Model,
    n: int,
    calibration,
    contract: EvalContract,
    variant: str = "greedy",
    ledger: BudgetLedger | None = None,
    *,
    ppl_fn=None,
    threads: int | None = None,
) -> SelectionResult:
    """Calibration-perplexity layer elimination.

    greedy scores every single-layer removal once and keeps the best n;
    iterative re-scores the remainder after each committed removal. Runs
    n*L - n*(n-1)/2 evaluator calls in the iterative variant.
    """
    if variant not in ("greedy", "iterative"):
        raise DomainError(f"unknown SLEB variant {variant!r}")
    L = model.config.n_layers
    if not (0 <= n <= L):
        raise DomainError(f"n must be in [0, {L}], got {n}")
    ledger = ledger if ledger is not None else BudgetLedger(None)
    ppl_fn = ppl_fn or _default_ppl_fn
    threads = default_thread_count() if threads is None else threads
    method = f"sleb-{variant}"

    def eval_removal(layers):
        return ppl_fn(model, calibration, contract, (Delete(set(layers)),))

    if variant == "greedy":
        cands = [(i,) for i in range(L)]
        scored, exhausted = _charge_then_eval(
            ledger, f"{method}:score", cands, eval_removal, threads
        )
        ranked = sorted(scored, key=lambda cp: (cp[1], cp[0]))
        chosen = tuple(sorted(c[0][0] for c in ranked[:n]))
        trace = [None] * L
        for (layer,), ppl in scored:
            trace[layer] = ppl
        return SelectionResult(
            method=method, n=n, layers=chosen, scores=trace,
            evaluator_calls=ledger.consumed, contract_id=contract.contract_id,
            shortfall=exhausted or len(chosen) < n,
            ledger_budget=ledger.budget, ledger_consumed=ledger.consumed,
        )

    removed: list[int] = []
    exhausted = False
    for _ in range(n):
        cands = [tuple(sorted(removed + [i])) for i in range(L) if i not in removed]
        scored, exhausted = _charge_then_eval(
            ledger, f"{method}:step{len(removed)}", cands, eval_removal, threads
        )
        if exhausted or not scored:
            break
        best_set, _ = min(scored, key=lambda cp: (cp[1], cp[0]))
        removed = list(best_set)
    return SelectionResult(
        method=method, n=n, layers=tuple(sorted(removed)),
        evaluator_calls=ledger.consumed, contract_id=contract.contract_id,
        shortfall=exhausted or len(removed) < n,
        ledger_budget=ledger.budget, ledger_consumed=ledger.consumed,
    )


def beam_select(
    model: Model,
    interchange_matrix: DistanceMatrix,
    calibration,
    contract: EvalContract,
    ledger: BudgetLedger,
    n_max: int,
    width: int = 3,
    seed_candidates: int | None = None,
    *,
    ppl_fn=None,
    threads: int | None = None,
) -> list[SelectionResult]:
    """Beam search over removal sets, seeded by interchange layer scores.

    Each step expands every beam by every absent layer, scores unseen
    sets with the oracle contract (cache hits are free), and prunes to
    `width` by PPL. Returns the best set per size for every size that
    finished before the ledger ran out.
    """
    if width < 1:
        raise DomainError(f"beam width must be >= 1, got {width}")
    L = model.config.n_layers
    if not (1 <= n_max < L):
        raise DomainError(f"n_max must be in [1, {L - 1}], got {n_max}")
    seed_candidates = width if seed_candidates is None else seed_candidates
    ppl_fn = ppl_fn or _default_ppl_fn
    threads = default_thread_count() if threads is None else threads

    scores = layer_scores_from_pairs(interchange_matrix, "min_neighbor", n_layers=L)
    order = sorted(range(L), key=lambda i: (scores[i], i))
    seeds = [(i,) for i in order[:seed_candidates]]

    def eval_removal(layers):
        return ppl_fn(model, calibration, contract, (Delete(set(layers)),))

    cache: dict[tuple[int, ...], float] = {}
    beams: list[tuple[int, ...]] = []
    results: list[SelectionResult] = []
    frontier = seeds
    for size in range(1, n_max + 1):
        new = [c for c in frontier if c not in cache]
        scored, exhausted = _charge_then_eval(
            ledger, f"beam:size{size}", new, eval_removal, threads
        )
        for cand, ppl in scored:
            cache[cand] = ppl
        if exhausted:
            break
        pool = [(cache[c], c) for c in frontier if c in cache]
        pool.sort(key=lambda pc: (pc[0], pc[1]))
        beams = [c for _, c in pool[:width]]
        best_ppl, best = pool[0]
        results.append(SelectionResult(
            method="interchange-beam", n=size, layers=best,
            evaluator_calls=ledger.consumed, ppl=best_ppl,
            contract_id=contract.contract_id,
            ledger_budget=ledger.budget, ledger_consumed=ledger.consumed,
        ))
        if size == n_max:
            break
        expansions = set()
        for beam in beams:
            for j in range(L):
                if j not in beam:
                    expansions.add(tuple(sorted(beam + (j,))))
        frontier = sorted(expansions)
    return results


def budget_sweep(
    methods: dict,
    budgets,
    model: Model,
    corpus,
    oracle_contract: EvalContract,
    eval_contract: EvalContract | None = None,
    *,
    ppl_fn=None,
) -> list[dict]:
    """Head-to-head rows of (method, budget) -> selection quality.

    `methods` maps a name to fn(ledger) -> SelectionResult or a list of
    them (the last entry is taken). Final PPL and delta are measured
    once per row on `eval_contract` (defaults to the oracle contract)
    and are NOT charged: the ledger meters selection, not reporting.
    """
    eval_contract = eval_contract or oracle_contract
    ppl_fn = ppl_fn or _default_ppl_fn
    baseline = ppl_fn(model, corpus, eval_contract, ())
    rows = []
    for budget in budgets:
        for name, fn in methods.items():
            ledger = BudgetLedger(budget)
            res = fn(ledger)
            if isinstance(res, list):
                res = res[-1] if res else SelectionResult(
                    method=name, n=0, layers=(), shortfall=True
                )
            if res.layers:
                final = ppl_fn(model, corpus, eval_contract, (Delete(set(res.layers)),))
            else:
                final = baseline
            rows.append({
                "method": name,
                "budget": budget,
                "evals_used": ledger.consumed,
                "n_removed": len(res.layers),
                "layers": list(res.layers),
                "ppl": final,
                "baseline_ppl": baseline,
                "delta_ppl_pct": (final / baseline - 1.0) * 100.0,
                "shortfall": res.shortfall,
            })
    return rows
