"""Command-line surface: one subcommand per measurement pipeline.

Every run writes its artifacts under <out>/<run-id>/ next to a
manifest, and the exit code is a stable contract:

    0  success
    1  any other failure (I/O, bad domain values, ...)
    2  usage error (unknown flag, bad enum value, missing argument)
    3  evaluation contract mismatch
    4  non-finite numerics; the flagged pairs are listed on stderr
"""

from __future__ import annotations

import argparse
import hashlib
import json
import re
import sys
from pathlib import Path

from . import __version__
from .container import read_corpus
from .errors import ContractError, NonFiniteError, ProtogapError
from .evaluation import (
    EvalContract,
    contract_from_template,
    evaluate_intervention,
    load_contracts,
    prompt_stability,
    sliding_window_ppl,
)
from .jacobian import residual_jacobian_norms
from .metrics import (
    pair_list,
    prompts_from_corpus,
    protocol_gap_report,
    rope_counterfactual,
    sweep_distances,
)
from .model import Delete, load_checkpoint
from .reporting import (
    RunWriter,
    adjacent_profile_plotdata,
    gap_vs_depth_plotdata,
    heatmap_plotdata,
    sanitize_nonfinite,
)
from .selectors import (
    BudgetLedger,
    beam_select,
    bi_scores,
    budget_sweep,
    cka_scores,
    greedy_select,
    layer_scores_from_pairs,
    random_select,
    sleb_select,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONTRACT = 3
EXIT_NONFINITE = 4

RANDOM_BASELINE_SEEDS = tuple(range(10))

PRUNE_METHODS = (
    "greedy-replacement",
    "greedy-interchange",
    "bi",
    "cka",
    "random",
    "sleb-greedy",
    "sleb-iterative",
    "beam",
)


class _UsageError(Exception):
    """Flag combinations argparse cannot express; maps to exit 2."""


def _pair_filter(value: str) -> str:
    if value in ("all", "adjacent") or re.fullmatch(r"gap:[0-9]+", value):
        return value
    raise argparse.ArgumentTypeError(
        f"expected all, adjacent, or gap:<k>, got {value!r}"
    )


def _int_list(value: str) -> list[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}")


# -- parser ---------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", default="runs", help="root directory for run artifacts")
    p.add_argument("--run-id", default=None, help="run directory name (default: derived)")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: PROTOGAP_THREADS or 1)")


def _add_data_flags(p: argparse.ArgumentParser, *, many_checkpoints: bool = False) -> None:
    if many_checkpoints:
        p.add_argument("--checkpoint", required=True, nargs="+",
                       help="checkpoint container files, in order")
    else:
        p.add_argument("--checkpoint", required=True, help="checkpoint container file")
    p.add_argument("--corpus", required=True, help="token corpus file")


def _add_prompt_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--prompts", type=int, default=8, help="number of probe prompts")
    p.add_argument("--prompt-len", type=int, default=16, help="tokens per prompt")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protogap",
        description="Layer-equivalence distances, pruning, and diagnostics.",
    )
    parser.add_argument("--version", action="version", version=f"protogap {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("distances", help="pairwise layer distances under a protocol")
    _add_data_flags(p)
    _add_prompt_flags(p)
    p.add_argument("--pairs", type=_pair_filter, default="all")
    p.add_argument("--protocol", choices=("replacement", "interchange", "both"),
                   default="both")
    p.add_argument("--positions", choices=("last", "all"), default="last")
    _add_run_flags(p)

    p = sub.add_parser("diagnose", help="protocol gap regime verdict on adjacent pairs")
    _add_data_flags(p)
    _add_prompt_flags(p)
    p.add_argument("--pairs", type=_pair_filter, default="adjacent")
    p.add_argument("--positions", choices=("last", "all"), default="last")
    _add_run_flags(p)

    p = sub.add_parser("prune", help="pick a layer-removal set")
    _add_data_flags(p)
    _add_prompt_flags(p)
    p.add_argument("--method", choices=PRUNE_METHODS, required=True)
    p.add_argument("--n", type=int, required=True, help="layers to remove")
    p.add_argument("--delta", type=int, default=0, help="min index spacing between removals")
    p.add_argument("--budget", type=int, default=None, help="evaluator-call cap")
    p.add_argument("--width", type=int, default=3, help="beam width")
    p.add_argument("--contract", default=None,
                   help="evaluation contract (w<window>s<stride> template, file, or file:name)")
    _add_run_flags(p)

    p = sub.add_parser("evaluate", help="perplexity under a contract, optionally edited")
    _add_data_flags(p)
    p.add_argument("--contract", required=True)
    p.add_argument("--layers", type=_int_list, default=None, help="layers to delete, e.g. 1,3")
    p.add_argument("--selection", default=None, help="selection.json from a prune run")
    p.add_argument("--bootstrap", type=int, default=0,
                   help="bootstrap resamples for a PPL confidence interval (0 = off)")
    _add_run_flags(p)

    p = sub.add_parser("jacobian", help="residual-block Jacobian norms per layer")
    _add_data_flags(p)
    _add_prompt_flags(p)
    p.add_argument("--layers", type=_int_list, default=None)
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--epsilon", type=float, default=1e-3)
    _add_run_flags(p)

    p = sub.add_parser("stability", help="pair-ranking stability under prompt subsets")
    _add_data_flags(p)
    _add_prompt_flags(p)
    p.add_argument("--pairs", type=_pair_filter, default="adjacent")
    p.add_argument("--protocol", choices=("replacement", "interchange"),
                   default="interchange")
    p.add_argument("--sizes", type=_int_list, required=True,
                   help="prompt subset sizes, e.g. 2,4,8")
    p.add_argument("--top-k", type=int, default=3)
    _add_run_flags(p)

    p = sub.add_parser("counterfactual",
                       help="protocol gap with rotary positions on vs off")
    _add_data_flags(p)
    _add_prompt_flags(p)
    p.add_argument("--pairs", type=_pair_filter, default="adjacent")
    p.add_argument("--positions", choices=("last", "all"), default="last")
    _add_run_flags(p)

    p = sub.add_parser("budget-sweep", help="selection methods head-to-head per call budget")
    _add_data_flags(p)
    _add_prompt_flags(p)
    p.add_argument("--contract", required=True)
    p.add_argument("--methods", default="sleb-greedy,sleb-iterative,beam",
                   help="comma list from sleb-greedy, sleb-iterative, beam")
    p.add_argument("--budgets", type=_int_list, required=True, help="e.g. 50,100,200")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--width", type=int, default=3)
    _add_run_flags(p)

    p = sub.add_parser("trajectory", help="gap statistics across a checkpoint sequence")
    _add_data_flags(p, many_checkpoints=True)
    _add_prompt_flags(p)
    p.add_argument("--pairs", type=_pair_filter, default="adjacent")
    p.add_argument("--positions", choices=("last", "all"), default="last")
    _add_run_flags(p)

    return parser


# -- shared plumbing ------------------------------------------------------


def _run_writer(args, argv) -> RunWriter:
    run_id = args.run_id
    if run_id is None:
        digest = hashlib.sha1(" ".join(argv).encode("utf-8")).hexdigest()[:10]
        run_id = f"{args.command}-{digest}"
    return RunWriter(args.out, run_id, args.command, argv, __version__)


def _load_model(path, writer: RunWriter):
    model = load_checkpoint(path)
    writer.note_checkpoint(path, model.payload_hash())
    return model


def _prompt_set(args, corpus):
    return prompts_from_corpus(corpus, args.prompts, args.prompt_len)


_TEMPLATE = re.compile(r"w[0-9]+s[0-9]+")


def _resolve_contract(spec: str, corpus) -> EvalContract:
    """Accept the inline template, a single-contract file, or file:name."""
    if _TEMPLATE.fullmatch(spec):
        return contract_from_template(spec, corpus.corpus_id)
    path, name = Path(spec), None
    if not path.is_file() and ":" in spec:
        head, _, tail = spec.rpartition(":")
        if Path(head).is_file():
            path, name = Path(head), tail
    if not path.is_file():
        raise ContractError(
            f"contract {spec!r} is neither a w<window>s<stride> template nor a file"
        )
    table = load_contracts(path)
    if name is None:
        if len(table) != 1:
            raise ContractError(
                f"{path} defines {sorted(table)}; pick one with {path}:<name>"
            )
        name = next(iter(table))
    if name not in table:
        raise ContractError(f"{path} has no contract named {name!r}")
    return table[name]


def _flagged_exit(matrices) -> int:
    flagged = sorted({p for m in matrices for p in m.flagged_pairs})
    if flagged:
        listed = ", ".join(f"({i},{j})" for i, j in flagged)
        print(f"non-finite distances for pairs: {listed}", file=sys.stderr)
        return EXIT_NONFINITE
    return EXIT_OK


def _verdict_text(report) -> str:
    reg, thr, ev = report.regime, report.thresholds, report.evidence
    fmt = lambda v: "undefined" if v is None else f"{v:.6f}"
    return "\n".join([
        f"verdict: {report.verdict}",
        f"  median replacement distance:  {fmt(ev['d_repl_median'])}",
        f"  median interchange distance:  {fmt(ev['d_inter_median'])}",
        f"  median interchange/replacement ratio: {fmt(ev['ir_ratio_median'])}",
        "decision rule: divergent when the ratio falls below "
        f"{reg.divergent_cutoff:g} and the median replacement distance exceeds "
        f"{thr.conditional:g}; tied when the ratio sits inside "
        f"[{reg.tied_lo:g}, {reg.tied_hi:g}]; weak-signal when both protocol "
        f"medians exceed {thr.conditional:g}; indeterminate otherwise.",
        f"  matched because: {ev['rule']}",
    ])


# -- subcommands ----------------------------------------------------------


def _cmd_distances(args, argv) -> int:
    writer = _run_writer(args, argv)
    model = _load_model(args.checkpoint, writer)
    corpus = read_corpus(args.corpus)
    prompts = _prompt_set(args, corpus)
    protocols = (
        ("replacement", "interchange") if args.protocol == "both" else (args.protocol,)
    )
    matrices = []
    for protocol in protocols:
        matrix = sweep_distances(
            model, args.pairs, protocol, prompts,
            positions=args.positions, threads=args.threads,
        )
        matrices.append(matrix)
        writer.write_json(f"distances_{protocol}.json", matrix.to_json_dict())
        writer.write_plotdata(
            f"heatmap_{protocol}.csv", heatmap_plotdata(matrix, model.config.n_layers)
        )
        writer.write_plotdata(
            f"adjacent_profile_{protocol}.csv", adjacent_profile_plotdata(matrix)
        )
        print(
            f"{protocol}: {len(matrix.records)} pairs, "
            f"strong {matrix.strong_count}, conditional {matrix.conditional_count}"
        )
    writer.finish()
    print(f"run: {writer.dir}")
    return _flagged_exit(matrices)


def _cmd_diagnose(args, argv) -> int:
    writer = _run_writer(args, argv)
    model = _load_model(args.checkpoint, writer)
    corpus = read_corpus(args.corpus)
    prompts = _prompt_set(args, corpus)
    matrices = {}
    for protocol in ("replacement", "interchange"):
        matrices[protocol] = sweep_distances(
            model, args.pairs, protocol, prompts,
            positions=args.positions, threads=args.threads,
        )
        writer.write_json(
            f"distances_{protocol}.json", matrices[protocol].to_json_dict()
        )
    report = protocol_gap_report(matrices["replacement"], matrices["interchange"])
    writer.write_json("gap_report.json", report.to_json_dict())
    writer.write_plotdata("gap_vs_depth.csv", gap_vs_depth_plotdata(report.pairs))
    writer.finish()
    print(_verdict_text(report))
    print(f"run: {writer.dir}")
    return _flagged_exit(matrices.values())


def _score_based_selection(args, model, prompts, writer):
    if args.method in ("greedy-replacement", "greedy-interchange"):
        protocol = args.method.split("-", 1)[1]
        matrix = sweep_distances(
            model, "adjacent", protocol, prompts, threads=args.threads
        )
        writer.write_json(f"distances_{protocol}.json", matrix.to_json_dict())
        if matrix.flagged_pairs:
            return None, matrix
        scores = layer_scores_from_pairs(matrix, "min_neighbor", model.config.n_layers)
        return greedy_select(scores, args.n, args.delta, method=args.method), None
    proxy = bi_scores(model, prompts.prompts) if args.method == "bi" \
        else cka_scores(model, prompts.prompts)
    writer.write_json("proxy_scores.json", {
        "method": proxy.method,
        "scores": proxy.scores,
        "excluded_positions": proxy.excluded_positions,
        "flagged_layers": proxy.flagged_layers,
    })
    if args.method == "bi":
        scores = proxy.scores
    else:
        # CKA marks redundancy (high = removable); invert so the ascending
        # greedy scan removes the most redundant layers, and push layers
        # with degenerate similarity to the back
        scores = [float("inf") if s is None else 1.0 - s for s in proxy.scores]
    return greedy_select(scores, args.n, args.delta, method=args.method), None


def _cmd_prune(args, argv) -> int:
    writer = _run_writer(args, argv)
    model = _load_model(args.checkpoint, writer)
    corpus = read_corpus(args.corpus)
    contract = _resolve_contract(args.contract, corpus) if args.contract else None
    if args.method in ("sleb-greedy", "sleb-iterative", "beam") and contract is None:
        raise _UsageError(f"--method {args.method} requires --contract")
    if contract is not None:
        writer.note_contract(contract.contract_id)

    flagged_matrix = None
    if args.method in ("greedy-replacement", "greedy-interchange", "bi", "cka"):
        prompts = _prompt_set(args, corpus)
        result, flagged_matrix = _score_based_selection(args, model, prompts, writer)
    elif args.method == "random":
        result = random_select(model.config.n_layers, args.n, args.delta, args.seed)
    elif args.method == "beam":
        prompts = _prompt_set(args, corpus)
        matrix = sweep_distances(
            model, "adjacent", "interchange", prompts, threads=args.threads
        )
        writer.write_json("distances_interchange.json", matrix.to_json_dict())
        if matrix.flagged_pairs:
            flagged_matrix, result = matrix, None
        else:
            ledger = BudgetLedger(args.budget)
            sizes = beam_select(
                model, matrix, corpus, contract, ledger, n_max=args.n,
                width=args.width, threads=args.threads,
            )
            writer.write_json("beam_sizes.json", [r.to_json_dict() for r in sizes])
            result = sizes[-1] if sizes else None
    else:
        variant = args.method.split("-", 1)[1]
        ledger = BudgetLedger(args.budget)
        result = sleb_select(
            model, args.n, corpus, contract, variant, ledger, threads=args.threads
        )

    if flagged_matrix is not None:
        writer.finish()
        return _flagged_exit([flagged_matrix])
    if result is None:
        writer.finish()
        print("budget exhausted before any removal set completed", file=sys.stderr)
        return EXIT_ERROR

    if contract is not None:
        baseline = sliding_window_ppl(model, corpus, contract, threads=args.threads)
        if result.layers:
            report, delta = evaluate_intervention(
                model, corpus, (Delete(set(result.layers)),), contract, baseline,
                threads=args.threads,
            )
            result.ppl, result.delta_ppl_pct = report.ppl, delta
        else:
            result.ppl, result.delta_ppl_pct = baseline.ppl, 0.0
        result.baseline_ppl = baseline.ppl
        result.contract_id = contract.contract_id
        if args.method == "random":
            rows = []
            for seed in RANDOM_BASELINE_SEEDS:
                pick = random_select(model.config.n_layers, args.n, args.delta, seed)
                rep, dl = evaluate_intervention(
                    model, corpus, (Delete(set(pick.layers)),), contract, baseline,
                    threads=args.threads,
                ) if pick.layers else (baseline, 0.0)
                rows.append({
                    "seed": seed,
                    "layers": list(pick.layers),
                    "ppl": rep.ppl,
                    "delta_ppl_pct": dl,
                })
            writer.write_json("random_baseline.json", rows)

    writer.write_json("selection.json", result.to_json_dict())
    writer.finish()
    layers = ",".join(map(str, result.layers)) or "(none)"
    line = f"{result.method}: remove layers [{layers}]"
    if result.delta_ppl_pct is not None:
        line += f", delta ppl {result.delta_ppl_pct:+.3f}%"
    if result.shortfall:
        line += " (shortfall: fewer layers than requested)"
    print(line)
    print(f"run: {writer.dir}")
    return EXIT_OK


def _cmd_evaluate(args, argv) -> int:
    if args.layers is not None and args.selection is not None:
        raise _UsageError("pass --layers or --selection, not both")
    writer = _run_writer(args, argv)
    model = _load_model(args.checkpoint, writer)
    corpus = read_corpus(args.corpus)
    contract = _resolve_contract(args.contract, corpus)
    writer.note_contract(contract.contract_id)
    layers = args.layers
    if args.selection is not None:
        selection = json.loads(Path(args.selection).read_text(encoding="utf-8"))
        layers = [int(v) for v in selection.get("layers", [])]
        wanted = selection.get("contract_id")
        if wanted is not None and wanted != contract.contract_id:
            raise ContractError(
                f"selection was made under {wanted}, "
                f"refusing to evaluate under {contract.contract_id}"
            )

    bs = {"n_resamples": args.bootstrap, "seed": args.seed} if args.bootstrap else None
    baseline = sliding_window_ppl(
        model, corpus, contract, bootstrap=bs, threads=args.threads
    )
    edited, delta = None, None
    if layers:
        edited, delta = evaluate_intervention(
            model, corpus, (Delete(set(layers)),), contract, baseline,
            bootstrap=bs, threads=args.threads,
        )
    writer.write_json("evaluation.json", {
        "contract_id": contract.contract_id,
        "layers": list(layers) if layers else [],
        "baseline": baseline.to_json_dict(),
        "edited": edited.to_json_dict() if edited is not None else None,
        "delta_ppl_pct": delta,
    })
    writer.finish()
    line = f"baseline ppl {baseline.ppl:.4f} [{contract.contract_id}]"
    if edited is not None:
        line += f"; edited ppl {edited.ppl:.4f} ({delta:+.3f}%)"
    print(line)
    print(f"run: {writer.dir}")
    return EXIT_OK


def _cmd_jacobian(args, argv) -> int:
    writer = _run_writer(args, argv)
    model = _load_model(args.checkpoint, writer)
    corpus = read_corpus(args.corpus)
    prompts = _prompt_set(args, corpus)
    report = residual_jacobian_norms(
        model, prompts.prompts, args.layers,
        iterations=args.iterations, epsilon=args.epsilon, seed=args.seed,
    )
    writer.write_json("jacobian.json", report.to_json_dict())
    rows = []
    for stat in ("mean", "max", "min"):
        for row in report.rows:
            rows.append((stat, row["layer"], row[stat], None))
    writer.write_plotdata("jacobian_profile.csv", rows)
    writer.finish()
    dead = [row["layer"] for row in report.rows if row["n_prompts"] == 0]
    if dead:
        listed = ", ".join(map(str, dead))
        print(f"non-finite jacobian estimates for layers: {listed}", file=sys.stderr)
        return EXIT_NONFINITE
    for row in report.rows:
        print(
            f"layer {row['layer']}: mean {row['mean']:.4f} "
            f"max {row['max']:.4f} min {row['min']:.4f}"
        )
    print(f"run: {writer.dir}")
    return EXIT_OK


def _cmd_stability(args, argv) -> int:
    writer = _run_writer(args, argv)
    model = _load_model(args.checkpoint, writer)
    corpus = read_corpus(args.corpus)
    prompts = _prompt_set(args, corpus)
    rows = prompt_stability(
        model, args.pairs, args.protocol, prompts, args.sizes,
        seed=args.seed, top_k=args.top_k, threads=args.threads,
    )
    writer.write_json("stability.json", rows)
    header = ("size", "spearman", "kendall", "top_k", "top_k_overlap",
              "max_rel_deviation")
    writer.write_csv("stability.csv", header, [[r[k] for k in header] for r in rows])
    writer.finish()
    for r in rows:
        print(
            f"size {r['size']}: spearman {r['spearman']:.4f} "
            f"kendall {r['kendall']:.4f} top-{r['top_k']} overlap {r['top_k_overlap']}"
        )
    print(f"run: {writer.dir}")
    return EXIT_OK


def _cmd_counterfactual(args, argv) -> int:
    writer = _run_writer(args, argv)
    model = _load_model(args.checkpoint, writer)
    corpus = read_corpus(args.corpus)
    prompts = _prompt_set(args, corpus)
    pairs = pair_list(model.config.n_layers, args.pairs)
    report = rope_counterfactual(
        model, pairs, prompts, positions=args.positions, threads=args.threads
    )
    writer.write_json("counterfactual.json", sanitize_nonfinite(report.to_json_dict()))
    writer.finish()
    print(f"baseline divergence (positions on vs off): {report.baseline_divergence:.6f}")
    print(f"normal:   verdict {report.normal.verdict}")
    print(f"disabled: verdict {report.disabled.verdict}")
    print(f"run: {writer.dir}")
    return EXIT_OK


def _cmd_budget_sweep(args, argv) -> int:
    writer = _run_writer(args, argv)
    model = _load_model(args.checkpoint, writer)
    corpus = read_corpus(args.corpus)
    contract = _resolve_contract(args.contract, corpus)
    writer.note_contract(contract.contract_id)
    names = [m.strip() for m in args.methods.split(",") if m.strip()]
    known = ("sleb-greedy", "sleb-iterative", "beam")
    for name in names:
        if name not in known:
            raise _UsageError(f"unknown budget-sweep method {name!r}; pick from {known}")

    methods = {}
    for name in names:
        if name == "beam":
            prompts = _prompt_set(args, corpus)
            matrix = sweep_distances(
                model, "adjacent", "interchange", prompts, threads=args.threads
            )
            writer.write_json("distances_interchange.json", matrix.to_json_dict())
            if matrix.flagged_pairs:
                writer.finish()
                return _flagged_exit([matrix])
            methods[name] = lambda ledger, m=matrix: beam_select(
                model, m, corpus, contract, ledger, n_max=args.n,
                width=args.width, threads=args.threads,
            )
        else:
            variant = name.split("-", 1)[1]
            methods[name] = lambda ledger, v=variant: sleb_select(
                model, args.n, corpus, contract, v, ledger, threads=args.threads
            )

    rows = budget_sweep(methods, args.budgets, model, corpus, contract)
    writer.write_json("budget_sweep.json", rows)
    header = ("method", "budget", "evals_used", "n_removed", "layers",
              "ppl", "baseline_ppl", "delta_ppl_pct", "shortfall")
    csv_rows = []
    for r in rows:
        row = [r[k] for k in header]
        row[4] = " ".join(map(str, r["layers"]))
        csv_rows.append(row)
    writer.write_csv("budget_sweep.csv", header, csv_rows)
    writer.finish()
    for r in rows:
        print(
            f"{r['method']} @ B={r['budget']}: {r['evals_used']} evals, "
            f"remove {r['layers']}, delta ppl {r['delta_ppl_pct']:+.3f}%"
        )
    print(f"run: {writer.dir}")
    return EXIT_OK


def _cmd_trajectory(args, argv) -> int:
    writer = _run_writer(args, argv)
    corpus = read_corpus(args.corpus)
    stats = ("mean", "median", "p75", "max")
    rows, plot_rows, flagged = [], [], []
    for index, path in enumerate(args.checkpoint):
        model = _load_model(path, writer)
        prompts = _prompt_set(args, corpus)
        matrices = {
            protocol: sweep_distances(
                model, args.pairs, protocol, prompts,
                positions=args.positions, threads=args.threads,
            )
            for protocol in ("replacement", "interchange")
        }
        report = protocol_gap_report(matrices["replacement"], matrices["interchange"])
        for m in matrices.values():
            flagged.extend(m.flagged_pairs)
        row = {"index": index, "checkpoint": str(path), "verdict": report.verdict}
        for stat in stats:
            row[f"gap_{stat}"] = report.pooled[f"gap_{stat}"]
            plot_rows.append((stat, index, report.pooled[f"gap_{stat}"], None))
        rows.append(row)
        print(f"[{index}] {path}: verdict {report.verdict}")
    writer.write_json("trajectory.json", rows)
    plot_rows.sort(key=lambda r: (stats.index(r[0]), r[1]))
    writer.write_plotdata("trajectory.csv", plot_rows)
    writer.finish()
    print(f"run: {writer.dir}")
    if flagged:
        listed = ", ".join(f"({i},{j})" for i, j in sorted(set(flagged)))
        print(f"non-finite distances for pairs: {listed}", file=sys.stderr)
        return EXIT_NONFINITE
    return EXIT_OK


_COMMANDS = {
    "distances": _cmd_distances,
    "diagnose": _cmd_diagnose,
    "prune": _cmd_prune,
    "evaluate": _cmd_evaluate,
    "jacobian": _cmd_jacobian,
    "stability": _cmd_stability,
    "counterfactual": _cmd_counterfactual,
    "budget-sweep": _cmd_budget_sweep,
    "trajectory": _cmd_trajectory,
}


def entry(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return _COMMANDS[args.command](args, argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (ProtogapError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main() -> None:
    sys.exit(entry())


if __name__ == "__main__":
    main()
