#!/usr/bin/env python3
"""Time the pair sweep across thread counts and pair filters."""

import argparse
import time

from protogap.container import read_corpus
from protogap.metrics import pair_list, prompts_from_corpus, sweep_distances
from protogap.model import load_checkpoint


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--corpus", required=True)
    ap.add_argument("--prompts", type=int, default=16)
    ap.add_argument("--prompt-len", type=int, default=32)
    ap.add_argument("--protocol", choices=("replacement", "interchange"),
                    default="interchange")
    ap.add_argument("--pairs", default="adjacent,all",
                    help="comma list of pair filters to time")
    ap.add_argument("--threads", default="1,2,4",
                    help="comma list of worker counts")
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    model = load_checkpoint(args.checkpoint)
    corpus = read_corpus(args.corpus)
    prompts = prompts_from_corpus(corpus, args.prompts, args.prompt_len)
    filters = [f for f in args.pairs.split(",") if f]
    thread_grid = [int(t) for t in args.threads.split(",") if t]

    print(f"model {model.config.model_id}: L={model.config.n_layers}, "
          f"{len(prompts)} prompts x {args.prompt_len} tokens, {args.protocol}")
    print(f"{'pairs':<12} {'n':>4} {'threads':>8} {'best s':>8} {'pairs/s':>9}")
    for pair_filter in filters:
        n_pairs = len(pair_list(model.config.n_layers, pair_filter))
        for threads in thread_grid:
            best = float("inf")
            for _ in range(args.repeats):
                t0 = time.perf_counter()
                sweep_distances(model, pair_filter, args.protocol, prompts,
                                threads=threads)
                best = min(best, time.perf_counter() - t0)
            print(f"{pair_filter:<12} {n_pairs:>4} {threads:>8} "
                  f"{best:>8.3f} {n_pairs / best:>9.1f}")


if __name__ == "__main__":
    main()
