#!/usr/bin/env python3
"""Drive the full pipeline on one fixture: diagnose, distances, prune,
evaluate, jacobian. Stops at the first nonzero exit code.

Make a fixture first:  python3 scripts/make_fixture.py --out fixtures
"""

import argparse
import sys

from protogap.cli import entry


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--checkpoint", default="fixtures/model.ckpt")
    ap.add_argument("--corpus", default="fixtures/corpus.tok")
    ap.add_argument("--contract", default="w32s16")
    ap.add_argument("--n", type=int, default=2, help="layers to prune")
    ap.add_argument("--out", default="runs")
    args = ap.parse_args()

    common = ["--checkpoint", args.checkpoint, "--corpus", args.corpus,
              "--out", args.out]
    steps = [
        ["diagnose", *common, "--prompts", "8", "--prompt-len", "16",
         "--run-id", "demo-diagnose"],
        ["distances", *common, "--prompts", "8", "--prompt-len", "16",
         "--pairs", "all", "--protocol", "both", "--run-id", "demo-distances"],
        ["prune", *common, "--prompts", "8", "--prompt-len", "16",
         "--method", "greedy-interchange", "--n", str(args.n),
         "--contract", args.contract, "--run-id", "demo-prune"],
        ["evaluate", *common, "--contract", args.contract,
         "--selection", f"{args.out}/demo-prune/selection.json",
         "--run-id", "demo-evaluate"],
        ["jacobian", *common, "--prompts", "4", "--prompt-len", "16",
         "--iterations", "8", "--run-id", "demo-jacobian"],
    ]
    for argv in steps:
        print(f"\n$ protogap {' '.join(argv)}")
        code = entry(argv)
        if code != 0:
            print(f"step failed with exit code {code}", file=sys.stderr)
            sys.exit(code)
    print("\nall steps finished; artifacts under", args.out)


if __name__ == "__main__":
    main()
