"""Score attribution methods against known-relevant pieces.

Harvests positions where the agent plays a winning move as its argmax;
the three pieces already completing the line are the reference answer.
Each method picks its top three pieces and we count the overlap.
"""

import argparse
from pathlib import Path

import numpy as np

from c4xai import harness, network

DEFAULT_CKPT = Path(__file__).resolve().parents[1] / "tests" / "data" / "desk_checkpoint.ckpt"
METHODS = ("shapley", "fw", "gradient", "lrp_eps", "guided_backprop", "random")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", default=str(DEFAULT_CKPT))
    ap.add_argument("--cases", type=int, default=15)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    params = network.load(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    try:
        cases = harness.harvest_ground_truth(
            params, args.cases, rng, confidence=0.3, game_cap=4000
        )
    except harness.InsufficientCases as exc:
        cases = exc.collected
        print(f"note: only {len(cases)} cases reached the confidence bar")
    if not cases:
        raise SystemExit("no usable cases; train the agent longer")

    print(f"{len(cases)} cases; histogram counts how many of the top-3 "
          "picks are ground-truth pieces (0..3):\n")
    for method in METHODS:
        hist = harness.ground_truth_score(cases, method, params, rng)
        marks = " ".join(f"{k}:{v}" for k, v in enumerate(hist))
        two_plus = hist[2] + hist[3]
        print(f"  {method:16s} {marks}   >=2 correct on {two_plus}/{len(cases)}")


if __name__ == "__main__":
    main()
