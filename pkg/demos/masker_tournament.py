"""Round-robin between maskers: who picks the most useful half-board?

Every pair of methods plays a short match. In each game both sides use
the same network, but each side sees only the colour features its
masker revealed (half of the pieces here). Better maskers keep the
information that matters for the next move.
"""

import argparse
from pathlib import Path

from c4xai import harness, network

DEFAULT_CKPT = Path(__file__).resolve().parents[1] / "tests" / "data" / "desk_checkpoint.ckpt"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", default=str(DEFAULT_CKPT))
    ap.add_argument("--games", type=int, default=30, help="games per pair")
    ap.add_argument("--seed", type=int, default=5)
    args = ap.parse_args()

    params = network.load(args.checkpoint)
    methods = ("gradient", "lrp_eps", "random", "input")
    result = harness.round_robin(
        methods, params, args.games, fraction=0.5, seed=args.seed
    )

    print(f"{args.games} games per pair, revealing half the pieces\n")
    for match in result.matches:
        print(f"  {match.method_a:16s} vs {match.method_b:16s} "
              f"{match.wins_a:3d}W {match.draws:3d}D {match.wins_b:3d}L")
    print("\ntotal score (win = 1, draw = 0.5):")
    for name, score in sorted(result.scores().items(), key=lambda kv: -kv[1]):
        print(f"  {name:16s} {score:6.1f}")


if __name__ == "__main__":
    main()
