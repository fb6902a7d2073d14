"""Train a small agent end to end and watch the log.

Runs a 8-channel network for 300 self-play games with half the colours
hidden on average (p_h_max = 0.5). Takes well under a minute on a
laptop. Artifacts land in demos/out/train_small/.
"""

from pathlib import Path

from c4xai import training

OUT = Path(__file__).parent / "out" / "train_small"


def main():
    cfg = training.PPOConfig(
        conv_channels=8,
        p_h_max=0.5,
        total_games=300,
        seed=3,
        checkpoint_every=100,
    )

    def progress(game, row):
        if row is not None and game % 50 == 0:
            print(
                f"game {game:4d}  return {row['mean_return']:+.3f}  "
                f"entropy {row['entropy']:.3f}  illegal {row['illegal_rate']:.2f}"
            )

    result = training.train(cfg, OUT, progress=progress)
    print(f"\ncheckpoint: {result.checkpoint_path}")
    print(f"log:        {result.log_path}")
    tail = result.history[-5:]
    print("last five updates:")
    for row in tail:
        print(f"  games={row['games']} illegal_rate={row['illegal_rate']:.2f}")


if __name__ == "__main__":
    main()
