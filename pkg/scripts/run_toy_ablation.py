"""Build a toy world in a temp dir and print the four-way ablation table."""

import argparse
import tempfile

from billp.harness.experiment import ablate, load_config
from billp.toy import write_toy_world


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-episodes", type=int, default=20)
    p.add_argument("--eval-episodes", type=int, default=10)
    args = p.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        cfg = load_config(write_toy_world(tmp, train_episodes=args.train_episodes, eval_episodes=args.eval_episodes))
        results = ablate(cfg, args.seed)
        for name, r in results.items():
            print(r["report"].table().splitlines()[1], " memory writes:", r["train_writes"])


if __name__ == "__main__":
    main()
