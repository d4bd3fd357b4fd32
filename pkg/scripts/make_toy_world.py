"""Write a synthetic Steam-style world (log, manifest, experiment config) to a directory."""

import argparse

from billp.toy import ToyWorldConfig, write_toy_world


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("out", help="target directory")
    p.add_argument("--users", type=int, default=60)
    p.add_argument("--items", type=int, default=80)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-episodes", type=int, default=20)
    p.add_argument("--eval-episodes", type=int, default=10)
    args = p.parse_args()
    cfg = ToyWorldConfig(n_users=args.users, n_items=args.items, seed=args.seed)
    path = write_toy_world(args.out, cfg, train_episodes=args.train_episodes, eval_episodes=args.eval_episodes)
    print(f"wrote {path}; try: billp train --config {path} --seed 0")


if __name__ == "__main__":
    main()
