"""Train on the toy world once, then evaluate the same memories for several quit windows."""

import argparse
import tempfile

from billp.harness.experiment import load_config, sweep_window, train
from billp.toy import write_toy_world


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--windows", default="1,2,4,8")
    args = p.parse_args()
    windows = [int(w) for w in args.windows.split(",")]
    with tempfile.TemporaryDirectory() as tmp:
        cfg = load_config(write_toy_world(tmp))
        snap = train(cfg, args.seed).snapshot_dir
        for w, r in sweep_window(cfg, snap, windows, args.seed + 1).items():
            print(f"W={w}: Len {r.len_mean:.3f} ± {r.len_std:.3f}  R_traj {r.r_traj_mean:.3f}")


if __name__ == "__main__":
    main()
