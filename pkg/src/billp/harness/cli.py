"""Command-line entry point: ``billp <subcommand> --config exp.toml [--seed N] [--set k=v ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from billp.agent import AgentPolicy, BiLLPAgent, read_traces
from billp.catalog import CatalogError
from billp.env import EnvError
from billp.gateway import LLMError
from billp.harness import experiment as ex
from billp.harness.baselines import GreedyScorePolicy, RandomPolicy
from billp.harness.oracle import critic_variance_study, mc_state_value
from billp.harness.popularity import popularity_analysis
from billp.memory import StoreError

log = logging.getLogger("billp")

STOCHASTIC = {"train", "eval", "ablate", "mc-oracle", "variance-study", "sweep"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="billp", description="Bi-level planning agent experiments on simulated users.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True, help="experiment TOML file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override, e.g. agent.K=3")
        sp.add_argument("--out", help="output directory (default: under the config's workdir)")
        sp.add_argument("--seed", type=int, required=name in STOCHASTIC, help="master seed")
        return sp

    add("ingest", "load, filter and split the interaction log")
    add("train-scorer", "(re)train the train/test simulator scorers")
    add("train", "run training episodes and save memories")
    sp = add("eval", "evaluate frozen memories on the test environment")
    sp.add_argument("--snapshot", help="memory snapshot dir (default: <workdir>/train/memory)")
    sp.add_argument("--split", choices=("train", "test"), default="test")
    add("ablate", "train and evaluate BiLLP, w/o Macro, w/o Micro and ActOnly")
    sp = add("mc-oracle", "Monte-Carlo state values of probe states")
    sp.add_argument("--policy", choices=("agent", "random", "greedy"), default="agent")
    sp.add_argument("--snapshot")
    sp.add_argument("--n-states", type=int, default=5)
    sp.add_argument("--n-rollouts", type=int, default=1000)
    sp = add("variance-study", "Critic estimate variance versus single-rollout returns")
    sp.add_argument("--snapshot")
    sp.add_argument("--n-states", type=int, default=5)
    sp.add_argument("--n-mc", type=int, default=1000)
    sp.add_argument("--n-critic", type=int, default=100)
    sp = add("popularity", "share of recommendations per popularity bucket")
    sp.add_argument("--traces", action="append", default=[], metavar="LABEL=PATH", help="JSONL trace file per policy")
    sp.add_argument("--normalize", choices=("events", "distinct"), default="events")
    sp.add_argument("--source", choices=("union", "train"), default="union", help="log used to count popularity")
    sp.add_argument("--buckets", type=int, default=5)
    sp = add("sweep", "evaluate one snapshot under several quit-window sizes")
    sp.add_argument("--windows", default="1,2,4,8", help="comma-separated W values")
    sp.add_argument("--snapshot")
    return p


def _snapshot(cfg: ex.ExperimentConfig, arg: str | None) -> Path:
    return Path(arg) if arg else cfg.workdir / "train" / "memory"


def _out(cfg: ex.ExperimentConfig, arg: str | None, name: str) -> Path:
    out = Path(arg) if arg else cfg.workdir / name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(obj: dict, path: Path | None = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path is not None:
        path.write_text(text + "\n")
    print(text)


def _probe_states(world: ex.World, cfg: ex.ExperimentConfig, n: int, seed: int):
    env = world.test_env
    users = ex.sample_users(env, n, ex.mix_seed(seed, "probe-users"), cfg.agent.warm_start_len)
    return env, [env.reset(u, cfg.agent.warm_start_len) for u in users]


def _frozen_agent(cfg, world, snapshot, seed) -> BiLLPAgent:
    mem = ex.load_memories(snapshot)
    return BiLLPAgent(ex.make_backend(cfg.backend, seed), world.catalog, mem, cfg.agent)


def run(args: argparse.Namespace) -> int:
    cfg = ex.load_config(args.config, args.set)
    cmd = args.command
    if cmd == "ingest":
        _emit(ex.ingest(cfg), _out(cfg, args.out, "data") / "ingest_summary.json")
    elif cmd == "train-scorer":
        paths = ex.train_scorers(cfg, force=True)
        from billp.catalog import load_snapshot

        summary = {}
        for part, path in paths.items():
            _, scorer = load_snapshot(path)
            summary[part] = {"path": str(path), "final_train_rmse": scorer.rmse_history[-1] if scorer.rmse_history else None}
        _emit(summary)
    elif cmd == "train":
        res = ex.train(cfg, args.seed, args.out)
        _emit({"episodes": len(res.traces), "aborted": sum(t.aborted for t in res.traces), "memory_writes": res.writes,
               "snapshot": str(res.snapshot_dir)})
    elif cmd == "eval":
        report, _ = ex.evaluate(cfg, _snapshot(cfg, args.snapshot), args.seed, args.out, split=args.split)
        print(report.table())
    elif cmd == "ablate":
        results = ex.ablate(cfg, args.seed, args.out)
        for name, r in results.items():
            print(r["report"].table().splitlines()[1])
    elif cmd == "mc-oracle":
        world = ex.build_world(cfg)
        env, states = _probe_states(world, cfg, args.n_states, args.seed)
        if args.policy == "agent":
            policy = AgentPolicy(_frozen_agent(cfg, world, _snapshot(cfg, args.snapshot), args.seed), env)
        elif args.policy == "random":
            policy = RandomPolicy(env)
        else:
            policy = GreedyScorePolicy(env)
        rows = []
        for n, s in enumerate(states):
            samples, mean = mc_state_value(env, policy, s, args.n_rollouts, cfg.agent.gamma, seed=args.seed + n)
            rows.append({"user_id": s.user_id, "mean": mean, "var": float(np.var(samples)), "n": len(samples)})
        _emit({"policy": args.policy, "seed": args.seed, "config_hash": cfg.hash(), "states": rows},
              _out(cfg, args.out, "oracle") / "mc_oracle.json")
    elif cmd == "variance-study":
        world = ex.build_world(cfg)
        env, states = _probe_states(world, cfg, args.n_states, args.seed)
        agent = _frozen_agent(cfg, world, _snapshot(cfg, args.snapshot), args.seed)
        rows = critic_variance_study(env, agent, states, args.n_mc, args.n_critic, args.seed)
        _emit({"seed": args.seed, "config_hash": cfg.hash(), "rows": [r.summary() for r in rows]},
              _out(cfg, args.out, "oracle") / "variance_study.json")
    elif cmd == "popularity":
        if not args.traces:
            raise ex.ConfigError("popularity needs at least one --traces LABEL=PATH")
        traces = {}
        for spec in args.traces:
            label, _, path = spec.partition("=")
            if not path:
                raise ex.ConfigError(f"--traces expects LABEL=PATH, got {spec!r}")
            traces[label] = read_traces(path)
        from billp.catalog import DatasetManifest, prepare

        prep = prepare(DatasetManifest.from_file(cfg.manifest))
        records = prep.split.train + (prep.split.test if args.source == "union" else [])
        res = popularity_analysis(traces, prep.catalog.ids, records, args.buckets, args.normalize)
        out = res.to_dict()
        out.pop("bucket_of_item")
        out.update(normalize=args.normalize, source=args.source)
        _emit(out, _out(cfg, args.out, "popularity") / "popularity.json")
    elif cmd == "sweep":
        try:
            windows = [int(w) for w in args.windows.split(",") if w.strip()]
        except ValueError as exc:
            raise ex.ConfigError(f"bad --windows: {exc}") from exc
        results = ex.sweep_window(cfg, _snapshot(cfg, args.snapshot), windows, args.seed, args.out)
        for w, r in results.items():
            print(f"W={w}: Len {r.len_mean:.3f}  R_each {r.r_each_mean:.3f}  R_traj {r.r_traj_mean:.3f}")
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on unknown subcommand / missing flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ex.ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"billp: error: ConfigError: {exc}", file=sys.stderr)
        return 2
    except (CatalogError, EnvError, LLMError, StoreError, ValueError, OSError) as exc:
        print(f"billp: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
