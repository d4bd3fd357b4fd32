"""Critic variance study on a two-step toy world with a noisy, averaging Critic.

Items come in two reward levels, the Actor picks uniformly at random, and the
scripted Critic averages a random half of the retrieved value exemplars.
Prints the single-rollout return variance next to the variance of repeated
Critic estimates at the first state.
"""

import argparse

import numpy as np

from billp.agent import AgentConfig, BiLLPAgent
from billp.catalog import ItemCatalog, ItemRecord, MFScorer
from billp.env import EnvConfig, RecEnv
from billp.gateway import StubBackend, StubScript
from billp.harness.baselines import RandomPolicy
from billp.harness.oracle import critic_variance_study
from billp.memory import Memories

SCRIPT = {
    "rules": [
        {"template": "actor", "kind": "candidate", "format": "ACTION: {}"},
        {"template": "critic", "kind": "mean_values", "subsample": 0.5, "default": "VALUE: 0"},
        {"kind": "literal", "respond": "OK"},
    ]
}


def toy_env() -> RecEnv:
    ids = ["a", "b", "c", "d"]
    titles = ["Amber Coast", "Bright Meadow", "Cold Forge", "Dusty Road"]
    # bias-only scorer: reward 5 for a and b, 2.5 for c and d
    scorer = MFScorer(
        user_ids=["u"], item_ids=ids, user_factors=np.zeros((1, 1)), item_factors=np.zeros((4, 1)),
        user_bias=np.zeros(1), item_bias=np.array([2.0, 2.0, -0.5, -0.5]), global_bias=3.0,
    )
    cat = ItemCatalog(ItemRecord(k, t) for k, t in zip(ids, titles)).with_embeddings({k: np.eye(4)[n] for n, k in enumerate(ids)})
    return RecEnv(cat, scorer, {"u": []}, EnvConfig(window=1, beta=0.0, reward_floor=1.0, max_rounds=2, exclude_repeats=False))


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-episodes", type=int, default=60)
    args = p.parse_args()
    env = toy_env()
    cfg = AgentConfig(planner_enabled=False, macro_enabled=False, warm_start_len=0, critic_temperature=0.5, candidate_limit=4)
    agent = BiLLPAgent(StubBackend(StubScript.from_dict(SCRIPT), seed=args.seed), env.catalog, Memories.empty(), cfg)
    for k in range(args.train_episodes):
        agent.run_episode(env, "u", seed=args.seed * 10_000 + k)
    frozen = BiLLPAgent(agent.backend, env.catalog, agent.memories, cfg, frozen=True)
    rows = critic_variance_study(env, frozen, [env.reset("u", 0)], n_mc=1000, n_critic=100, seed=args.seed, policy=RandomPolicy(env))
    for r in rows:
        print(f"MC mean {r.mc_mean:.3f} var {r.mc_var:.3f} | Critic mean {r.critic_mean:.3f} var {r.critic_var:.3f} | bias {r.bias:+.3f}")


if __name__ == "__main__":
    main()
