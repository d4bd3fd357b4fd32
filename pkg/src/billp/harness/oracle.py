"""Monte-Carlo state values and the Critic variance study."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from billp.agent import AgentPolicy, BiLLPAgent
from billp.env import RecEnv, State
from billp.gateway import HistoryStep

Policy = Callable[[State, np.random.Generator], str]


def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    total, w = 0.0, 1.0
    for r in rewards:
        total += w * r
        w *= gamma
    return total


def rollout(env: RecEnv, policy: Policy, state: State, rng: np.random.Generator) -> list[float]:
    """Rewards from ``state`` until the environment ends the episode."""
    rewards = []
    while not state.finished:
        out = env.step(state, policy(state, rng))
        rewards.append(out.reward)
        state = out.next_state
    return rewards


def mc_state_value(
    env: RecEnv, policy: Policy, state: State, n_rollouts: int, gamma: float, seed: int = 0
) -> tuple[list[float], float]:
    """Discounted returns of ``n_rollouts`` independent rollouts and their mean."""
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    samples = [
        discounted_return(rollout(env, policy, state, np.random.default_rng([seed, k])), gamma)
        for k in range(n_rollouts)
    ]
    return samples, float(np.mean(samples))


@dataclass
class VarianceRow:
    user_id: str
    step_index: int
    mc_mean: float
    mc_var: float
    critic_mean: float
    critic_var: float
    bias: float
    mc_samples: list[float]
    critic_estimates: list[float]

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("mc_samples")
        d.pop("critic_estimates")
        return d


def critic_estimates(agent: BiLLPAgent, state: State, n: int, seed: int = 0) -> list[float]:
    """``n`` independent Critic estimates of V(state) (fresh backend stream each)."""
    history = [HistoryStep("", agent.catalog[i].title, r) for i, r in state.history]
    out = []
    for k in range(n):
        twin = agent.for_episode(int(np.random.default_rng([seed, 7, k]).integers(2**62)))
        out.append(twin.estimate_value(history, state)[0])
    return out


def critic_variance_study(
    env: RecEnv,
    agent: BiLLPAgent,
    states: Sequence[State],
    n_mc: int = 1000,
    n_critic: int = 100,
    seed: int = 0,
    policy: Policy | None = None,
) -> list[VarianceRow]:
    """Compare single-rollout returns (the MC oracle) with repeated Critic estimates."""
    if not states:
        raise ValueError("need at least one probe state")
    policy = policy or AgentPolicy(agent, env)
    agent.v_max = env.config.max_rounds * 5.0
    rows = []
    for n, s in enumerate(states):
        samples, mc_mean = mc_state_value(env, policy, s, n_mc, agent.config.gamma, seed=seed + n)
        est = critic_estimates(agent, s, n_critic, seed=seed + n)
        c_mean = float(np.mean(est))
        rows.append(
            VarianceRow(
                s.user_id, s.step_index, mc_mean, float(np.var(samples)), c_mean, float(np.var(est)),
                c_mean - mc_mean, samples, est,
            )
        )
    return rows
