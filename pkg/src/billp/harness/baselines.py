"""Simple reference policies and a policy-agnostic evaluation loop."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from billp.agent import EpisodeTrace, StepRecord
from billp.catalog import InteractionRecord
from billp.env import RecEnv, State, state_digest
from billp.harness.metrics import MetricsReport, aggregate, episode_metrics

Policy = Callable[[State, np.random.Generator], str]


@dataclass
class RandomPolicy:
    env: RecEnv

    def __call__(self, state: State, rng: np.random.Generator) -> str:
        legal = self.env.legal_item_list(state)
        return legal[int(rng.integers(len(legal)))]


@dataclass
class GreedyScorePolicy:
    """Highest simulator score among legal items (ties to the smaller id); ignores the quit rule."""

    env: RecEnv

    def __call__(self, state: State, rng: np.random.Generator) -> str:
        legal = sorted(self.env.legal_item_list(state))
        scores = [self.env.scorer.score(state.user_id, k) for k in legal]
        return legal[int(np.argmax(scores))]


class PopularityPolicy:
    """Most frequent legal item in the given interaction log."""

    def __init__(self, env: RecEnv, records: Iterable[InteractionRecord]):
        self.env = env
        freq = Counter(r.item_id for r in records)
        self.rank = {k: n for n, k in enumerate(sorted(freq, key=lambda k: (-freq[k], k)))}

    def __call__(self, state: State, rng: np.random.Generator) -> str:
        legal = self.env.legal_item_list(state)
        return min(legal, key=lambda k: (self.rank.get(k, len(self.rank)), k))


def run_policy_episode(env: RecEnv, policy: Policy, user_id: str, warm_start_len: int, seed: int, label: str) -> EpisodeTrace:
    rng = np.random.default_rng(seed)
    state = env.reset(user_id, warm_start_len)
    trace = EpisodeTrace(f"{label}-{user_id}-{seed}", user_id, "", label, [])
    while not state.finished:
        action = policy(state, rng)
        out = env.step(state, action)
        title = env.catalog[action].title
        trace.steps.append(
            StepRecord(state.step_index, "", state_digest(state), "", "", action, title, out.reward, out.done, out.quit_reason)
        )
        state = out.next_state
    trace.quit_reason = trace.steps[-1].quit_reason
    return trace


def evaluate_policy(
    env: RecEnv,
    policy: Policy,
    users_per_seed: Sequence[Sequence[str]],
    seeds: Sequence[int],
    warm_start_len: int = 5,
    label: str = "policy",
) -> tuple[MetricsReport, list[EpisodeTrace]]:
    traces, per_seed = [], []
    for s, users in zip(seeds, users_per_seed):
        ts = [run_policy_episode(env, policy, u, warm_start_len, int(s) * 1_000_003 + k, label) for k, u in enumerate(users)]
        traces.extend(ts)
        per_seed.append([episode_metrics(t) for t in ts])
    return aggregate(per_seed, seeds, label), traces
