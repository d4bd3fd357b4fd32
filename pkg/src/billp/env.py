"""Simulated user environment with a filter-bubble quit rule.

A recommendation ends the episode when it lies closer than ``beta`` (L2, in
the scorer's item-embedding space) to any of the last ``window`` recommended
items, when its reward falls below ``reward_floor``, or when ``max_rounds``
recommendations have been made. Checks run in that order and the first one
that fires is reported as the quit reason.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from billp.catalog import ItemCatalog, Scorer

NONE = "none"
SIMILARITY_QUIT = "similarity_quit"
LOW_REWARD_QUIT = "low_reward_quit"
MAX_ROUNDS = "max_rounds"
QUIT_REASONS = (NONE, SIMILARITY_QUIT, LOW_REWARD_QUIT, MAX_ROUNDS)


class EnvError(Exception):
    pass


class EpisodeFinishedError(EnvError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    window: int = 4
    beta: float = 50.0
    reward_floor: float = 2.0
    max_rounds: int = 100
    split: str = "train"
    exclude_repeats: bool = True

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.split not in ("train", "test"):
            raise ValueError("split must be 'train' or 'test'")


@dataclass(frozen=True)
class State:
    user_id: str
    history: tuple[tuple[str, float], ...] = ()
    step_index: int = 1
    warm_start: tuple[str, ...] = ()
    finished: bool = False

    def __post_init__(self):
        if self.step_index != len(self.history) + 1:
            raise ValueError("step_index must equal len(history) + 1")

    @property
    def recommended(self) -> list[str]:
        return [item for item, _ in self.history]

    def initial(self) -> "State":
        """The episode's first state (same user and warm start, no history)."""
        return State(self.user_id, (), 1, self.warm_start)


@dataclass(frozen=True)
class StepOutcome:
    reward: float
    next_state: State
    done: bool
    quit_reason: str = NONE


def state_digest(state: State) -> str:
    h = hashlib.sha256()
    h.update(state.user_id.encode())
    for item in state.warm_start:
        h.update(b"\x00w" + item.encode())
    for item, r in state.history:
        h.update(b"\x00h" + item.encode() + repr(r).encode())
    return h.hexdigest()[:16]


class RecEnv:
    """One simulated environment (train or test half of the log).

    ``catalog`` must carry the scorer's item embeddings (see
    ``ItemCatalog.with_embeddings``). ``warm_log`` maps each user to their
    chronological offline item sequence used to seed the first state.
    The environment holds no per-episode state; ``step`` is a pure function
    of its inputs so one instance can serve many episodes.
    """

    def __init__(
        self,
        catalog: ItemCatalog,
        scorer: Scorer,
        warm_log: Mapping[str, Sequence[str]],
        config: EnvConfig | None = None,
    ):
        if not catalog.has_embeddings:
            raise EnvError("environment catalog needs item embeddings")
        self.catalog = catalog
        self.scorer = scorer
        self.warm_log = {u: list(v) for u, v in warm_log.items()}
        self.config = config or EnvConfig()
        self._known_users = set(scorer.users)

    def with_config(self, **changes) -> "RecEnv":
        env = RecEnv.__new__(RecEnv)
        env.__dict__.update(self.__dict__)
        env.config = replace(self.config, **changes)
        return env

    def users(self, min_warm: int = 0) -> list[str]:
        """Users that can start an episode, sorted."""
        return sorted(
            u for u in self._known_users if len(self.warm_log.get(u, ())) >= min_warm
        )

    def reset(self, user_id: str, warm_start_len: int = 5) -> State:
        if user_id not in self._known_users:
            raise EnvError(f"unknown user {user_id!r}")
        seq = self.warm_log.get(user_id, [])
        if warm_start_len < 0 or len(seq) < warm_start_len:
            raise EnvError(
                f"user {user_id!r} has {len(seq)} logged items, need {warm_start_len}"
            )
        warm = tuple(seq[len(seq) - warm_start_len :]) if warm_start_len else ()
        return State(user_id, (), 1, warm)

    def legal_items(self, state: State) -> set[str]:
        return set(self.legal_item_list(state))

    def legal_item_list(self, state: State) -> list[str]:
        """Legal items in catalog order."""
        ids = self.catalog.ids
        if not self.config.exclude_repeats or not state.history:
            return ids
        used = set(state.recommended)
        return [k for k in ids if k not in used]

    def window_distance(self, state: State, item_id: str) -> float | None:
        """Minimum distance from ``item_id`` to the recent window, or None if empty."""
        recent = state.recommended[-self.config.window :]
        if not recent:
            return None
        e = self.catalog.embedding(item_id)
        m = self.catalog.embedding_matrix(recent)
        return float(np.min(np.linalg.norm(m - e, axis=1)))

    def step(self, state: State, item_id: str) -> StepOutcome:
        if state.finished:
            raise EpisodeFinishedError("episode already finished")
        if item_id not in self.catalog:
            raise EnvError(f"unknown item {item_id!r}")
        cfg = self.config
        reward = float(self.scorer.score(state.user_id, item_id))
        near = self.window_distance(state, item_id)
        if near is not None and near < cfg.beta:
            reason = SIMILARITY_QUIT
        elif reward < cfg.reward_floor:
            reason = LOW_REWARD_QUIT
        elif state.step_index >= cfg.max_rounds:
            reason = MAX_ROUNDS
        else:
            reason = NONE
        done = reason != NONE
        nxt = State(
            state.user_id,
            state.history + ((item_id, reward),),
            state.step_index + 1,
            state.warm_start,
            finished=done,
        )
        return StepOutcome(reward, nxt, done, reason)
