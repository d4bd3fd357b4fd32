"""Planner/Reflector (macro level) and Actor/Critic (micro level) over shared memories.

Learning happens only through memory writes. After each episode the
Reflector's lesson is stored in the planner memory, keyed by the episode's
first state. After each step the Critic's bootstrapped value goes to the
critic memory and the sign of the advantage, paired with the action, goes to
the actor memory. Later prompts retrieve these entries by state similarity.
"""

from __future__ import annotations

import json
import logging
from copy import copy
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from billp.catalog import ItemCatalog
from billp.env import RecEnv, State, state_digest
from billp.gateway import (
    ChatBackend,
    ChatRequest,
    HistoryStep,
    LLMError,
    ParseError,
    load_template,
    parse_action,
    parse_value,
    render_prompt,
)
from billp.memory import (
    ActorPayload,
    CriticPayload,
    Memories,
    ReflectionPayload,
    TextEncoder,
    embed_text,
)

log = logging.getLogger(__name__)

VALUE_RETRY_SUFFIX = "\nAnswer with exactly one line of the form VALUE: <number>."
GROUND_TIE_RTOL = 1e-12
ACTION_RETRY_SUFFIX = '\nAnswer with exactly one line of the form "ACTION: <item title>".'


class GroundingError(Exception):
    pass


class EpisodeAbort(Exception):
    pass


@dataclass(frozen=True)
class AgentConfig:
    K: int = 2
    tau_A: float = 0.01
    tau_C: float = 0.1
    gamma: float = 0.5
    macro_enabled: bool = True
    micro_enabled: bool = True
    planner_enabled: bool = True
    warm_start_len: int = 5
    planner_temperature: float = 0.5
    reflector_temperature: float = 0.5
    actor_temperature: float = 0.5
    critic_temperature: float = 0.0
    exemplar_cap: int = 8
    candidate_limit: int = 20
    top_categories: int = 5
    model_id: str = "gpt-3.5-turbo-16k"
    max_tokens: int = 256
    grounding_text: str = "title+categories"  # or "title"
    label: str = "BiLLP"

    def __post_init__(self):
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if self.tau_A < 0 or self.tau_C < 0:
            raise ValueError("thresholds must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.actor_temperature <= 0:
            raise ValueError("the actor samples actions; its temperature must be > 0")
        if self.grounding_text not in ("title", "title+categories"):
            raise ValueError("grounding_text must be 'title' or 'title+categories'")

    def variant(self, name: str) -> "AgentConfig":
        """Ablation variants by label: BiLLP, w/o Macro, w/o Micro, ActOnly."""
        if name == "BiLLP":
            return replace(self, macro_enabled=True, micro_enabled=True, planner_enabled=True, label=name)
        if name == "w/o Macro":
            return replace(self, macro_enabled=False, micro_enabled=True, planner_enabled=True, label=name)
        if name == "w/o Micro":
            return replace(self, macro_enabled=True, micro_enabled=False, planner_enabled=True, label=name)
        if name == "ActOnly":
            return replace(self, macro_enabled=False, micro_enabled=False, planner_enabled=False, label=name)
        raise ValueError(f"unknown variant {name!r}")


VARIANTS = ("BiLLP", "w/o Macro", "w/o Micro", "ActOnly")


@dataclass(frozen=True)
class Thought:
    text: str
    step_index: int


@dataclass(frozen=True)
class Reflection:
    text: str
    source_episode_id: str
    key_state_text: str


@dataclass(frozen=True)
class AdvantageRecord:
    state_digest: str
    action_item_id: str
    reward: float
    V_s: float
    V_s_next: float
    A: float
    v: int
    flagged: bool = False


def advantage(reward: float, v_s: float, v_next: float, gamma: float) -> tuple[float, int]:
    a = reward + gamma * v_next - v_s
    return a, 1 if a >= 0 else 0


@dataclass
class StepRecord:
    step: int
    state_text: str
    state_digest: str
    thought: str
    raw_action: str
    action: str
    title: str
    reward: float
    done: bool
    quit_reason: str


@dataclass
class EpisodeTrace:
    episode_id: str
    user_id: str
    s1_text: str
    policy: str = "BiLLP"
    reflections_used: list[str] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    advantages: list[AdvantageRecord] = field(default_factory=list)
    quit_reason: str = "none"
    aborted: bool = False
    abort_reason: str = ""
    reflection: str | None = None

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def rewards(self) -> list[float]:
        return [s.reward for s in self.steps]

    @property
    def actions(self) -> list[str]:
        return [s.action for s in self.steps]

    @property
    def thoughts(self) -> list[str]:
        return [s.thought for s in self.steps]

    def jsonl_rows(self) -> list[dict]:
        return [
            {
                "episode_id": self.episode_id,
                "policy": self.policy,
                "user_id": self.user_id,
                "step": s.step,
                "state_digest": s.state_digest,
                "thought": s.thought,
                "raw_action": s.raw_action,
                "action": s.action,
                "reward": s.reward,
                "done": s.done,
                "quit_reason": s.quit_reason,
                "aborted": self.aborted,
            }
            for s in self.steps
        ]

    def to_dict(self) -> dict:
        return asdict(self)


def write_traces(path: str | Path, traces: Iterable[EpisodeTrace]) -> None:
    """Append-free JSON-lines dump, one object per environment step."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for t in traces:
            for row in t.jsonl_rows():
                fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def read_traces(path: str | Path) -> list[EpisodeTrace]:
    traces: dict[str, EpisodeTrace] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        row = json.loads(line)
        t = traces.setdefault(
            row["episode_id"], EpisodeTrace(row["episode_id"], row["user_id"], "", row.get("policy", "BiLLP"))
        )
        t.steps.append(
            StepRecord(row["step"], "", row["state_digest"], row["thought"], row["raw_action"],
                       row["action"], row["action"], row["reward"], row["done"], row["quit_reason"])
        )
        t.quit_reason = row["quit_reason"]
        t.aborted = row.get("aborted", False)
    return list(traces.values())


# ---------------------------------------------------------------------------


def _item_label(catalog: ItemCatalog, item_id: str) -> str:
    it = catalog[item_id] if item_id in catalog else None
    if it is None:
        return item_id
    return f"{it.title} ({', '.join(it.categories)})"


def state_text(state: State, catalog: ItemCatalog) -> str:
    """Deterministic rendering used as prompt content and as every retrieval key."""
    recent = "; ".join(_item_label(catalog, i) for i in state.warm_start) or "none"
    episode = "; ".join(
        f"{catalog[i].title if i in catalog else i}, {r:.2f}" for i, r in state.history
    ) or "none"
    return f"User {state.user_id} | recent: {recent} | episode: {episode}"


def analyze_categories(
    state: State, catalog: ItemCatalog, legal: Sequence[str] | None = None, top_m: int = 5
) -> str:
    """Category counts over warm start plus episode history, and over legal candidates."""

    def ranked(items: Iterable[str]) -> list[tuple[str, int]]:
        counts: dict[str, int] = {}
        for i in items:
            if i in catalog:
                for c in catalog[i].categories:
                    counts[c] = counts.get(c, 0) + 1
        return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))

    hist = ranked(list(state.warm_start) + state.recommended)
    lines = ["History categories: " + (", ".join(f"{c}: {n}" for c, n in hist) or "no history")]
    if legal is not None:
        cand = ranked(legal)[:top_m]
        lines.append("Candidate categories: " + (", ".join(f"{c}: {n}" for c, n in cand) or "none"))
    return "\n".join(lines)


class BiLLPAgent:
    """LLM planner/actor with reflection, experience and value memories.

    ``catalog`` supplies titles and categories; grounding embeds titles with
    the same text encoder as the memories. A ``frozen`` agent never writes
    memory and skips the Critic and Reflector (evaluation mode).
    """

    def __init__(
        self,
        backend: ChatBackend,
        catalog: ItemCatalog,
        memories: Memories | None = None,
        config: AgentConfig | None = None,
        encoder: TextEncoder | None = None,
        frozen: bool = False,
        v_max: float = 500.0,
    ):
        self.backend = backend
        self.catalog = catalog
        self.config = config or AgentConfig()
        self.encoder = encoder or (memories.planner.encoder if memories else None)
        self.memories = memories or Memories.empty(self.encoder)
        self.frozen = frozen
        self.v_max = v_max
        self._templates = {t: load_template(t) for t in ("planner", "reflector", "actor", "critic")}
        self._ground_ids = sorted(catalog.ids)
        self._ground_pos = {k: n for n, k in enumerate(self._ground_ids)}
        self._ground_matrix = np.stack([embed_text(self._grounding_key(k), self.encoder) for k in self._ground_ids])

    def _grounding_key(self, item_id: str) -> str:
        it = self.catalog[item_id]
        if self.config.grounding_text == "title" or not it.categories:
            return it.title
        return f"{it.title} ({', '.join(it.categories)})"

    def state_text(self, state: State) -> str:
        return state_text(state, self.catalog)

    def _ask(self, tag: str, prompt: str, temperature: float) -> str:
        req = ChatRequest.of(
            prompt, temperature=temperature, max_tokens=self.config.max_tokens,
            model_id=self.config.model_id, tag=tag,
        )
        return self.backend.complete(req)

    # -- macro level -----------------------------------------------------------

    def retrieve_reflections(self, s1_text: str) -> list[str]:
        if not self.config.macro_enabled or self.config.K == 0:
            return []
        return [e.payload.text for e in self.memories.planner.retrieve_topk(s1_text, self.config.K)]

    def planner_prompt(self, history: Sequence[HistoryStep], state: State, reflections: Sequence[str]) -> str:
        return render_prompt(
            self._templates["planner"],
            {"reflections": list(reflections), "state": self.state_text(state), "history": list(history), "step": state.step_index},
        )

    def plan(self, history: Sequence[HistoryStep], state: State, reflections: Sequence[str]) -> Thought:
        if not self.config.planner_enabled:
            return Thought("", state.step_index)
        text = self._ask("planner", self.planner_prompt(history, state, reflections), self.config.planner_temperature)
        return Thought(text.strip(), state.step_index)

    def reflector_prompt(self, trace: EpisodeTrace) -> str:
        history = [HistoryStep(s.thought, s.title, s.reward) for s in trace.steps]
        outcome = f"the user quit after {trace.length} rounds ({trace.quit_reason})"
        return render_prompt(
            self._templates["reflector"], {"state": trace.s1_text, "history": history, "outcome": outcome}
        )

    def reflect(self, trace: EpisodeTrace) -> Reflection | None:
        """Write one reflection for a finished episode into the planner memory."""
        if not self.config.macro_enabled or self.frozen:
            return None
        if not trace.steps or not trace.steps[-1].done:
            raise ValueError("reflect() needs a finished episode")
        try:
            text = self._ask("reflector", self.reflector_prompt(trace), self.config.reflector_temperature).strip()
        except LLMError as exc:
            log.warning("reflection skipped for episode %s: %s", trace.episode_id, exc)
            return None
        if not text:
            log.warning("reflection skipped for episode %s: empty reply", trace.episode_id)
            return None
        self.memories.planner.add(trace.s1_text, ReflectionPayload(text))
        trace.reflection = text
        return Reflection(text, trace.episode_id, trace.s1_text)

    # -- micro level -------------------------------------------------------------

    def actor_experiences(self, state_txt: str) -> list[str]:
        if not self.config.micro_enabled:
            return []
        hits = self._capped(self.memories.actor.threshold_with_distance(state_txt, self.config.tau_A))
        out = []
        for e in hits:
            p = e.payload
            title = self.catalog[p.action_item_id].title if p.action_item_id in self.catalog else p.action_item_id
            verdict = "good" if p.advantage_v == 1 else "bad"
            out.append(f"in a similar state, recommending {title} was {verdict} (v={p.advantage_v})")
        return out

    def critic_exemplars(self, state_txt: str) -> list[str]:
        hits = self._capped(self.memories.critic.threshold_with_distance(state_txt, self.config.tau_C))
        return [f"{e.key_text} => VALUE: {e.payload.value_estimate:.4f}" for e in hits]

    def _capped(self, hits):
        # nearest first; among equal distances prefer the most recent (freshest) estimate
        hits = sorted(hits, key=lambda ed: (ed[1], -ed[0].insert_seq))
        return [e for e, _ in hits[: self.config.exemplar_cap]]

    def candidates(self, legal: Sequence[str], rng: np.random.Generator) -> list[str]:
        limit = self.config.candidate_limit
        if limit <= 0:
            return []
        pool = sorted(legal)
        if len(pool) > limit:
            pool = [pool[k] for k in sorted(rng.choice(len(pool), size=limit, replace=False))]
        return [self.catalog[k].title for k in pool]

    def actor_prompt(
        self,
        history: Sequence[HistoryStep],
        state: State,
        thought: Thought,
        legal: Sequence[str],
        rng: np.random.Generator,
    ) -> str:
        st = self.state_text(state)
        return render_prompt(
            self._templates["actor"],
            {
                "experiences": self.actor_experiences(st),
                "tool_output": analyze_categories(state, self.catalog, legal, self.config.top_categories),
                "candidates": self.candidates(legal, rng),
                "state": st,
                "history": list(history),
                "step": state.step_index,
                "thought": thought.text or "none",
            },
        )

    def act(
        self,
        history: Sequence[HistoryStep],
        state: State,
        thought: Thought,
        legal: Sequence[str],
        rng: np.random.Generator | None = None,
    ) -> tuple[str, str]:
        """Sample an action from the LLM and ground it to a legal item."""
        if not legal:
            raise GroundingError("no legal items to recommend")
        rng = rng if rng is not None else np.random.default_rng(0)
        prompt = self.actor_prompt(history, state, thought, legal, rng)
        raw = self._ask("actor", prompt, self.config.actor_temperature)
        try:
            title = parse_action(raw)
        except ParseError:
            raw = self._ask("actor", prompt + ACTION_RETRY_SUFFIX, self.config.actor_temperature)
            title = parse_action(raw)
        return self.ground_action(title, legal), raw

    def ground_action(self, raw_text: str, legal: Sequence[str]) -> str:
        """Legal item whose grounding embedding is nearest to the text; ties go to the smaller id."""
        if not legal:
            raise GroundingError("no legal items to ground to")
        ids = sorted(legal)
        m = self._ground_matrix[[self._ground_pos[k] for k in ids]]
        q = embed_text(raw_text, self.encoder)
        d = np.sqrt(np.sum((m - q) ** 2, axis=1))
        # distances equal up to rounding count as ties, so the id rule decides
        near = np.flatnonzero(d <= d.min() * (1 + GROUND_TIE_RTOL) + 1e-15)
        return ids[int(near[0])]

    def critic_prompt(self, history: Sequence[HistoryStep], state: State) -> str:
        st = self.state_text(state)
        return render_prompt(
            self._templates["critic"],
            {"experiences": self.critic_exemplars(st), "state": st, "history": list(history), "gamma": self.config.gamma},
        )

    def estimate_value(self, history: Sequence[HistoryStep], state: State) -> tuple[float, bool]:
        """Critic estimate of V(state) and whether it fell back to the default.

        Terminal states are worth 0 without asking the model.
        """
        if state.finished:
            return 0.0, False
        prompt = self.critic_prompt(history, state)
        temp = self.config.critic_temperature
        try:
            try:
                return parse_value(self._ask("critic", prompt, temp), self.v_max), False
            except ParseError:
                return parse_value(self._ask("critic", prompt + VALUE_RETRY_SUFFIX, temp), self.v_max), False
        except (ParseError, LLMError) as exc:
            log.warning("critic fell back to 0 for user %s step %d: %s", state.user_id, state.step_index, exc)
            return 0.0, True

    def micro_step_update(
        self,
        state: State,
        action: str,
        reward: float,
        next_state: State,
        history: Sequence[HistoryStep] = (),
        thought: str = "",
        v_s: float | None = None,
    ) -> AdvantageRecord | None:
        """Score the step with the Critic and write both micro memories.

        ``v_s`` reuses the previous step's estimate of this state when given.
        Returns None (no calls, no writes) when micro-learning is off or frozen.
        """
        if not self.config.micro_enabled or self.frozen:
            return None
        flagged = False
        if v_s is None:
            v_s, flagged = self.estimate_value(history, state)
        title = self.catalog[action].title if action in self.catalog else action
        next_history = list(history) + [HistoryStep(thought, title, reward)]
        v_next, f2 = self.estimate_value(next_history, next_state)
        a, v = advantage(reward, v_s, v_next, self.config.gamma)
        st = self.state_text(state)
        digest = state_digest(state)
        self.memories.critic.add(st, CriticPayload(digest, reward + self.config.gamma * v_next))
        self.memories.actor.add(st, ActorPayload(digest, action, v))
        return AdvantageRecord(digest, action, reward, v_s, v_next, a, v, flagged or f2)

    # -- episode -------------------------------------------------------------------

    def for_episode(self, seed: int) -> "BiLLPAgent":
        """Shallow copy sharing memories, with an independent backend stream."""
        twin = copy(self)
        twin.backend = self.backend.fork(seed)
        return twin

    def run_episode(self, env: RecEnv, user_id: str, seed: int = 0, episode_id: str = "") -> EpisodeTrace:
        agent = self.for_episode(seed)
        agent.v_max = env.config.max_rounds * 5.0
        return agent._run(env, user_id, np.random.default_rng(seed), episode_id or f"{user_id}-{seed}")

    def _run(self, env: RecEnv, user_id: str, rng: np.random.Generator, episode_id: str) -> EpisodeTrace:
        state = env.reset(user_id, self.config.warm_start_len)
        s1 = self.state_text(state)
        reflections = self.retrieve_reflections(s1)
        trace = EpisodeTrace(episode_id, user_id, s1, self.config.label, list(reflections))
        history: list[HistoryStep] = []
        v_s: float | None = None
        try:
            while True:
                thought = self.plan(history, state, reflections)
                legal = env.legal_item_list(state)
                action, raw = self.act(history, state, thought, legal, rng)
                out = env.step(state, action)
                title = self.catalog[action].title
                rec = self.micro_step_update(state, action, out.reward, out.next_state, history, thought.text, v_s)
                if rec is not None:
                    trace.advantages.append(rec)
                    v_s = rec.V_s_next
                trace.steps.append(
                    StepRecord(state.step_index, self.state_text(state), state_digest(state), thought.text,
                               raw, action, title, out.reward, out.done, out.quit_reason)
                )
                history.append(HistoryStep(thought.text, title, out.reward))
                state = out.next_state
                if out.done:
                    trace.quit_reason = out.quit_reason
                    break
        except (LLMError, ParseError, GroundingError) as exc:
            trace.aborted = True
            trace.abort_reason = f"{type(exc).__name__}: {exc}"
            log.warning("episode %s aborted at step %d: %s", episode_id, state.step_index, exc)
            return trace
        self.reflect(trace)
        return trace


class AgentPolicy:
    """Frozen agent as a ``policy(state, rng) -> item_id`` callable (for rollouts)."""

    def __init__(self, agent: BiLLPAgent, env: RecEnv):
        self.agent = copy(agent)
        self.agent.frozen = True
        self.agent.v_max = env.config.max_rounds * 5.0
        self.env = env
        self._reflections: dict[str, list[str]] = {}

    def __call__(self, state: State, rng: np.random.Generator) -> str:
        agent = self.agent.for_episode(int(rng.integers(2**62)))
        s1 = agent.state_text(state.initial())
        if s1 not in self._reflections:
            self._reflections[s1] = agent.retrieve_reflections(s1)
        history = [HistoryStep("", agent.catalog[i].title, r) for i, r in state.history]
        thought = agent.plan(history, state, self._reflections[s1])
        action, _ = agent.act(history, state, thought, self.env.legal_item_list(state), rng)
        return action
