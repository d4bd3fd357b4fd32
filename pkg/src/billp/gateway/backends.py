"""Chat-completion backends: OpenAI-compatible HTTP, local server, scripted stub."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import random
import re
import statistics
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import httpx

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")


class LLMError(Exception):
    pass


class RetriesExhaustedError(LLMError):
    pass


class AuthenticationError(LLMError):
    pass


class ContextLengthError(LLMError):
    def __init__(self, prompt_tokens: int, limit: int):
        super().__init__(f"rendered prompt is ~{prompt_tokens} tokens, context limit is {limit}")
        self.prompt_tokens = prompt_tokens
        self.limit = limit


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    temperature: float = 0.5
    max_tokens: int = 512
    model_id: str = "gpt-3.5-turbo-16k"
    tag: str = ""  # caller role (planner/actor/critic/reflector); never sent over the wire

    def __post_init__(self):
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        if not math.isfinite(self.temperature) or self.temperature < 0:
            raise ValueError("temperature must be finite and >= 0")

    @classmethod
    def of(cls, prompt: str, system: str | None = None, **kw) -> "ChatRequest":
        msgs = ([Message("system", system)] if system else []) + [Message("user", prompt)]
        return cls(tuple(msgs), **kw)

    @property
    def text(self) -> str:
        return "\n\n".join(m.content for m in self.messages)

    def digest(self) -> str:
        body = json.dumps(
            [self.model_id, self.temperature, self.max_tokens, [(m.role, m.content) for m in self.messages]]
        )
        return hashlib.sha256(body.encode()).hexdigest()


def estimate_tokens(request: ChatRequest) -> int:
    # rough: ~4 characters per token plus per-message framing
    return sum(len(m.content) // 4 + 4 for m in request.messages) + request.max_tokens


class AuditLog:
    """Thread-safe record of every completed call, optionally mirrored to JSONL."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        self._lock = threading.Lock()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def record(self, backend: str, request: ChatRequest, response: str | None, error: str | None = None):
        rec = {
            "backend": backend,
            "tag": request.tag,
            "model": request.model_id,
            "temperature": request.temperature,
            "messages": [[m.role, m.content] for m in request.messages],
            "response": response,
            "error": error,
        }
        with self._lock:
            self.records.append(rec)
            if self.path:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, ensure_ascii=False) + "\n")

    def count(self, tag: str | None = None) -> int:
        with self._lock:
            return sum(1 for r in self.records if tag is None or r["tag"] == tag)

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        with self._lock:
            for r in self.records:
                out[r["tag"]] = out.get(r["tag"], 0) + 1
        return dict(sorted(out.items()))


class ChatBackend:
    """Base class: local context guard and audit mirroring around ``_complete``."""

    name = "backend"

    def __init__(self, context_limit: int | None = None, audit: AuditLog | None = None):
        self.context_limit = context_limit
        self.audit = audit

    def complete(self, request: ChatRequest) -> str:
        if self.context_limit is not None:
            need = estimate_tokens(request)
            if need > self.context_limit:
                raise ContextLengthError(need, self.context_limit)
        try:
            text = self._complete(request)
        except LLMError as exc:
            if self.audit:
                self.audit.record(self.name, request, None, str(exc))
            raise
        if self.audit:
            self.audit.record(self.name, request, text)
        return text

    def _complete(self, request: ChatRequest) -> str:
        raise NotImplementedError

    def fork(self, seed: int) -> "ChatBackend":
        """Backend for one independent episode/rollout; HTTP backends are shared."""
        return self


def complete(backend: ChatBackend, request: ChatRequest) -> str:
    return backend.complete(request)


# ---------------------------------------------------------------------------
# HTTP


class TokenBucket:
    def __init__(self, rate: float, burst: float, clock: Callable[[], float] = time.monotonic, sleep=time.sleep):
        self.rate = rate
        self.capacity = burst
        self.tokens = burst
        self.clock = clock
        self.sleep = sleep
        self.last = clock()
        self._lock = threading.Lock()

    def acquire(self, n: float = 1.0) -> None:
        while True:
            with self._lock:
                now = self.clock()
                self.tokens = min(self.capacity, self.tokens + (now - self.last) * self.rate)
                self.last = now
                if self.tokens >= n:
                    self.tokens -= n
                    return
                wait = (n - self.tokens) / self.rate
            self.sleep(wait)


class HTTPChatBackend(ChatBackend):
    """OpenAI-compatible ``/chat/completions`` client.

    Retries 408/409/429/5xx responses and transport errors with exponential
    backoff; 401/403 fail immediately.
    """

    name = "http"
    TRANSIENT = {408, 409, 429, 500, 502, 503, 504}

    def __init__(
        self,
        base_url: str,
        model: str = "gpt-3.5-turbo-16k",
        api_key_env: str | None = "OPENAI_API_KEY",
        require_key: bool = True,
        max_attempts: int = 5,
        backoff_base: float = 0.5,
        backoff_max: float = 16.0,
        timeout: float = 60.0,
        context_limit: int | None = 16_384,
        requests_per_second: float | None = None,
        max_concurrency: int = 4,
        audit: AuditLog | None = None,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        super().__init__(context_limit, audit)
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.require_key = require_key
        self.max_attempts = max(1, max_attempts)
        self.backoff_base = backoff_base
        self.backoff_max = backoff_max
        self.sleep = sleep
        self._client = httpx.Client(timeout=timeout, transport=transport)
        self._slots = threading.BoundedSemaphore(max_concurrency)
        self._bucket = TokenBucket(requests_per_second, max(1.0, requests_per_second), sleep=sleep) if requests_per_second else None

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "") if self.api_key_env else ""
        if key:
            headers["Authorization"] = f"Bearer {key}"
        elif self.require_key:
            raise AuthenticationError(f"environment variable {self.api_key_env} is not set")
        return headers

    def payload(self, request: ChatRequest) -> dict:
        return {
            "model": request.model_id or self.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }

    def _complete(self, request: ChatRequest) -> str:
        headers = self._headers()
        body = self.payload(request)
        url = f"{self.base_url}/chat/completions"
        last = "no attempt made"
        for attempt in range(1, self.max_attempts + 1):
            if self._bucket:
                self._bucket.acquire()
            try:
                with self._slots:
                    resp = self._client.post(url, json=body, headers=headers)
            except httpx.TransportError as exc:
                last = f"transport error: {exc!r}"
            else:
                if resp.status_code in (401, 403):
                    raise AuthenticationError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                if resp.status_code == 200:
                    try:
                        return resp.json()["choices"][0]["message"]["content"] or ""
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        raise LLMError(f"malformed completion payload: {exc!r}") from exc
                if resp.status_code not in self.TRANSIENT:
                    raise LLMError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                last = f"HTTP {resp.status_code}"
            if attempt < self.max_attempts:
                delay = min(self.backoff_max, self.backoff_base * 2 ** (attempt - 1))
                log.warning("LLM call failed (%s); retry %d/%d in %.2fs", last, attempt, self.max_attempts, delay)
                self.sleep(delay)
        raise RetriesExhaustedError(f"gave up after {self.max_attempts} attempts: {last}")


class OpenAIBackend(HTTPChatBackend):
    name = "openai"

    def __init__(self, base_url: str = "https://api.openai.com/v1", **kw):
        kw.setdefault("require_key", True)
        super().__init__(base_url, **kw)


class LocalServerBackend(HTTPChatBackend):
    """A self-hosted OpenAI-compatible server (vLLM, llama.cpp, ...); key optional."""

    name = "local"

    def __init__(self, base_url: str = "http://127.0.0.1:8000/v1", **kw):
        kw.setdefault("require_key", False)
        super().__init__(base_url, **kw)


# ---------------------------------------------------------------------------
# stub

Generator = Callable[[str, random.Random], str]


@dataclass
class StubRule:
    """Fires when ``template`` (if set) equals the request tag and ``pattern`` (if set) matches."""

    response: str | Generator
    pattern: str | None = None
    template: str | None = None
    name: str = ""
    _rx: re.Pattern | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self._rx = re.compile(self.pattern, re.DOTALL) if self.pattern else None

    @property
    def catch_all(self) -> bool:
        return self.pattern is None and self.template is None

    def matches(self, tag: str, prompt: str) -> bool:
        if self.template is not None and self.template != tag:
            return False
        return self._rx is None or self._rx.search(prompt) is not None

    def respond(self, prompt: str, rng: random.Random) -> str:
        return self.response(prompt, rng) if callable(self.response) else self.response


class StubScript:
    def __init__(self, rules: Sequence[StubRule]):
        self.rules = list(rules)
        if not any(r.catch_all for r in self.rules):
            raise ValueError("a stub script needs a catch-all rule (no pattern, no template)")

    def select(self, tag: str, prompt: str) -> StubRule:
        for rule in self.rules:
            if rule.matches(tag, prompt):
                return rule
        raise AssertionError("unreachable: catch-all rule missing")

    @classmethod
    def from_file(cls, path: str | Path) -> "StubScript":
        from billp._toml import load_toml

        return cls.from_dict(load_toml(path))

    @classmethod
    def from_dict(cls, data: dict) -> "StubScript":
        rules = []
        for k, raw in enumerate(data.get("rules", [])):
            rules.append(
                StubRule(
                    _build_generator(raw),
                    pattern=raw.get("when"),
                    template=raw.get("template"),
                    name=raw.get("name", f"rule{k}"),
                )
            )
        return cls(rules)


def _section_lines(prompt: str, header: str) -> list[str]:
    """Lines following ``header`` up to the next blank line, bullet markers stripped."""
    idx = prompt.find(header)
    if idx < 0:
        return []
    out = []
    for line in prompt[idx + len(header) :].split("\n")[1:]:
        if not line.strip():
            break
        out.append(line.strip().lstrip("-*").strip())
    return out


def _build_generator(raw: dict) -> str | Generator:
    kind = raw.get("kind", "literal")
    fmt = raw.get("format", "{}")
    if kind == "literal":
        if "respond" not in raw:
            raise ValueError("literal stub rule needs 'respond'")
        return raw["respond"]
    if kind == "choice":
        choices = list(raw["choices"])
        return lambda prompt, rng: fmt.format(rng.choice(choices))
    if kind == "sequence":
        values = list(raw["values"])
        rx = re.compile(raw.get("index_pattern", r"Step: (\d+)"))

        def seq(prompt, rng):
            m = rx.search(prompt)
            n = int(m.group(1)) - 1 if m else 0
            return fmt.format(values[n % len(values)])

        return seq
    if kind == "regex":
        rx = re.compile(raw["pattern"], re.DOTALL)
        default = raw.get("default", "")

        def grab(prompt, rng):
            found = rx.findall(prompt)
            if not found:
                return default
            pick = found[-1] if raw.get("last", True) else found[0]
            return fmt.format(pick.strip())

        return grab
    if kind == "candidate":
        header = raw.get("section", "Candidates:")
        avoid = re.compile(raw["avoid_pattern"]) if raw.get("avoid_pattern") else None

        def cand(prompt, rng):
            options = _section_lines(prompt, header)
            if avoid:
                used = {m.strip() for m in avoid.findall(prompt)}
                fresh = [o for o in options if o not in used]
                options = fresh or options
            if not options:
                return raw.get("default", "")
            return fmt.format(rng.choice(options))

        return cand
    if kind == "mean_values":
        header = raw.get("section", "Reference estimates:")
        value_rx = re.compile(raw.get("value_pattern", r"VALUE:\s*([-+]?\d+(?:\.\d+)?)"))
        frac = float(raw.get("subsample", 1.0))
        default = raw.get("default", "VALUE: 0")
        fmt = raw.get("format", "VALUE: {}")

        def mean(prompt, rng):
            vals = [float(v) for line in _section_lines(prompt, header) for v in value_rx.findall(line)]
            if frac < 1.0 and vals:
                k = max(1, round(frac * len(vals)))
                vals = rng.sample(vals, k)
            if not vals:
                return default
            return fmt.format(f"{statistics.fmean(vals):.4f}")

        return mean
    raise ValueError(f"unknown stub rule kind {kind!r}")


def mix_seed(*parts: object) -> int:
    digest = hashlib.sha256(":".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


class StubBackend(ChatBackend):
    """Scripted, deterministic stand-in for an LLM.

    Randomized rules draw from an RNG derived from ``(seed, request digest)``.
    At temperature 0 that is all; above 0 the per-request occurrence count
    is mixed in too, so repeating a prompt samples afresh while a new backend
    with the same seed replays the same sequence.
    """

    name = "stub"

    def __init__(self, script: StubScript, seed: int = 0, audit: AuditLog | None = None, context_limit: int | None = None):
        super().__init__(context_limit, audit)
        self.script = script
        self.seed = seed
        self._seen: dict[str, int] = {}
        self._lock = threading.Lock()

    def _rng(self, request: ChatRequest) -> random.Random:
        d = request.digest()
        with self._lock:
            n = self._seen.get(d, 0)
            self._seen[d] = n + 1
        occurrence = n if request.temperature > 0 else 0
        material = f"{self.seed}:{d}:{occurrence}".encode()
        return random.Random(int.from_bytes(hashlib.sha256(material).digest()[:8], "little"))

    def _complete(self, request: ChatRequest) -> str:
        prompt = request.text
        rule = self.script.select(request.tag, prompt)
        return rule.respond(prompt, self._rng(request))

    def fork(self, seed: int) -> "StubBackend":
        return StubBackend(self.script, seed=mix_seed(self.seed, seed), audit=self.audit, context_limit=self.context_limit)


class FailingBackend(ChatBackend):
    """Raises on every call; used to exercise degradation paths."""

    name = "failing"

    def __init__(self, error: LLMError | None = None, audit: AuditLog | None = None):
        super().__init__(None, audit)
        self.error = error or RetriesExhaustedError("backend unavailable")

    def _complete(self, request: ChatRequest) -> str:
        raise self.error
