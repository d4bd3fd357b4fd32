"""Embedding-keyed memories for reflections, actor experiences and critic values.

Retrieval is exact (a linear scan over a dense matrix). Results are ordered by
ascending Euclidean distance, ties resolved by insertion order.
"""

from __future__ import annotations

import hashlib
import io
import json
import re
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Union

import numpy as np

MAGIC = b"BLPMEM"
FORMAT_VERSION = 1
KINDS = ("planner", "actor", "critic")
_WS = re.compile(r"\s+")
_TOKEN = re.compile(r"[0-9a-z]+")


class StoreError(Exception):
    """Dimension mismatches and unreadable snapshots."""


class TextEncoder(Protocol):
    dim: int
    name: str

    def encode(self, text: str) -> np.ndarray: ...


def normalize_text(text: str) -> str:
    return _WS.sub(" ", text).strip()


class HashingEncoder:
    """Signed feature hashing over word tokens and character trigrams, L2-normalized.

    Hashes use blake2b so vectors are stable across processes (``hash()`` is salted).
    """

    def __init__(self, dim: int = 256):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.name = f"hashing-{dim}"
        self._cache: dict[str, np.ndarray] = {}

    def _features(self, text: str) -> list[str]:
        feats = []
        for tok in _TOKEN.findall(text.lower()):
            feats.append("w:" + tok)
            padded = f"^{tok}$"
            feats.extend("c:" + padded[k : k + 3] for k in range(len(padded) - 2))
        return feats

    def encode(self, text: str) -> np.ndarray:
        norm = normalize_text(text)
        if not norm:
            raise ValueError("cannot embed empty text")
        cached = self._cache.get(norm)
        if cached is not None:
            return cached
        vec = np.zeros(self.dim)
        for feat in self._features(norm):
            h = int.from_bytes(hashlib.blake2b(feat.encode(), digest_size=8).digest(), "little")
            vec[h % self.dim] += 1.0 if (h >> 63) & 1 else -1.0
        n = np.linalg.norm(vec)
        if n > 0:
            vec /= n
        vec.setflags(write=False)
        if len(self._cache) < 100_000:
            self._cache[norm] = vec
        return vec


_default_encoder = HashingEncoder()


def embed_text(text: str, encoder: TextEncoder | None = None) -> np.ndarray:
    return (encoder or _default_encoder).encode(text)


# ---------------------------------------------------------------------------
# payloads


@dataclass(frozen=True)
class ReflectionPayload:
    text: str


@dataclass(frozen=True)
class ActorPayload:
    state_digest: str
    action_item_id: str
    advantage_v: int

    def __post_init__(self):
        if self.advantage_v not in (0, 1) or isinstance(self.advantage_v, bool):
            raise ValueError(f"advantage_v must be 0 or 1, got {self.advantage_v!r}")


@dataclass(frozen=True)
class CriticPayload:
    state_digest: str
    value_estimate: float


Payload = Union[ReflectionPayload, ActorPayload, CriticPayload]
_PAYLOAD_KIND = {ReflectionPayload: "planner", ActorPayload: "actor", CriticPayload: "critic"}


def _payload_to_json(p: Payload) -> str:
    if isinstance(p, ReflectionPayload):
        d = {"reflection": p.text}
    elif isinstance(p, ActorPayload):
        d = {"actor_exp": [p.state_digest, p.action_item_id, p.advantage_v]}
    else:
        # repr round-trips floats exactly
        d = {"critic_exp": [p.state_digest, repr(float(p.value_estimate))]}
    return json.dumps(d, ensure_ascii=False, sort_keys=True)


def _payload_from_json(s: str) -> Payload:
    d = json.loads(s)
    if "reflection" in d:
        return ReflectionPayload(d["reflection"])
    if "actor_exp" in d:
        sd, a, v = d["actor_exp"]
        return ActorPayload(sd, a, int(v))
    if "critic_exp" in d:
        sd, val = d["critic_exp"]
        return CriticPayload(sd, float(val))
    raise StoreError(f"unknown payload {s[:60]!r}")


@dataclass(frozen=True)
class MemoryEntry:
    key_text: str
    payload: Payload
    key_vec: np.ndarray
    insert_seq: int

    def __eq__(self, other):
        if not isinstance(other, MemoryEntry):
            return NotImplemented
        return (
            self.key_text == other.key_text
            and self.payload == other.payload
            and self.insert_seq == other.insert_seq
            and np.array_equal(self.key_vec, other.key_vec)
        )

    __hash__ = None


# ---------------------------------------------------------------------------
# store


class VectorStore:
    """Append-only memory with exact top-K and threshold retrieval.

    Writers are serialized by a lock; readers see the entries that existed
    when their query started.
    """

    def __init__(self, kind: str, encoder: TextEncoder | None = None, dim: int | None = None):
        if kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        self.kind = kind
        self.encoder = encoder or _default_encoder
        self.dim = dim if dim is not None else self.encoder.dim
        if self.dim != self.encoder.dim:
            raise StoreError(f"store dim {self.dim} != encoder dim {self.encoder.dim}")
        self._entries: list[MemoryEntry] = []
        self._matrix = np.zeros((16, self.dim))
        self._next_seq = 0
        self._lock = threading.Lock()
        self.writes = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(list(self._entries))

    @property
    def entries(self) -> list[MemoryEntry]:
        return list(self._entries)

    def __eq__(self, other):
        if not isinstance(other, VectorStore):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.dim == other.dim
            and self._next_seq == other._next_seq
            and self._entries == other._entries
        )

    __hash__ = None

    # -- writes --------------------------------------------------------------

    def add(self, key_text: str, payload: Payload) -> MemoryEntry:
        """Embed ``key_text`` and append a new entry."""
        return self.insert(key_text, payload, self.encoder.encode(key_text))

    def insert(self, key_text: str, payload: Payload, key_vec: np.ndarray) -> MemoryEntry:
        if _PAYLOAD_KIND[type(payload)] != self.kind:
            raise StoreError(f"{type(payload).__name__} does not belong in a {self.kind} store")
        vec = np.asarray(key_vec, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise StoreError(f"entry dim {vec.shape} != store dim {self.dim}")
        with self._lock:
            entry = MemoryEntry(key_text, payload, vec.copy(), self._next_seq)
            self._append(entry)
            self.writes += 1
        return entry

    def _append(self, entry: MemoryEntry) -> None:
        n = len(self._entries)
        if n == len(self._matrix):
            grown = np.zeros((2 * n, self.dim))
            grown[:n] = self._matrix
            self._matrix = grown
        self._matrix[n] = entry.key_vec
        self._entries.append(entry)
        self._next_seq = max(self._next_seq, entry.insert_seq + 1)

    # -- reads ---------------------------------------------------------------

    def _query_vec(self, query: str | np.ndarray) -> np.ndarray:
        if isinstance(query, str):
            return self.encoder.encode(query)
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dim,):
            raise StoreError(f"query dim {q.shape} != store dim {self.dim}")
        return q

    def distances(self, query: str | np.ndarray) -> tuple[list[MemoryEntry], np.ndarray]:
        entries = self._entries[:]
        q = self._query_vec(query)
        m = self._matrix[: len(entries)]
        return entries, np.sqrt(np.sum((m - q) ** 2, axis=1))

    def _ordered(self, entries, dist, mask=None) -> list[tuple[MemoryEntry, float]]:
        idx = np.arange(len(entries))
        if mask is not None:
            idx = idx[mask]
        # primary key distance, secondary insert order (== position)
        order = idx[np.lexsort((idx, dist[idx]))]
        return [(entries[k], float(dist[k])) for k in order]

    def topk_with_distance(self, query, k: int) -> list[tuple[MemoryEntry, float]]:
        if k < 0:
            raise ValueError("K must be >= 0")
        if k == 0 or not self._entries:
            return []
        entries, dist = self.distances(query)
        return self._ordered(entries, dist)[:k]

    def threshold_with_distance(self, query, tau: float) -> list[tuple[MemoryEntry, float]]:
        if tau < 0:
            raise ValueError("tau must be >= 0")
        if not self._entries:
            return []
        entries, dist = self.distances(query)
        return self._ordered(entries, dist, dist < tau)

    def retrieve_topk(self, query: str | np.ndarray, k: int) -> list[MemoryEntry]:
        return [e for e, _ in self.topk_with_distance(query, k)]

    def retrieve_threshold(self, query: str | np.ndarray, tau: float) -> list[MemoryEntry]:
        return [e for e, _ in self.threshold_with_distance(query, tau)]

    # -- persistence ---------------------------------------------------------

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()

        def put_str(s: str):
            b = s.encode("utf-8")
            buf.write(struct.pack("<I", len(b)))
            buf.write(b)

        with self._lock:
            entries = self._entries[:]
            next_seq = self._next_seq
        buf.write(MAGIC)
        buf.write(struct.pack("<H", FORMAT_VERSION))
        put_str(self.kind)
        put_str(self.encoder.name)
        buf.write(struct.pack("<IQQ", self.dim, len(entries), next_seq))
        for e in entries:
            body = io.BytesIO()
            key = e.key_text.encode("utf-8")
            payload = _payload_to_json(e.payload).encode("utf-8")
            body.write(struct.pack("<QI", e.insert_seq, len(key)))
            body.write(key)
            body.write(struct.pack("<I", len(payload)))
            body.write(payload)
            body.write(e.key_vec.astype("<f8").tobytes())
            raw = body.getvalue()
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    @classmethod
    def from_bytes(cls, data: bytes, encoder: TextEncoder | None = None) -> "VectorStore":
        view = memoryview(data)
        pos = 0

        def take(n: int) -> bytes:
            nonlocal pos
            if pos + n > len(view):
                raise StoreError("truncated memory snapshot")
            out = bytes(view[pos : pos + n])
            pos += n
            return out

        def get_str() -> str:
            (n,) = struct.unpack("<I", take(4))
            return take(n).decode("utf-8")

        try:
            if take(len(MAGIC)) != MAGIC:
                raise StoreError("not a memory snapshot (bad magic)")
            (version,) = struct.unpack("<H", take(2))
            if version != FORMAT_VERSION:
                raise StoreError(f"unsupported snapshot version {version}")
            kind = get_str()
            enc_name = get_str()
            dim, count, next_seq = struct.unpack("<IQQ", take(20))
            if encoder is None:
                encoder = _encoder_from_name(enc_name)
            store = cls(kind, encoder=encoder, dim=dim)
            for _ in range(count):
                (n,) = struct.unpack("<I", take(4))
                body = take(n)
                seq, klen = struct.unpack_from("<QI", body, 0)
                off = 12
                key = body[off : off + klen].decode("utf-8")
                off += klen
                (plen,) = struct.unpack_from("<I", body, off)
                off += 4
                payload = _payload_from_json(body[off : off + plen].decode("utf-8"))
                off += plen
                vec = np.frombuffer(body[off:], dtype="<f8").astype(np.float64)
                if vec.shape != (dim,):
                    raise StoreError("entry vector length does not match header dim")
                if _PAYLOAD_KIND[type(payload)] != kind:
                    raise StoreError(f"{type(payload).__name__} entry in a {kind} snapshot")
                store._append(MemoryEntry(key, payload, vec, seq))
            store._next_seq = next_seq
        except (struct.error, UnicodeDecodeError, ValueError) as exc:
            raise StoreError(f"unreadable memory snapshot: {exc}") from exc
        return store

    def snapshot(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path, encoder: TextEncoder | None = None) -> "VectorStore":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise StoreError(f"cannot read memory snapshot {path}: {exc}") from exc
        return cls.from_bytes(data, encoder)


def _encoder_from_name(name: str) -> TextEncoder:
    m = re.fullmatch(r"hashing-(\d+)", name)
    if m:
        dim = int(m.group(1))
        return _default_encoder if dim == _default_encoder.dim else HashingEncoder(dim)
    raise StoreError(f"snapshot was written with encoder {name!r}; pass it explicitly")


def retrieve_topk(store: VectorStore, query_text: str, k: int) -> list[MemoryEntry]:
    return store.retrieve_topk(query_text, k)


def retrieve_threshold(store: VectorStore, query_text: str, tau: float) -> list[MemoryEntry]:
    return store.retrieve_threshold(query_text, tau)


def snapshot(store: VectorStore, path: str | Path) -> None:
    store.snapshot(path)


def load(path: str | Path, encoder: TextEncoder | None = None) -> VectorStore:
    return VectorStore.load(path, encoder)


@dataclass
class Memories:
    """The three stores used by one agent."""

    planner: VectorStore
    actor: VectorStore
    critic: VectorStore

    @classmethod
    def empty(cls, encoder: TextEncoder | None = None) -> "Memories":
        return cls(VectorStore("planner", encoder), VectorStore("actor", encoder), VectorStore("critic", encoder))

    def save(self, directory: str | Path) -> dict[str, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {}
        for kind in KINDS:
            p = d / f"{kind}.mem"
            getattr(self, kind).snapshot(p)
            paths[kind] = p
        return paths

    @classmethod
    def load(cls, directory: str | Path, encoder: TextEncoder | None = None) -> "Memories":
        d = Path(directory)
        return cls(*(VectorStore.load(d / f"{k}.mem", encoder) for k in KINDS))

    def digests(self) -> dict[str, str]:
        return {k: getattr(self, k).digest() for k in KINDS}

    def writes(self) -> dict[str, int]:
        return {k: getattr(self, k).writes for k in KINDS}
