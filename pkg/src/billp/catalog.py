"""Offline logs, item catalog, reward scorer and chronological splits.

The simulated environments are backed by a scorer fitted on one half of an
interaction log. The default scorer is a biased matrix factorization trained
with mini-batch SGD; anything exposing ``score``/``item_embedding`` can stand
in for it.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

SCHEMAS = ("generic", "amazon", "steam")
SNAPSHOT_VERSION = 1


class CatalogError(Exception):
    """Raised for unusable inputs: missing files, columns or unknown ids."""


class TrainingError(CatalogError):
    pass


@dataclass(frozen=True)
class ItemRecord:
    item_id: str
    title: str
    categories: tuple[str, ...] = ("unknown",)
    embedding: np.ndarray | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    item_id: str
    rating: float | None
    timestamp: int
    row: int = -1  # source row, used as the record id in split index files
    playtime: float | None = None


@dataclass
class DatasetSplit:
    train: list[InteractionRecord]
    test: list[InteractionRecord]


@dataclass
class LoadedLog:
    records: list[InteractionRecord]
    items: dict[str, ItemRecord]
    malformed: list[tuple[int, str]] = field(default_factory=list)

    @property
    def n_malformed(self) -> int:
        return len(self.malformed)


# ---------------------------------------------------------------------------
# ingestion


def _split_categories(raw: str | None) -> tuple[str, ...]:
    if not raw:
        return ("unknown",)
    cats = tuple(c.strip() for c in raw.replace(";", "|").split("|") if c.strip())
    return cats or ("unknown",)


def load_log(path: str | Path, schema: str = "generic") -> LoadedLog:
    """Read a CSV interaction log.

    ``generic``/``amazon`` files carry ``user_id,item_id,rating,timestamp``;
    ``steam`` files carry ``playtime`` (hours) instead of ``rating`` and are
    converted with :func:`transform_steam_ratings`. Optional ``title`` and
    ``categories`` (``|``-separated) columns populate the item metadata.
    Bad rows are skipped and reported in ``malformed`` as ``(line, reason)``.
    """
    if schema not in SCHEMAS:
        raise CatalogError(f"unknown schema {schema!r}; expected one of {SCHEMAS}")
    path = Path(path)
    if not path.is_file():
        raise CatalogError(f"log file not found: {path}")
    value_col = "playtime" if schema == "steam" else "rating"
    required = ("user_id", "item_id", value_col, "timestamp")

    records: list[InteractionRecord] = []
    items: dict[str, ItemRecord] = {}
    malformed: list[tuple[int, str]] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise CatalogError(f"{path}: missing required column(s) {missing}")
        for line, row in enumerate(reader, start=2):
            try:
                user, item = row["user_id"].strip(), row["item_id"].strip()
                if not user or not item:
                    raise ValueError("empty user_id/item_id")
                ts = int(float(row["timestamp"]))
                if ts <= 0:
                    raise ValueError(f"non-positive timestamp {ts}")
                value = float(row[value_col])
                if not math.isfinite(value):
                    raise ValueError(f"non-finite {value_col}")
                if schema == "steam":
                    if value < 0:
                        raise ValueError(f"negative playtime {value}")
                    rec = InteractionRecord(user, item, None, ts, line, playtime=value)
                else:
                    if not 1.0 <= value <= 5.0:
                        raise ValueError(f"rating {value} outside [1, 5]")
                    rec = InteractionRecord(user, item, value, ts, line)
            except (ValueError, TypeError, AttributeError) as exc:
                malformed.append((line, str(exc)))
                continue
            records.append(rec)
            if item not in items:
                title = (row.get("title") or "").strip() or item
                items[item] = ItemRecord(item, title, _split_categories(row.get("categories")))
    if schema == "steam":
        records = transform_steam_ratings(records)
    return LoadedLog(records, items, malformed)


def transform_steam_ratings(records: Iterable[InteractionRecord]) -> list[InteractionRecord]:
    """Playtime above 3 hours becomes a 5-star rating, anything else a 2."""
    out = []
    for rec in records:
        if rec.playtime is None:
            raise CatalogError(f"row {rec.row}: record has no playtime")
        if rec.playtime < 0:
            raise CatalogError(f"row {rec.row}: negative playtime {rec.playtime}")
        out.append(replace(rec, rating=5.0 if rec.playtime > 3.0 else 2.0))
    return out


def filter_min_interactions(
    records: Sequence[InteractionRecord], min_user: int, min_item: int
) -> list[InteractionRecord]:
    """Drop users/items with fewer interactions than the thresholds, to a fixed point."""
    if min_user < 1 or min_item < 1:
        raise ValueError("min_user and min_item must be >= 1")
    current = list(records)
    while True:
        users = Counter(r.user_id for r in current)
        items = Counter(r.item_id for r in current)
        kept = [r for r in current if users[r.user_id] >= min_user and items[r.item_id] >= min_item]
        if len(kept) == len(current):
            return kept
        current = kept


def chronological_split(records: Sequence[InteractionRecord]) -> DatasetSplit:
    """Per user, the earlier half goes to train and the later half to test.

    Odd counts give the extra record to train. Ties in timestamp keep input
    order. Both halves preserve the input order of the records.
    """
    by_user: dict[str, list[int]] = defaultdict(list)
    for idx, rec in enumerate(records):
        by_user[rec.user_id].append(idx)
    train_idx: set[int] = set()
    for idxs in by_user.values():
        ordered = sorted(idxs, key=lambda i: (records[i].timestamp, i))
        n_train = (len(ordered) + 1) // 2
        train_idx.update(ordered[:n_train])
    train = [r for i, r in enumerate(records) if i in train_idx]
    test = [r for i, r in enumerate(records) if i not in train_idx]
    return DatasetSplit(train, test)


def user_sequences(records: Iterable[InteractionRecord]) -> dict[str, list[str]]:
    """Chronological item sequence per user (stable on timestamp ties)."""
    seqs: dict[str, list[tuple[int, int, str]]] = defaultdict(list)
    for pos, rec in enumerate(records):
        seqs[rec.user_id].append((rec.timestamp, pos, rec.item_id))
    return {u: [it for _, _, it in sorted(v)] for u, v in seqs.items()}


# ---------------------------------------------------------------------------
# scorer


class Scorer(Protocol):
    dim: int

    def score(self, user_id: str, item_id: str) -> float: ...

    def item_embedding(self, item_id: str) -> np.ndarray: ...

    @property
    def users(self) -> list[str]: ...

    @property
    def items(self) -> list[str]: ...


@dataclass
class MFScorer:
    """Biased matrix factorization: ``mu + b_u + b_i + <p_u, q_i>`` clamped to [1, 5]."""

    user_ids: list[str]
    item_ids: list[str]
    user_factors: np.ndarray
    item_factors: np.ndarray
    user_bias: np.ndarray
    item_bias: np.ndarray
    global_bias: float
    rmse_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self._uidx = {u: i for i, u in enumerate(self.user_ids)}
        self._iidx = {it: i for i, it in enumerate(self.item_ids)}
        if self.user_factors.shape != (len(self.user_ids), self.item_factors.shape[1]):
            raise ValueError("user factor shape does not match user ids / dim")
        if self.item_factors.shape[0] != len(self.item_ids):
            raise ValueError("item factor rows do not match item ids")

    @property
    def dim(self) -> int:
        return int(self.item_factors.shape[1])

    @property
    def users(self) -> list[str]:
        return list(self.user_ids)

    @property
    def items(self) -> list[str]:
        return list(self.item_ids)

    def has_user(self, user_id: str) -> bool:
        return user_id in self._uidx

    def has_item(self, item_id: str) -> bool:
        return item_id in self._iidx

    def _indices(self, user_id: str, item_id: str) -> tuple[int, int]:
        try:
            u = self._uidx[user_id]
        except KeyError:
            raise CatalogError(f"unknown user_id {user_id!r}") from None
        try:
            i = self._iidx[item_id]
        except KeyError:
            raise CatalogError(f"unknown item_id {item_id!r}") from None
        return u, i

    def raw_score(self, user_id: str, item_id: str) -> float:
        u, i = self._indices(user_id, item_id)
        return float(
            self.global_bias
            + self.user_bias[u]
            + self.item_bias[i]
            + self.user_factors[u] @ self.item_factors[i]
        )

    def score(self, user_id: str, item_id: str) -> float:
        return min(5.0, max(1.0, self.raw_score(user_id, item_id)))

    def item_embedding(self, item_id: str) -> np.ndarray:
        if item_id not in self._iidx:
            raise CatalogError(f"unknown item_id {item_id!r}")
        return self.item_factors[self._iidx[item_id]]

    def predict_batch(self, u: np.ndarray, i: np.ndarray) -> np.ndarray:
        pred = (
            self.global_bias
            + self.user_bias[u]
            + self.item_bias[i]
            + np.einsum("nd,nd->n", self.user_factors[u], self.item_factors[i])
        )
        return np.clip(pred, 1.0, 5.0)


def score(scorer: Scorer, user_id: str, item_id: str) -> float:
    return scorer.score(user_id, item_id)


def _rmse(model: MFScorer, u, i, r) -> float:
    raw = (
        model.global_bias
        + model.user_bias[u]
        + model.item_bias[i]
        + np.einsum("nd,nd->n", model.user_factors[u], model.item_factors[i])
    )
    return float(np.sqrt(np.mean((r - raw) ** 2)))


def train_scorer(
    records: Sequence[InteractionRecord],
    dim: int = 16,
    epochs: int = 50,
    lr: float = 0.05,
    reg: float = 0.01,
    seed: int = 0,
    batch_size: int = 64,
    init_std: float = 0.1,
) -> MFScorer:
    """Fit an :class:`MFScorer` by mini-batch SGD on squared error.

    An epoch that would raise the training RMSE is rolled back and the step
    size halved, so ``rmse_history`` is non-increasing.
    """
    if not records:
        raise TrainingError("cannot train a scorer on an empty log")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if any(r.rating is None for r in records):
        raise TrainingError("records without ratings; run transform_steam_ratings first")
    rng = np.random.default_rng(seed)
    user_ids = sorted({r.user_id for r in records})
    item_ids = sorted({r.item_id for r in records})
    uidx = {x: k for k, x in enumerate(user_ids)}
    iidx = {x: k for k, x in enumerate(item_ids)}
    u = np.array([uidx[r.user_id] for r in records], dtype=np.int64)
    i = np.array([iidx[r.item_id] for r in records], dtype=np.int64)
    y = np.array([r.rating for r in records], dtype=np.float64)

    model = MFScorer(
        user_ids,
        item_ids,
        rng.normal(0.0, init_std, (len(user_ids), dim)),
        rng.normal(0.0, init_std, (len(item_ids), dim)),
        np.zeros(len(user_ids)),
        np.zeros(len(item_ids)),
        float(y.mean()),
    )
    prev = _rmse(model, u, i, y)
    model.rmse_history.append(prev)
    step = lr
    n = len(y)
    for epoch in range(1, epochs + 1):
        saved = (
            model.user_factors.copy(),
            model.item_factors.copy(),
            model.user_bias.copy(),
            model.item_bias.copy(),
        )
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            b = order[start : start + batch_size]
            ub, ib = u[b], i[b]
            pu, qi = model.user_factors[ub], model.item_factors[ib]
            err = y[b] - (
                model.global_bias
                + model.user_bias[ub]
                + model.item_bias[ib]
                + np.einsum("nd,nd->n", pu, qi)
            )
            np.add.at(model.user_bias, ub, step * (err - reg * model.user_bias[ub]))
            np.add.at(model.item_bias, ib, step * (err - reg * model.item_bias[ib]))
            np.add.at(model.user_factors, ub, step * (err[:, None] * qi - reg * pu))
            np.add.at(model.item_factors, ib, step * (err[:, None] * pu - reg * qi))
        cur = _rmse(model, u, i, y)
        if not math.isfinite(cur):
            raise TrainingError(f"training diverged at epoch {epoch} (rmse={cur})")
        if cur > prev + 1e-6:
            (model.user_factors, model.item_factors, model.user_bias, model.item_bias) = saved
            step *= 0.5
            continue
        prev = cur
        model.rmse_history.append(cur)
    return model


# ---------------------------------------------------------------------------
# catalog


class ItemCatalog:
    """Ordered, immutable collection of items; embeddings optional but uniform."""

    def __init__(self, items: Iterable[ItemRecord]):
        self._items: dict[str, ItemRecord] = {}
        for it in items:
            if it.item_id in self._items:
                raise CatalogError(f"duplicate item_id {it.item_id!r}")
            self._items[it.item_id] = it
        embs = [it.embedding for it in self._items.values()]
        present = [e for e in embs if e is not None]
        if present and len(present) != len(embs):
            raise CatalogError("either all items carry embeddings or none do")
        self.dim = int(present[0].shape[0]) if present else 0
        if present:
            if self.dim <= 0 or any(e.shape != (self.dim,) for e in present):
                raise CatalogError("embeddings must share one positive dimension")
            self._matrix = np.stack(present).astype(np.float64)
        else:
            self._matrix = None
        self._pos = {k: n for n, k in enumerate(self._items)}

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, item_id: object) -> bool:
        return item_id in self._items

    def __iter__(self):
        return iter(self._items.values())

    def __getitem__(self, item_id: str) -> ItemRecord:
        try:
            return self._items[item_id]
        except KeyError:
            raise CatalogError(f"unknown item_id {item_id!r}") from None

    @property
    def ids(self) -> list[str]:
        return list(self._items)

    @property
    def has_embeddings(self) -> bool:
        return self._matrix is not None

    def embedding(self, item_id: str) -> np.ndarray:
        if self._matrix is None:
            raise CatalogError("catalog has no embeddings attached")
        return self._matrix[self._pos[self[item_id].item_id]]

    def embedding_matrix(self, ids: Sequence[str] | None = None) -> np.ndarray:
        if self._matrix is None:
            raise CatalogError("catalog has no embeddings attached")
        if ids is None:
            return self._matrix
        return self._matrix[[self._pos[k] for k in ids]]

    def with_embeddings(self, source: Scorer | Mapping[str, np.ndarray]) -> "ItemCatalog":
        """Copy of the catalog restricted to items the source knows, with their vectors."""
        if isinstance(source, Mapping):
            lookup = source
            known = set(source)
        else:
            known = set(source.items)
            lookup = {k: source.item_embedding(k) for k in known}
        return ItemCatalog(
            replace(it, embedding=np.asarray(lookup[it.item_id], dtype=np.float64).copy())
            for it in self._items.values()
            if it.item_id in known
        )


def build_catalog(items: Mapping[str, ItemRecord], records: Iterable[InteractionRecord]) -> ItemCatalog:
    """Catalog of items that appear in ``records``, sorted by item_id."""
    used = sorted({r.item_id for r in records})
    return ItemCatalog(items.get(k, ItemRecord(k, k)) for k in used)


def item_distance(catalog: ItemCatalog, i: str, j: str) -> float:
    """Euclidean distance between two item embeddings."""
    return float(np.linalg.norm(catalog.embedding(i) - catalog.embedding(j)))


def distance_percentile(catalog: ItemCatalog, q: float) -> float:
    """``q``-th percentile of pairwise item distances; used to calibrate the quit threshold."""
    m = catalog.embedding_matrix()
    sq = np.sum(m * m, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * m @ m.T, 0.0)
    iu = np.triu_indices(len(m), k=1)
    if len(iu[0]) == 0:
        return 0.0
    return float(np.percentile(np.sqrt(d2[iu]), q))


# ---------------------------------------------------------------------------
# persistence


def save_snapshot(path: str | Path, catalog: ItemCatalog, scorer: MFScorer) -> None:
    """Write catalog metadata and the scorer parameters into one ``.npz``."""
    ids = catalog.ids
    np.savez(
        Path(path),
        format_version=np.array(SNAPSHOT_VERSION),
        item_ids=np.array(ids, dtype=str),
        titles=np.array([catalog[k].title for k in ids], dtype=str),
        categories=np.array([json.dumps(list(catalog[k].categories)) for k in ids], dtype=str),
        scorer_user_ids=np.array(scorer.user_ids, dtype=str),
        scorer_item_ids=np.array(scorer.item_ids, dtype=str),
        user_factors=scorer.user_factors,
        item_factors=scorer.item_factors,
        user_bias=scorer.user_bias,
        item_bias=scorer.item_bias,
        global_bias=np.array(scorer.global_bias),
        rmse_history=np.array(scorer.rmse_history, dtype=np.float64),
    )


def load_snapshot(path: str | Path) -> tuple[ItemCatalog, MFScorer]:
    path = Path(path)
    if not path.is_file():
        raise CatalogError(f"snapshot not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != SNAPSHOT_VERSION:
            raise CatalogError(f"unsupported snapshot version {version}")
        catalog = ItemCatalog(
            ItemRecord(str(k), str(t), tuple(json.loads(str(c))))
            for k, t, c in zip(z["item_ids"], z["titles"], z["categories"])
        )
        scorer = MFScorer(
            [str(x) for x in z["scorer_user_ids"]],
            [str(x) for x in z["scorer_item_ids"]],
            z["user_factors"].copy(),
            z["item_factors"].copy(),
            z["user_bias"].copy(),
            z["item_bias"].copy(),
            float(z["global_bias"]),
            [float(x) for x in z["rmse_history"]],
        )
    return catalog, scorer


def write_split_index(path: str | Path, split: DatasetSplit) -> None:
    Path(path).write_text(
        json.dumps({"train": [r.row for r in split.train], "test": [r.row for r in split.test]})
    )


# ---------------------------------------------------------------------------
# manifest


@dataclass
class DatasetManifest:
    path: Path
    schema: str = "generic"
    min_user: int = 5
    min_item: int = 5
    split: str = "chronological"

    @classmethod
    def from_file(cls, manifest_path: str | Path) -> "DatasetManifest":
        from billp._toml import load_toml

        manifest_path = Path(manifest_path)
        raw = load_toml(manifest_path).get("dataset")
        if not isinstance(raw, dict) or "path" not in raw:
            raise CatalogError(f"{manifest_path}: expected a [dataset] table with 'path'")
        log_path = Path(raw["path"])
        if not log_path.is_absolute():
            log_path = manifest_path.parent / log_path
        m = cls(
            log_path,
            raw.get("schema", "generic"),
            int(raw.get("min_user", 5)),
            int(raw.get("min_item", 5)),
            raw.get("split", "chronological"),
        )
        if m.split != "chronological":
            raise CatalogError(f"unsupported split rule {m.split!r}")
        return m


@dataclass
class PreparedData:
    log: LoadedLog
    filtered: list[InteractionRecord]
    split: DatasetSplit
    catalog: ItemCatalog


def prepare(manifest: DatasetManifest) -> PreparedData:
    """Load, transform, filter and split a log as the manifest declares."""
    log = load_log(manifest.path, manifest.schema)
    filtered = filter_min_interactions(log.records, manifest.min_user, manifest.min_item)
    if not filtered:
        raise CatalogError("filtering removed every record")
    return PreparedData(log, filtered, chronological_split(filtered), build_catalog(log.items, filtered))
