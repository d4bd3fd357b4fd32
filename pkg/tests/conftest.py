import csv
from pathlib import Path

import numpy as np
import pytest

from billp.catalog import InteractionRecord, ItemCatalog, ItemRecord, MFScorer
from billp.env import EnvConfig, RecEnv


def bias_scorer(scores: dict[tuple[str, str], float] | None = None, users=("u",), items=(), dim: int = 1) -> MFScorer:
    """Scorer whose per-(user, item) value is set through item biases (one user) or factors."""
    items = list(items)
    users = list(users)
    if scores is None:
        scores = {}
    if len(users) == 1:
        ib = np.array([scores.get((users[0], k), 3.0) - 3.0 for k in items])
        return MFScorer(users, items, np.zeros((1, dim)), np.zeros((len(items), dim)), np.zeros(1), ib, 3.0)
    # general case: one-hot user factors, item factors carry the per-user score
    uf = np.eye(len(users))
    itf = np.array([[scores.get((u, k), 3.0) - 3.0 for u in users] for k in items])
    return MFScorer(users, items, uf, itf, np.zeros(len(users)), np.zeros(len(items)), 3.0)


def make_env(
    embeddings: dict[str, np.ndarray],
    item_scores: dict[str, float],
    titles: dict[str, str] | None = None,
    categories: dict[str, tuple] | None = None,
    warm: dict[str, list[str]] | None = None,
    user: str = "u",
    **cfg,
) -> RecEnv:
    ids = list(embeddings)
    titles = titles or {k: f"Item {k}" for k in ids}
    categories = categories or {}
    catalog = ItemCatalog(ItemRecord(k, titles[k], categories.get(k, ("unknown",))) for k in ids).with_embeddings(
        {k: np.asarray(v, dtype=float) for k, v in embeddings.items()}
    )
    scorer = bias_scorer({(user, k): item_scores[k] for k in ids}, users=(user,), items=ids)
    return RecEnv(catalog, scorer, warm or {user: []}, EnvConfig(**cfg))


def write_csv(path: Path, header: list[str], rows: list[list]) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def rec(user, item, rating, ts, row=-1) -> InteractionRecord:
    return InteractionRecord(user, item, rating, ts, row)


@pytest.fixture
def toy_world(tmp_path):
    from billp.toy import ToyWorldConfig, write_toy_world

    return write_toy_world(tmp_path / "world", ToyWorldConfig(n_users=30, n_items=40), train_episodes=6, eval_episodes=4, seeds=2, max_rounds=15)
