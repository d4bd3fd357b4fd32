"""A small synthetic Steam-style world for smoke runs, tests and demos.

Users have two favourite genres; playtime on a favourite-genre game is
usually long (over 3 hours, so rated 5) and otherwise short (rated 2).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from billp.gateway import StubScript

GENRES = ("RPG", "Strategy", "Puzzle", "Racing", "Shooter", "Simulation", "Platformer", "Horror")
_ADJ = ("Crimson", "Silent", "Iron", "Hollow", "Bright", "Frozen", "Wild", "Lost", "Golden", "Shadow", "Broken", "Hidden")
_NOUN = ("Harbor", "Crown", "Signal", "Orchard", "Engine", "Frontier", "Lantern", "Vault", "Circuit", "Garden", "Tide", "Summit")


@dataclass(frozen=True)
class ToyWorldConfig:
    n_users: int = 60
    n_items: int = 80
    min_len: int = 12
    max_len: int = 20
    p_favourite: float = 0.7
    seed: int = 0


def default_stub_script() -> StubScript:
    ref = resources.files("billp.gateway") / "assets" / "default_stub.toml"
    with resources.as_file(ref) as path:
        return StubScript.from_file(path)


def make_titles(n: int, rng: np.random.Generator) -> list[str]:
    pairs = [(a, b) for a in _ADJ for b in _NOUN]
    order = rng.permutation(len(pairs))
    titles = []
    for k in range(n):
        a, b = pairs[order[k % len(pairs)]]
        titles.append(f"{a} {b}" + (f" {k // len(pairs) + 1}" if k >= len(pairs) else ""))
    return titles


def write_toy_log(path: str | Path, cfg: ToyWorldConfig = ToyWorldConfig()) -> Path:
    """Write a Steam-schema CSV (user_id, item_id, playtime, timestamp, title, categories)."""
    rng = np.random.default_rng(cfg.seed)
    titles = make_titles(cfg.n_items, rng)
    genre_of = [GENRES[k % len(GENRES)] for k in range(cfg.n_items)]
    by_genre = {g: [k for k in range(cfg.n_items) if genre_of[k] == g] for g in GENRES}
    rows = []
    for u in range(cfg.n_users):
        favs = list(rng.choice(len(GENRES), size=2, replace=False))
        fav_items = [k for g in favs for k in by_genre[GENRES[g]]]
        n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        ts = 1_600_000_000 + int(rng.integers(0, 10_000_000))
        seen: set[int] = set()
        while len(seen) < n:
            pool = fav_items if rng.random() < cfg.p_favourite else range(cfg.n_items)
            k = int(rng.choice(list(pool)))
            if k in seen:
                continue
            seen.add(k)
            liked = k in fav_items
            hours = float(rng.lognormal(2.0 if liked else 0.2, 0.6))
            ts += int(rng.integers(3_600, 200_000))
            rows.append((f"u{u:03d}", f"g{k:03d}", round(hours, 2), ts, titles[k], genre_of[k]))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "item_id", "playtime", "timestamp", "title", "categories"])
        w.writerows(rows)
    return path


EXPERIMENT_TOML = """\
version = 1
workdir = "runs"

[data]
manifest = "manifest.toml"

[env]
window = 4
beta_percentile = {beta_percentile}
reward_floor = 2.0
max_rounds = {max_rounds}

[agent]
K = 2
tau_A = 0.01
tau_C = 0.1
gamma = 0.5
warm_start_len = 5

[backend]
kind = "stub"

[scorer]
dim = 8
epochs = 60
lr = 0.05

[experiment]
train_episodes = {train_episodes}
eval_episodes = {eval_episodes}
seeds = {seeds}
"""


def write_toy_world(
    root: str | Path,
    cfg: ToyWorldConfig = ToyWorldConfig(),
    train_episodes: int = 20,
    eval_episodes: int = 10,
    seeds: int = 3,
    max_rounds: int = 30,
    beta_percentile: float = 5.0,
) -> Path:
    """Create ``root/{log.csv, manifest.toml, experiment.toml}``; returns the experiment config path."""
    root = Path(root)
    write_toy_log(root / "log.csv", cfg)
    (root / "manifest.toml").write_text(
        '[dataset]\npath = "log.csv"\nschema = "steam"\nmin_user = 5\nmin_item = 5\nsplit = "chronological"\n'
    )
    exp = root / "experiment.toml"
    exp.write_text(
        EXPERIMENT_TOML.format(
            beta_percentile=beta_percentile, max_rounds=max_rounds,
            train_episodes=train_episodes, eval_episodes=eval_episodes, seeds=seeds,
        )
    )
    return exp
