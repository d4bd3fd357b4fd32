"""Trajectory metrics: length, mean per-round reward, cumulative reward."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from billp.agent import EpisodeTrace


@dataclass(frozen=True)
class EpisodeMetrics:
    length: int
    r_each: float
    r_traj: float


def episode_metrics(trace: EpisodeTrace | Sequence[float]) -> EpisodeMetrics:
    rewards = trace.rewards if isinstance(trace, EpisodeTrace) else list(trace)
    if not rewards:
        raise ValueError("an episode with no rewards has no metrics")
    r_traj = float(sum(rewards))
    return EpisodeMetrics(len(rewards), r_traj / len(rewards), r_traj)


@dataclass
class MetricsReport:
    len_mean: float
    len_std: float
    r_each_mean: float
    r_each_std: float
    r_traj_mean: float
    r_traj_std: float
    n_episodes: int
    n_seeds: int
    per_episode: list[tuple[int, float, float]] = field(default_factory=list)
    per_seed: list[dict] = field(default_factory=list)
    label: str = ""
    seeds: list[int] = field(default_factory=list)
    config_hash: str = ""
    n_aborted: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        d["per_episode"] = [tuple(x) for x in d["per_episode"]]
        return cls(**d)

    def consistency_gap(self) -> float:
        """Relative gap |Len x R_each - R_traj| / R_traj between the reported means."""
        return abs(self.len_mean * self.r_each_mean - self.r_traj_mean) / abs(self.r_traj_mean)

    def table(self) -> str:
        head = f"{'policy':<12} {'Len':>18} {'R_each':>18} {'R_traj':>20}"
        row = (
            f"{self.label or '-':<12} "
            f"{self.len_mean:>8.3f} ± {self.len_std:<7.3f} "
            f"{self.r_each_mean:>8.3f} ± {self.r_each_std:<7.3f} "
            f"{self.r_traj_mean:>9.3f} ± {self.r_traj_std:<8.3f}"
        )
        return f"{head}\n{row}\n({self.n_episodes} episodes over {self.n_seeds} seed(s), {self.n_aborted} aborted)"


def aggregate(per_seed: Sequence[Sequence[EpisodeMetrics]], seeds: Sequence[int] = (), label: str = "") -> MetricsReport:
    """Mean over episodes within a seed, then mean and population std across seeds."""
    per_seed = [list(s) for s in per_seed if s]
    if not per_seed:
        raise ValueError("no episodes to aggregate")
    means = np.array(
        [[np.mean([m.length for m in s]), np.mean([m.r_each for m in s]), np.mean([m.r_traj for m in s])] for s in per_seed]
    )
    mu = means.mean(axis=0)
    sd = means.std(axis=0)
    return MetricsReport(
        float(mu[0]), float(sd[0]), float(mu[1]), float(sd[1]), float(mu[2]), float(sd[2]),
        n_episodes=sum(len(s) for s in per_seed),
        n_seeds=len(per_seed),
        per_episode=[(m.length, m.r_each, m.r_traj) for s in per_seed for m in s],
        per_seed=[{"len": float(a), "r_each": float(b), "r_traj": float(c)} for a, b, c in means],
        label=label,
        seeds=list(seeds),
    )


def check_identities(report: MetricsReport, tol: float = 1e-9) -> None:
    """Raise if any episode violates R_traj == R_each * Len."""
    for length, r_each, r_traj in report.per_episode:
        if abs(r_each * length - r_traj) > tol * max(1.0, abs(r_traj)):
            raise AssertionError(f"metric identity broken: {length} x {r_each} != {r_traj}")
