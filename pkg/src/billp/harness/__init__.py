"""Experiment orchestration: training and evaluation loops, metrics, oracles and the CLI."""

from billp.harness.metrics import EpisodeMetrics, MetricsReport, aggregate, check_identities, episode_metrics
from billp.harness.oracle import VarianceRow, critic_variance_study, discounted_return, mc_state_value, rollout
from billp.harness.popularity import PopularityBuckets, assign_buckets, popularity_analysis

__all__ = [
    "EpisodeMetrics",
    "MetricsReport",
    "PopularityBuckets",
    "VarianceRow",
    "aggregate",
    "assign_buckets",
    "check_identities",
    "critic_variance_study",
    "discounted_return",
    "episode_metrics",
    "mc_state_value",
    "popularity_analysis",
    "rollout",
]
