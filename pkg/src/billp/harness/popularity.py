"""Which popularity tiers a policy's recommendations fall into."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from billp.agent import EpisodeTrace
from billp.catalog import InteractionRecord


@dataclass
class PopularityBuckets:
    bucket_of_item: dict[str, int]
    recommended_share: dict[str, list[float]]  # policy -> share per bucket 1..5
    bucket_sizes: list[int]

    def to_dict(self) -> dict:
        return {
            "bucket_sizes": self.bucket_sizes,
            "recommended_share": self.recommended_share,
            "bucket_of_item": self.bucket_of_item,
        }


def assign_buckets(item_ids: Iterable[str], records: Iterable[InteractionRecord], n_buckets: int = 5) -> dict[str, int]:
    """Rank items by interaction count (desc, ties by id) and cut into near-equal groups.

    Earlier (more popular) buckets absorb the remainder.
    """
    freq = Counter(r.item_id for r in records)
    ranked = sorted(set(item_ids), key=lambda k: (-freq[k], k))
    base, extra = divmod(len(ranked), n_buckets)
    out, pos = {}, 0
    for b in range(n_buckets):
        size = base + (1 if b < extra else 0)
        for k in ranked[pos : pos + size]:
            out[k] = b + 1
        pos += size
    return out


def popularity_analysis(
    traces: Mapping[str, Sequence[EpisodeTrace]],
    item_ids: Iterable[str],
    records: Iterable[InteractionRecord],
    n_buckets: int = 5,
    normalize: str = "events",
) -> PopularityBuckets:
    """Share of recommendations per popularity bucket, for each policy.

    ``normalize="events"`` counts every recommendation; ``"distinct"`` counts
    each recommended item once per policy.
    """
    if not any(traces.values()):
        raise ValueError("no traces to analyse")
    if normalize not in ("events", "distinct"):
        raise ValueError("normalize must be 'events' or 'distinct'")
    buckets = assign_buckets(item_ids, records, n_buckets)
    sizes = [sum(1 for b in buckets.values() if b == k) for k in range(1, n_buckets + 1)]
    shares = {}
    for policy, ts in traces.items():
        actions = [a for t in ts for a in t.actions if a in buckets]
        if normalize == "distinct":
            actions = sorted(set(actions))
        counts = Counter(buckets[a] for a in actions)
        total = sum(counts.values())
        shares[policy] = [counts[k] / total if total else 0.0 for k in range(1, n_buckets + 1)]
    return PopularityBuckets(buckets, shares, sizes)
