"""Retrieval quality metrics and the localization distance report.

Top-k accuracy counts queries whose first k retrieved references include a
relevant one. Average precision is the area under the per-query
precision-recall step curve. Hit rate checks whether the rank-1 reference is
in the query's covering set (which degenerates to the truth pair on
one-to-one datasets). The distance report buckets the top-1 localization
error in meters and scores success as strictly less than 10 m.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .index import RankedList
from .sampling import GeoPoint, distance

BUCKET_EDGES_M = (0.0, 10.0, 500.0, 1000.0, 200000.0)
SUCCESS_RADIUS_M = 10.0


@dataclass(frozen=True)
class QueryTruth:
    relevant_ids: frozenset[int]
    covering_ids: frozenset[int]
    truth_point: GeoPoint | None = None

    def __post_init__(self):
        if not self.relevant_ids:
            raise ValueError("relevant_ids must be non-empty")
        if not self.relevant_ids <= self.covering_ids:
            raise ValueError("relevant_ids must be a subset of covering_ids")

    @classmethod
    def one_to_one(cls, ref_id: int, point: GeoPoint | None = None) -> "QueryTruth":
        ids = frozenset([int(ref_id)])
        return cls(relevant_ids=ids, covering_ids=ids, truth_point=point)


GroundTruthTable = dict[int, QueryTruth]


def _truth_for(ranked: RankedList, truth: GroundTruthTable) -> QueryTruth:
    if ranked.query_id is None or ranked.query_id not in truth:
        raise ValueError(f"no ground truth for query {ranked.query_id}")
    return truth[ranked.query_id]


def rank_of_first_relevant(ranked: RankedList, relevant_ids: frozenset[int]) -> int | None:
    """1-based rank of the first relevant entry, None if absent."""
    for pos, (ref_id, _) in enumerate(ranked.entries, start=1):
        if ref_id in relevant_ids:
            return pos
    return None


def topk_accuracy(ranked: list[RankedList], truth: GroundTruthTable, k: int) -> float:
    """Fraction of queries with a relevant reference in the first k entries."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not ranked:
        raise ValueError("no queries")
    hits = 0
    for rl in ranked:
        if len(rl.entries) < k:
            raise ValueError(
                f"query {rl.query_id} has only {len(rl.entries)} entries, need {k}"
            )
        rel = _truth_for(rl, truth).relevant_ids
        if any(ref_id in rel for ref_id, _ in rl.entries[:k]):
            hits += 1
    return hits / len(ranked)


def top_percent_k(reference_count: int, percent: float = 1.0) -> int:
    """k for a top-X% metric; rounds up so k >= 1."""
    return max(1, math.ceil(reference_count * percent / 100.0))


def average_precision(ranked: RankedList, relevant_ids: frozenset[int]) -> float:
    """Sum over relevant hits of (recall step) x (precision at that rank)."""
    if not relevant_ids:
        raise ValueError("relevant_ids must be non-empty")
    present = {ref_id for ref_id, _ in ranked.entries}
    missing = relevant_ids - present
    if missing:
        raise ValueError(
            f"relevant ids {sorted(missing)} absent from ranking "
            f"of query {ranked.query_id}"
        )
    total = len(relevant_ids)
    hits = 0
    ap = 0.0
    for pos, (ref_id, _) in enumerate(ranked.entries, start=1):
        if ref_id in relevant_ids:
            hits += 1
            ap += (1.0 / total) * (hits / pos)
            if hits == total:
                break
    return ap


def mean_average_precision(ranked: list[RankedList], truth: GroundTruthTable) -> float:
    if not ranked:
        raise ValueError("no queries")
    return float(np.mean([
        average_precision(rl, _truth_for(rl, truth).relevant_ids) for rl in ranked
    ]))


def hit_rate(ranked: list[RankedList], truth: GroundTruthTable) -> float:
    """Fraction of queries whose rank-1 reference is in the covering set."""
    if not ranked:
        raise ValueError("no queries")
    hits = 0
    for rl in ranked:
        if not rl.entries:
            raise ValueError(f"query {rl.query_id} has an empty ranking")
        if rl.entries[0][0] in _truth_for(rl, truth).covering_ids:
            hits += 1
    return hits / len(ranked)


@dataclass
class QueryDistance:
    query_id: int
    top1_id: int
    distance_m: float
    first_relevant_rank: int | None


@dataclass
class DistanceReport:
    edges_m: tuple[float, ...]
    counts: list[int]
    success_fraction: float
    per_query: list[QueryDistance] = field(default_factory=list)


def distance_report(
    ranked: list[RankedList],
    truth: GroundTruthTable,
    reference_coords: dict[int, GeoPoint],
) -> DistanceReport:
    """Distance from each query's top-1 reference to its truth point,
    bucketed by BUCKET_EDGES_M; distances beyond the last edge land in the
    final bucket so the counts always partition the query set."""
    if not ranked:
        raise ValueError("no queries")
    counts = [0] * (len(BUCKET_EDGES_M) - 1)
    per_query = []
    successes = 0
    for rl in ranked:
        qt = _truth_for(rl, truth)
        if qt.truth_point is None:
            raise ValueError(f"query {rl.query_id} has no truth coordinates")
        top1_id = rl.entries[0][0]
        if top1_id not in reference_coords:
            raise ValueError(f"missing coordinates for reference id {top1_id}")
        d = distance(reference_coords[top1_id], qt.truth_point)
        bucket = len(counts) - 1
        for bi in range(len(counts)):
            if BUCKET_EDGES_M[bi] <= d < BUCKET_EDGES_M[bi + 1]:
                bucket = bi
                break
        counts[bucket] += 1
        if d < SUCCESS_RADIUS_M:
            successes += 1
        per_query.append(QueryDistance(
            query_id=rl.query_id,
            top1_id=top1_id,
            distance_m=d,
            first_relevant_rank=rank_of_first_relevant(rl, qt.relevant_ids),
        ))
    return DistanceReport(
        edges_m=BUCKET_EDGES_M,
        counts=counts,
        success_fraction=successes / len(ranked),
        per_query=per_query,
    )


def render_report(
    metrics: dict[str, float],
    report: DistanceReport | None = None,
    counts: dict[str, int] | None = None,
) -> str:
    """Structured text: one metric=value line each, then the bucket table."""
    lines = []
    for name, value in (counts or {}).items():
        lines.append(f"{name}={value}")
    for name, value in metrics.items():
        lines.append(f"{name}={value:.6f}")
    if report is not None:
        lines.append(f"success_rate_10m={report.success_fraction:.6f}")
        for bi in range(len(report.counts)):
            lo = report.edges_m[bi]
            hi = report.edges_m[bi + 1]
            lines.append(f"bucket[{lo:g},{hi:g})={report.counts[bi]}")
    return "\n".join(lines) + "\n"


def render_per_query_dump(report: DistanceReport) -> str:
    """Line-oriented dump: query_id top1_id distance_m rank_of_first_relevant."""
    lines = ["# query_id top1_id distance_m first_relevant_rank"]
    for q in report.per_query:
        rank = q.first_relevant_rank if q.first_relevant_rank is not None else "-"
        lines.append(f"{q.query_id} {q.top1_id} {q.distance_m:.3f} {rank}")
    return "\n".join(lines) + "\n"
