import math

import numpy as np
import pytest

from cvmix.evaluation import (
    BUCKET_EDGES_M,
    QueryTruth,
    average_precision,
    distance_report,
    hit_rate,
    mean_average_precision,
    rank_of_first_relevant,
    render_per_query_dump,
    render_report,
    top_percent_k,
    topk_accuracy,
)
from cvmix.index import RankedList
from cvmix.sampling import GeoPoint


def ranked_from_ids(query_id, ids):
    scores = [1.0 - 0.01 * i for i in range(len(ids))]
    return RankedList(query_id=query_id, entries=list(zip(ids, scores)))


def make_case(first_relevant_ranks, n_refs=10):
    """One-to-one queries whose first relevant id sits at the given rank."""
    ranked, truth = [], {}
    for q, rank in enumerate(first_relevant_ranks):
        rel = 1000 + q
        others = [5000 + 100 * q + j for j in range(n_refs - 1)]
        ids = others[: rank - 1] + [rel] + others[rank - 1:]
        ranked.append(ranked_from_ids(q, ids[:n_refs]))
        truth[q] = QueryTruth.one_to_one(rel)
    return ranked, truth


def topk_oracle(ranked, truth, k):
    hits = 0
    for rl in ranked:
        rel = truth[rl.query_id].relevant_ids
        hits += any(i in rel for i, _ in rl.entries[:k])
    return hits / len(ranked)


def ap_oracle(ids, relevant):
    """PR step-curve area: sum of precision at each new-recall rank."""
    total, hits, ap = len(relevant), 0, 0.0
    prev_recall = 0.0
    for pos, ref in enumerate(ids, start=1):
        if ref in relevant:
            hits += 1
            recall = hits / total
            ap += (recall - prev_recall) * (hits / pos)
            prev_recall = recall
    return ap


class TestTopK:
    def test_rank_example_top1(self):
        ranked, truth = make_case([1, 2, 6, 3])
        assert topk_accuracy(ranked, truth, 1) == 0.25

    def test_rank_example_top5(self):
        ranked, truth = make_case([1, 2, 6, 3])
        assert topk_accuracy(ranked, truth, 5) == 0.75

    def test_full_k_is_one(self):
        ranked, truth = make_case([4, 9, 2], n_refs=10)
        assert topk_accuracy(ranked, truth, 10) == 1.0

    def test_monotone_in_k(self):
        ranked, truth = make_case([3, 1, 8, 5, 2], n_refs=12)
        vals = [topk_accuracy(ranked, truth, k) for k in range(1, 13)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))

    def test_k_longer_than_list(self):
        ranked, truth = make_case([1], n_refs=4)
        with pytest.raises(ValueError):
            topk_accuracy(ranked, truth, 5)

    def test_top_percent_k_ceils(self):
        assert top_percent_k(100) == 1
        assert top_percent_k(101) == 2
        assert top_percent_k(1) == 1
        assert top_percent_k(12800) == 128


class TestAveragePrecision:
    def test_rank1_perfect(self):
        rl = ranked_from_ids(0, [7, 1, 2])
        assert average_precision(rl, frozenset([7])) == 1.0

    def test_rank2_half(self):
        rl = ranked_from_ids(0, [1, 7, 2])
        assert average_precision(rl, frozenset([7])) == 0.5

    def test_two_relevant_at_1_and_3(self):
        rl = ranked_from_ids(0, [10, 1, 11, 2])
        ap = average_precision(rl, frozenset([10, 11]))
        assert ap == pytest.approx((1.0 + 2.0 / 3.0) / 2.0, abs=1e-12)
        assert ap == pytest.approx(0.8333, abs=5e-5)

    def test_single_relevant_closed_form(self):
        for rank in range(1, 15):
            ranked, truth = make_case([rank], n_refs=15)
            ap = average_precision(ranked[0], truth[0].relevant_ids)
            assert ap == pytest.approx(1.0 / rank, abs=1e-12)

    def test_matches_pr_curve_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(5, 40))
            ids = list(rng.choice(1000, size=n, replace=False))
            n_rel = int(rng.integers(1, min(6, n)))
            relevant = frozenset(int(i) for i in rng.choice(ids, size=n_rel, replace=False))
            rl = ranked_from_ids(0, ids)
            assert average_precision(rl, relevant) == pytest.approx(
                ap_oracle(ids, relevant), abs=1e-12)

    def test_absent_relevant_errors(self):
        rl = ranked_from_ids(0, [1, 2, 3])
        with pytest.raises(ValueError, match="absent"):
            average_precision(rl, frozenset([99]))

    def test_mean_ap(self):
        ranked, truth = make_case([1, 2, 4])
        expected = (1.0 + 0.5 + 0.25) / 3.0
        assert mean_average_precision(ranked, truth) == pytest.approx(expected, abs=1e-12)


class TestHitRate:
    def test_one_to_one_equals_top1(self):
        ranked, truth = make_case([1, 2, 6, 3])
        assert hit_rate(ranked, truth) == topk_accuracy(ranked, truth, 1)

    def test_covering_membership(self):
        rl = ranked_from_ids(0, [55, 1, 2])
        truth = {0: QueryTruth(relevant_ids=frozenset([44]),
                               covering_ids=frozenset([44, 55]))}
        assert hit_rate([rl], truth) == 1.0

    def test_random_vs_membership_oracle(self):
        rng = np.random.default_rng(1)
        ranked, truth = [], {}
        for q in range(50):
            ids = [int(i) for i in rng.choice(200, size=10, replace=False)]
            rel = int(rng.choice(ids if rng.random() < 0.5 else range(200)))
            cover = {rel} | {int(i) for i in rng.choice(200, size=3)}
            ranked.append(ranked_from_ids(q, ids if rel in ids else ids[:-1] + [rel]))
            truth[q] = QueryTruth(relevant_ids=frozenset([rel]),
                                  covering_ids=frozenset(cover))
        oracle = sum(rl.entries[0][0] in truth[rl.query_id].covering_ids
                     for rl in ranked) / len(ranked)
        assert hit_rate(ranked, truth) == oracle

    def test_hit_rate_at_least_top1(self):
        rng = np.random.default_rng(2)
        for trial in range(10):
            ranked, truth = [], {}
            for q in range(20):
                ids = [int(i) for i in rng.choice(100, size=8, replace=False)]
                rel = ids[int(rng.integers(0, 8))]
                cover = frozenset({rel} | {int(i) for i in rng.choice(100, size=2)})
                ranked.append(ranked_from_ids(q, ids))
                truth[q] = QueryTruth(relevant_ids=frozenset([rel]), covering_ids=cover)
            assert hit_rate(ranked, truth) >= topk_accuracy(ranked, truth, 1)


class TestDistanceReport:
    def grid_points(self):
        origin = GeoPoint.wgs84(0.0, 0.0)
        offset_300m = GeoPoint.wgs84(0.0, 300.0 / 111194.92664455873)
        return origin, offset_300m

    def test_exact_match_zero_bucket(self):
        origin, _ = self.grid_points()
        rl = ranked_from_ids(0, [10, 11])
        truth = {0: QueryTruth.one_to_one(10, origin)}
        coords = {10: origin, 11: origin}
        rep = distance_report([rl], truth, coords)
        assert rep.counts[0] == 1
        assert rep.per_query[0].distance_m == 0.0
        assert rep.success_fraction == 1.0

    def test_300m_bucket(self):
        origin, far = self.grid_points()
        rl = ranked_from_ids(0, [11, 10])
        truth = {0: QueryTruth.one_to_one(10, origin)}
        coords = {10: origin, 11: far}
        rep = distance_report([rl], truth, coords)
        assert rep.counts == [0, 1, 0, 0]
        assert rep.success_fraction == 0.0
        assert rep.per_query[0].first_relevant_rank == 2

    def test_counts_partition(self):
        rng = np.random.default_rng(3)
        ranked, truth, coords = [], {}, {}
        for q in range(40):
            top_id = 100 + q
            rel_id = 200 + q
            pt = GeoPoint.wgs84(float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1)))
            top_pt = GeoPoint.wgs84(
                float(pt.lat + rng.uniform(-0.01, 0.01)),
                float(pt.lon + rng.uniform(-0.01, 0.01)),
            )
            ranked.append(ranked_from_ids(q, [top_id, rel_id]))
            truth[q] = QueryTruth.one_to_one(rel_id, pt)
            coords[top_id] = top_pt
            coords[rel_id] = pt
        rep = distance_report(ranked, truth, coords)
        assert sum(rep.counts) == 40
        assert rep.edges_m == BUCKET_EDGES_M

    def test_missing_coords_names_reference(self):
        origin, _ = self.grid_points()
        rl = ranked_from_ids(0, [10])
        truth = {0: QueryTruth.one_to_one(10, origin)}
        with pytest.raises(ValueError, match="10"):
            distance_report([rl], truth, {})


class TestRelabelInvariance:
    def test_consistent_relabel_preserves_metrics(self):
        ranked, truth = make_case([1, 3, 2, 7])
        shift = lambda i: i + 100000
        ranked2 = [RankedList(rl.query_id, [(shift(i), s) for i, s in rl.entries])
                   for rl in ranked]
        truth2 = {q: QueryTruth(
            relevant_ids=frozenset(shift(i) for i in t.relevant_ids),
            covering_ids=frozenset(shift(i) for i in t.covering_ids))
            for q, t in truth.items()}
        for k in (1, 3, 5):
            assert topk_accuracy(ranked, truth, k) == topk_accuracy(ranked2, truth2, k)
        assert hit_rate(ranked, truth) == hit_rate(ranked2, truth2)
        assert mean_average_precision(ranked, truth) == mean_average_precision(ranked2, truth2)


class TestRendering:
    def test_report_lines(self):
        origin = GeoPoint.wgs84(0.0, 0.0)
        rl = ranked_from_ids(0, [10, 11])
        truth = {0: QueryTruth.one_to_one(10, origin)}
        rep = distance_report([rl], truth, {10: origin, 11: origin})
        text = render_report({"top1": 1.0}, rep, counts={"queries": 1})
        assert "queries=1" in text
        assert "top1=1.000000" in text
        assert "bucket[0,10)=1" in text
        assert "bucket[1000,200000)=0" in text
        assert "success_rate_10m=1.000000" in text

    def test_dump_lines(self):
        origin = GeoPoint.wgs84(0.0, 0.0)
        rl = ranked_from_ids(5, [10, 11])
        truth = {5: QueryTruth.one_to_one(10, origin)}
        rep = distance_report([rl], truth, {10: origin, 11: origin})
        dump = render_per_query_dump(rep)
        assert dump.splitlines()[1].startswith("5 10 0.000 1")

    def test_rank_of_first_relevant(self):
        rl = ranked_from_ids(0, [4, 5, 6])
        assert rank_of_first_relevant(rl, frozenset([6])) == 3
        assert rank_of_first_relevant(rl, frozenset([99])) is None
