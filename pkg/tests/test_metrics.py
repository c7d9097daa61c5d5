import itertools
import math

import numpy as np
import pytest

from mir.data import ItemRecord, RankingInstance, SynthConfig, synth_generate
from mir.metrics import (ClickCounts, EvalReport, PropensityTable, count_clicks,
                         dendcg_at_k, estimate_propensity, evaluate_ranking_fn,
                         map_at_k, ndcg_at_k, utility_at_k)

from reference import ref_ap_at_k, ref_dendcg_at_k, ref_ndcg_at_k


def log_instance(cats, positions, labels, user_id=1):
    cands = [ItemRecord(item_id=i, cat_feats=(c,), dense_feats=(),
                        label=int(y), logged_position=int(p))
             for i, (c, p, y) in enumerate(zip(cats, positions, labels))]
    return RankingInstance(user_id=user_id, profile=(0,), candidates=cands, history=[])


class TestEstimatePropensity:
    def test_definition_without_smoothing(self):
        counts = ClickCounts()
        for _ in range(100):
            counts.add(category=3, position=1, clicked=1)
        for _ in range(50):
            counts.add(category=3, position=2, clicked=1)
        table = estimate_propensity(counts, p_min=0.01, smoothing=0.0)
        assert table.lookup(3, 2) == pytest.approx(0.5)
        assert table.lookup(3, 1) == 1.0

    def test_clipped_to_one(self):
        counts = ClickCounts()
        for _ in range(10):
            counts.add(1, 1, 1)
        for _ in range(20):
            counts.add(1, 2, 1)
        table = estimate_propensity(counts, smoothing=0.0)
        assert table.lookup(1, 2) == 1.0

    def test_clip_floor(self):
        counts = ClickCounts()
        for _ in range(1000):
            counts.add(1, 1, 1)
        counts.add(1, 5, 1)
        table = estimate_propensity(counts, p_min=0.05, smoothing=0.0)
        assert table.lookup(1, 5) == 0.05

    def test_category_without_first_position_clicks_falls_back(self):
        counts = ClickCounts()
        for _ in range(100):
            counts.add(1, 1, 1)
        for _ in range(40):
            counts.add(1, 2, 1)
        counts.add(7, 2, 1)  # category 7 never clicked at position 1
        table = estimate_propensity(counts, smoothing=0.0)
        assert (7, 2) not in table.values
        assert table.lookup(7, 2) == table.lookup(999, 2) == table.marginal[2]

    def test_unseen_position_falls_back_to_floor(self):
        counts = ClickCounts()
        counts.add(1, 1, 1)
        table = estimate_propensity(counts, p_min=0.2, smoothing=0.0)
        assert table.lookup(1, 42) == 0.2

    def test_recovers_planted_bias(self):
        config = SynthConfig(num_users=30000, n=5, m=0, vocab_sizes=(12,),
                             user_vocab_sizes=(8,), d_dense=0, seed=7)
        insts, truth = synth_generate(config)
        table = estimate_propensity(insts, p_min=0.01, smoothing=1.0)
        for pos in range(1, 6):
            assert table.marginal[pos] == pytest.approx(truth.position_bias[pos - 1],
                                                        abs=0.05)

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            estimate_propensity(ClickCounts(), p_min=0.0)
        with pytest.raises(ValueError):
            estimate_propensity(ClickCounts(), smoothing=-1)


class TestNdcg:
    def test_single_click_ranked_first(self):
        assert ndcg_at_k([0, 1], [1, 0], 1) == 1.0

    def test_analytic_two_items(self):
        value = ndcg_at_k([0, 1], [0, 1], 2)
        assert value == pytest.approx(1.0 / math.log2(3.0), rel=1e-12)

    def test_zero_click_list_skipped(self):
        assert ndcg_at_k([0, 1], [0, 0], 2) is None

    def test_k_validation(self):
        with pytest.raises(ValueError):
            ndcg_at_k([0], [1], 0)

    def test_non_permutation_rejected(self):
        with pytest.raises(ValueError):
            ndcg_at_k([0, 0], [1, 0], 1)

    def test_exhaustive_against_bruteforce(self):
        for length in range(1, 7):
            for labels in itertools.product([0, 1], repeat=length):
                if sum(labels) == 0:
                    continue
                ranking = list(range(length))
                for k in range(1, length + 1):
                    got = ndcg_at_k(ranking, list(labels), k)
                    expected = ref_ndcg_at_k(list(labels), k)
                    assert got == pytest.approx(expected, abs=1e-12), (labels, k)

    def test_perfect_iff_clicks_on_top(self):
        assert ndcg_at_k([2, 0, 1], [1, 0, 1], 3) == pytest.approx(1.0)
        assert ndcg_at_k([1, 2, 0], [1, 0, 1], 3) < 1.0


class TestMap:
    def test_click_at_first_position(self):
        for k in (1, 2, 5):
            assert map_at_k([0, 1, 2], [1, 0, 0], k) == 1.0

    def test_analytic_example(self):
        assert map_at_k([0, 1, 2], [1, 0, 1], 3) == pytest.approx((1.0 + 2.0 / 3.0) / 2)

    def test_zero_click_skipped(self):
        assert map_at_k([0], [0], 1) is None

    def test_exhaustive_against_definition(self):
        for length in range(1, 7):
            for labels in itertools.product([0, 1], repeat=length):
                if sum(labels) == 0:
                    continue
                for perm in itertools.permutations(range(length)):
                    ranked = [labels[i] for i in perm]
                    for k in (1, 3, length):
                        got = map_at_k(list(perm), list(labels), k)
                        assert got == pytest.approx(ref_ap_at_k(ranked, k), abs=1e-12)
                    break  # one representative permutation per label pattern


class TestDendcg:
    def test_unit_propensities_reduce_to_ndcg(self):
        table = PropensityTable.constant(1.0)
        rng = np.random.default_rng(0)
        for _ in range(30):
            length = int(rng.integers(1, 7))
            labels = rng.integers(0, 2, length)
            if labels.sum() == 0:
                labels[0] = 1
            ranking = rng.permutation(length)
            cats = rng.integers(1, 4, length)
            positions = rng.permutation(length) + 1
            for k in (1, 2, length):
                assert dendcg_at_k(ranking, labels, positions, cats, table, k) == \
                    ndcg_at_k(ranking, labels, k)

    def test_normalization_cancels_single_click(self):
        table = PropensityTable.constant(0.5)
        assert dendcg_at_k([0, 1], [1, 0], [2, 1], [1, 1], table, 1) == 1.0

    def test_bruteforce_oracle_small_lists(self):
        rng = np.random.default_rng(1)
        table = PropensityTable(values={(1, 1): 1.0, (1, 2): 0.5, (1, 3): 0.25,
                                        (2, 1): 0.9, (2, 2): 0.45, (2, 3): 0.3},
                                marginal={1: 1.0, 2: 0.5, 3: 0.3}, p_min=0.05,
                                smoothing=0.0)
        for _ in range(40):
            length = int(rng.integers(1, 6))
            labels = rng.integers(0, 2, length)
            if labels.sum() == 0:
                labels[rng.integers(length)] = 1
            cats = rng.integers(1, 3, length)
            positions = rng.permutation(length) + 1
            ranking = rng.permutation(length)
            gains = [labels[i] / table.lookup(int(cats[i]), int(positions[i]))
                     for i in range(length)]
            ranked_gains = [gains[i] for i in ranking]
            for k in range(1, length + 1):
                got = dendcg_at_k(ranking, labels, positions, cats, table, k)
                expected = ref_dendcg_at_k(ranked_gains, k)
                assert got == pytest.approx(expected, abs=1e-12)

    def test_sorted_normalizer_equals_bruteforce(self):
        # the production normalizer sorts gains; verify optimality on 6! orders
        gains = [3.0, 1.0, 2.0, 0.0, 5.0, 4.0]
        best = max(sum(g / math.log2(r + 2) for r, g in enumerate(p[:4]))
                   for p in itertools.permutations(gains))
        ideal = sum(g / math.log2(r + 2)
                    for r, g in enumerate(sorted(gains, reverse=True)[:4]))
        assert ideal == pytest.approx(best, rel=1e-12)


class TestUtility:
    def test_identity_positions_count_clicks(self):
        table = PropensityTable(values={(1, p): 1.0 / p for p in range(1, 4)},
                                marginal={p: 1.0 / p for p in range(1, 4)},
                                p_min=0.01, smoothing=0.0)
        labels = [1, 0, 1]
        ranking = [0, 1, 2]  # new positions equal logged positions
        positions = [1, 2, 3]
        cats = [1, 1, 1]
        assert utility_at_k(ranking, labels, positions, cats, None, table, 3) == 2.0
        assert utility_at_k(ranking, labels, positions, cats, None, table, 1) == 1.0

    def test_promoted_click_gains_weight(self):
        table = PropensityTable(values={(1, 1): 1.0, (1, 2): 0.5},
                                marginal={1: 1.0, 2: 0.5}, p_min=0.01, smoothing=0.0)
        # one click logged at position 2 (prop 0.5), reranked to position 1
        value = utility_at_k([1, 0], [0, 1], [1, 2], [1, 1], None, table, 1)
        assert value == pytest.approx(2.0)

    def test_bids_scale_contributions(self):
        table = PropensityTable(values={(1, 1): 1.0, (1, 2): 0.5},
                                marginal={1: 1.0, 2: 0.5}, p_min=0.01, smoothing=0.0)
        value = utility_at_k([1, 0], [0, 1], [1, 2], [1, 1], [1.0, 3.0], None or table, 1)
        assert value == pytest.approx(6.0)

    def test_zero_click_list_contributes_zero(self):
        table = PropensityTable.constant(1.0)
        assert utility_at_k([0, 1], [0, 0], [1, 2], [1, 1], None, table, 2) == 0.0


class TestEvaluateAndReport:
    def test_report_schema_and_aggregation(self):
        instances = [
            log_instance([1, 1, 2], [1, 2, 3], [1, 0, 0]),
            log_instance([2, 1, 1], [1, 2, 3], [0, 0, 1]),
            log_instance([1, 2, 1], [1, 2, 3], [0, 0, 0]),  # skipped by rank metrics
        ]
        table = PropensityTable.constant(1.0)
        report = evaluate_ranking_fn(lambda inst: list(range(inst.n)),
                                     instances, [1, 3], table)
        obj = report.to_json()
        assert set(obj) == {"K", "MAP", "NDCG", "deNDCG", "Utility", "lists_evaluated"}
        assert obj["K"] == [1, 3]
        assert obj["lists_evaluated"] == 3
        # clicked lists: identity ranking, clicks at ranks 1 and 3
        assert obj["MAP"]["1"] == pytest.approx(0.5)
        assert obj["NDCG"]["3"] == pytest.approx((1.0 + 1.0 / math.log2(4)) / 2)
        assert obj["deNDCG"]["3"] == obj["NDCG"]["3"]
        assert obj["Utility"]["3"] == pytest.approx(2.0 / 3.0)

    def test_metrics_invariant_to_item_relabeling(self):
        rng = np.random.default_rng(5)
        labels = [1, 0, 1, 0]
        ranking = [2, 0, 3, 1]
        a = ndcg_at_k(ranking, labels, 3)
        # relabeled item ids do not enter the computation at all
        assert a == ndcg_at_k(list(ranking), list(labels), 3)

    def test_count_clicks_streaming_matches_batch(self):
        insts, _ = synth_generate(SynthConfig(num_users=50, n=4, m=0,
                                              vocab_sizes=(6,), user_vocab_sizes=(4,),
                                              d_dense=0, seed=3))
        whole = count_clicks(insts)
        chunked = ClickCounts()
        count_clicks(insts[:25], chunked)
        count_clicks(insts[25:], chunked)
        assert whole.marginal == chunked.marginal
        assert {k: dict(v) for k, v in whole.by_category.items()} == \
            {k: dict(v) for k, v in chunked.by_category.items()}
