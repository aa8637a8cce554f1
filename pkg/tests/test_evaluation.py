"""Tests for ranking metrics, buckets, audits and token analytics."""

import numpy as np
import pytest

from tokrec.backbones import build_recommender
from tokrec.errors import ConfigurationError
from tokrec.evaluation import (
    EvalResult,
    Evaluator,
    UserMetrics,
    bucket_analysis,
    bucket_label,
    bucket_of,
    ndcg_at_k,
    parameter_audit,
    per_user_lines,
    rank_items_for_user,
    recall_at_k,
    retrieve_similar_by_tokens,
    run_id,
    token_distinguishability,
    token_load_stats,
)
from tokrec.quantizer import TokenAssignment
from tokrec.tcn import TokenCrossNetwork
from tokrec.token_store import init_modal_tables


def _brute_metrics(scores, relevant, excluded, k):
    candidates = sorted(
        (i for i in range(len(scores)) if i not in excluded), key=lambda i: (-scores[i], i)
    )
    top = candidates[:k]
    hits = [1.0 if i in relevant else 0.0 for i in top]
    dcg = sum(h / np.log2(r + 2) for r, h in enumerate(hits))
    idcg = sum(1 / np.log2(r + 2) for r in range(min(k, len(relevant))))
    return sum(hits) / len(relevant), dcg / idcg


class TestRanking:
    def test_descending_scores(self):
        h_user = np.array([[1.0]])
        h_item = np.array([[0.1], [0.9], [0.5]])

        assert rank_items_for_user(0, h_user, h_item).tolist() == [1, 2, 0]

    def test_exclusions_removed(self):
        h_user = np.array([[1.0]])
        h_item = np.array([[0.1], [0.9], [0.5]])

        assert rank_items_for_user(0, h_user, h_item, [1]).tolist() == [2, 0]

    def test_ties_by_ascending_index(self):
        h_user = np.array([[1.0, 0.0]])
        h_item = np.array([[0.2, 1.0], [0.5, 0.0], [0.2, -3.0], [0.5, 2.0]])

        assert rank_items_for_user(0, h_user, h_item).tolist() == [1, 3, 0, 2]


class TestMetrics:
    def test_recall_examples(self):
        assert recall_at_k([3, 1, 2], [3], 2) == 1.0
        assert recall_at_k([0, 5, 6], [5, 7, 8, 9], 2) == 0.25

    def test_ndcg_single_hit_at_rank_three(self):
        assert ndcg_at_k([4, 5, 6], [6], 3) == pytest.approx(0.5)

    def test_ndcg_perfect(self):
        assert ndcg_at_k([1, 2, 3], [1, 2], 10) == pytest.approx(1.0)

    def test_empty_relevant_is_skipped(self):
        assert recall_at_k([1], [], 1) is None
        assert ndcg_at_k([1], [], 1) is None

    def test_evaluator_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for case in range(500):
            num_items = int(rng.integers(3, 30))
            dim = int(rng.integers(1, 4))
            h_user = rng.normal(size=(1, dim))
            h_item = rng.normal(size=(num_items, dim))
            # Rounded scores produce ties.
            h_item = np.round(h_item, 1)
            items = rng.permutation(num_items)
            n_train = int(rng.integers(0, num_items - 1))
            n_rel = int(rng.integers(1, num_items - n_train + 1))
            excluded = set(items[:n_train].tolist())
            relevant = set(items[n_train:n_train + n_rel].tolist())
            k = [1, 5, 10, 20][case % 4]

            ranked = rank_items_for_user(0, h_user, h_item, sorted(excluded))
            expected_recall, expected_ndcg = _brute_metrics(
                (h_item @ h_user[0]).tolist(), relevant, excluded, k
            )
            assert recall_at_k(ranked, relevant, k) == pytest.approx(expected_recall, abs=1e-12)
            assert ndcg_at_k(ranked, relevant, k) == pytest.approx(expected_ndcg, abs=1e-12)


class TestEvaluator:
    def _reps(self, dataset, seed=0):
        rng = np.random.default_rng(seed)
        return rng.normal(size=(dataset.num_users, 4)), rng.normal(size=(dataset.num_items, 4))

    def test_means_match_per_user_metrics(self, toy_dataset):
        h_user, h_item = self._reps(toy_dataset)
        result = Evaluator(toy_dataset).evaluate(h_user, h_item, split="test")

        train = toy_dataset.user_items("train")
        val = toy_dataset.user_items("val")
        test = toy_dataset.user_items("test")
        recalls = []
        for u in range(toy_dataset.num_users):
            if len(test[u]) == 0:
                continue
            ranked = rank_items_for_user(u, h_user, h_item, np.concatenate([train[u], val[u]]))
            recalls.append(recall_at_k(ranked, test[u], 20))

        assert result.num_evaluated_users == len(recalls)
        assert result.metric("recall@20") == pytest.approx(np.mean(recalls))
        assert set(result.metrics) == {"recall@10", "ndcg@10", "recall@20", "ndcg@20"}

    def test_thread_count_does_not_change_results(self, toy_dataset):
        h_user, h_item = self._reps(toy_dataset, seed=3)
        single = Evaluator(toy_dataset, threads=1, chunk_size=3).evaluate(h_user, h_item)
        pooled = Evaluator(toy_dataset, threads=4, chunk_size=3).evaluate(h_user, h_item)

        assert single.metrics == pooled.metrics
        assert [u.user for u in single.per_user] == [u.user for u in pooled.per_user]

    def test_unknown_split(self, toy_dataset):
        h_user, h_item = self._reps(toy_dataset)

        with pytest.raises(ConfigurationError):
            Evaluator(toy_dataset).evaluate(h_user, h_item, split="train")

    def test_per_user_lines(self):
        result = EvalResult(
            "test", {"recall@20": 0.5}, 1, per_user=[UserMetrics(2, 4, {"recall@20": 0.5})]
        )

        assert per_user_lines(result) == ["user\tnum_relevant\trecall@20", "2\t4\t0.500000"]


class TestBuckets:
    def test_bucket_of_boundaries(self):
        assert bucket_label((0, 5)) == "0-5"
        assert bucket_label((51, None)) == "51+"
        assert bucket_of(5) == 0
        assert bucket_of(6) == 1
        assert bucket_of(51) == 4
        assert bucket_of(10_000) == 4

    def test_single_bucket_equals_overall(self, toy_dataset):
        rng = np.random.default_rng(1)
        h_user = rng.normal(size=(toy_dataset.num_users, 4))
        h_item = rng.normal(size=(toy_dataset.num_items, 4))

        buckets = bucket_analysis(h_user, h_item, toy_dataset, buckets=[(0, None)])
        overall = Evaluator(toy_dataset).evaluate(h_user, h_item, split="test")
        assert buckets[0].label == "0+"
        assert buckets[0].recall == pytest.approx(overall.metric("recall@20"))
        assert buckets[0].ndcg == pytest.approx(overall.metric("ndcg@20"))
        assert buckets[0].num_users == overall.num_evaluated_users

    def test_empty_bucket_reports_zero(self, toy_dataset):
        h_user = np.ones((toy_dataset.num_users, 2))
        h_item = np.ones((toy_dataset.num_items, 2))

        buckets = bucket_analysis(h_user, h_item, toy_dataset, buckets=[(0, None), (1000, None)])
        assert buckets[1].num_items == 0
        assert buckets[1].num_users == 0
        assert buckets[1].recall == 0.0


class TestParameterAudit:
    def test_reference_ratio(self):
        audit = parameter_audit(
            num_users=1000, num_items=19070, dim=128,
            slots={"vision": 4, "text": 4}, codebook_size=256,
        )

        assert audit.item_side_params == 262144
        assert audit.id_based_equivalent == 2440960
        assert audit.ratio == pytest.approx(262144 / 2440960, abs=1e-12)
        assert audit.ratio == pytest.approx(0.107394, abs=1e-6)

    def test_smallest_codebook(self):
        audit = parameter_audit(5, 10, 7, slots={"vision": 1}, codebook_size=1)

        assert audit.item_side_params == 7

    def test_id_based_ratio_is_one(self):
        audit = parameter_audit(5, 10, 7, mode="id_based")

        assert audit.ratio == 1.0
        assert audit.tcn_params == 0

    def test_id_free_needs_slots(self):
        with pytest.raises(ConfigurationError):
            parameter_audit(5, 10, 7)

    @pytest.mark.parametrize("variant", ["modal_specific", "modal_agnostic"])
    @pytest.mark.parametrize("aggregator", ["cross", "mean", "linear"])
    def test_matches_allocated_model(self, variant, aggregator):
        num_users, num_items, dim, k = 6, 9, 3, 4
        slots = {"vision": 2, "text": 3}
        tables = init_modal_tables(slots, k, dim, seed=0)
        network = TokenCrossNetwork.for_layout(
            tuple(slots), {m: tables.slots_of(m) for m in slots}, dim,
            variant=variant, aggregator=aggregator, seed=1,
        )
        token_rows = np.random.default_rng(2).integers(0, k, size=(num_items, 5))
        features = np.random.default_rng(3).normal(size=(num_items, 6)).astype(np.float32)
        model = build_recommender(
            "vbpr", num_users, num_items, dim, seed=4,
            tables=tables, network=network, token_rows=token_rows, item_features=features,
        )

        audit = parameter_audit(
            num_users, num_items, dim, slots=slots, codebook_size=k,
            tcn_variant=variant, aggregator=aggregator, vbpr_feature_dim=6,
        )
        assert audit.counts() == model.parameter_breakdown()


class TestTokenRetrieval:
    def test_duplicate_ranks_first(self):
        rows = np.array([[0, 1, 2, 3], [0, 1, 2, 3], [0, 0, 0, 0], [3, 3, 3, 0]])

        result = retrieve_similar_by_tokens(rows, 0, 3)
        assert result[0] == (1, 4)
        assert result == [(1, 4), (2, 1), (3, 0)]

    def test_no_overlap_scores_zero(self):
        rows = np.array([[0, 0], [1, 1]])

        assert retrieve_similar_by_tokens(rows, 0, 5) == [(1, 0)]

    def test_zero_top_n(self):
        assert retrieve_similar_by_tokens(np.zeros((3, 2), dtype=np.int64), 1, 0) == []

    def test_query_out_of_range(self):
        with pytest.raises(ConfigurationError):
            retrieve_similar_by_tokens(np.zeros((3, 2), dtype=np.int64), 3, 1)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            rows = rng.integers(0, 3, size=(25, 4))
            query = int(rng.integers(25))
            overlaps = [
                (i, sum(int(a == b) for a, b in zip(rows[i], rows[query])))
                for i in range(25)
                if i != query
            ]
            expected = sorted(overlaps, key=lambda p: (-p[1], p[0]))[:7]

            assert retrieve_similar_by_tokens(rows, query, 7) == expected


class TestTokenStats:
    def test_distinguishability(self):
        rows = np.array([[0, 1], [0, 1], [1, 1], [2, 0]])

        stats = token_distinguishability(rows)
        assert stats == {"num_items": 4, "distinct_signatures": 3, "collision_rate": 0.5}

    def test_uniform_load(self):
        tokens = np.array([[0, 1], [1, 0], [2, 3], [3, 2]])

        stats = token_load_stats(TokenAssignment("vision", tokens, 4))
        assert stats["mean_load"] == 1.0
        assert stats["max_load_ratio"] == 1.0
        assert stats["min_load_ratio"] == 1.0
        assert stats["normalized_entropy"] == pytest.approx([1.0, 1.0])

    def test_collapsed_slot(self):
        tokens = np.array([[0], [0], [0], [0]])

        stats = token_load_stats(TokenAssignment("text", tokens, 2))
        assert stats["max_load_ratio"] == 2.0
        assert stats["min_load_ratio"] == 0.0
        assert stats["normalized_entropy"] == [0.0]


class TestRunId:
    def test_stable_and_sensitive(self):
        config = {"seed": 0, "model": {"dim": 8}}

        assert run_id(config, b"abc") == run_id({"model": {"dim": 8}, "seed": 0}, b"abc")
        assert run_id(config, b"abc") != run_id(config, b"abd")
        assert len(run_id(config, b"")) == 12
