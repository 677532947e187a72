import math

import numpy as np
import pytest

from ssm4rec.data import InteractionRecord, build_dataset, build_splits, synthetic_markov_records
from ssm4rec.evaluation import (
    batch_ranks,
    evaluate,
    metrics_at_k,
    popularity_counts,
    popularity_scorer,
    rank_target,
    write_report,
)
from ssm4rec.mamba_block import BlockConfig
from ssm4rec.model import ModelConfig, build_model
from ssm4rec.numerics import ContractError


def sort_rank(scores, target, mask):
    """Position of ``target`` after sorting unmasked items by (-score, index)."""
    live = [v for v in range(1, len(scores)) if v not in mask]
    order = sorted(live, key=lambda v: (-scores[v], v))
    return order.index(target) + 1


def loop_metrics(ranks, k):
    hr = sum(1.0 for r in ranks if r <= k) / len(ranks)
    ndcg = sum(1.0 / math.log2(r + 1) for r in ranks if r <= k) / len(ranks)
    mrr = sum(1.0 / r for r in ranks if r <= k) / len(ranks)
    return hr, ndcg, mrr


class TestRankTarget:
    def test_top(self):
        assert rank_target(np.array([0.0, 0.1, 5.0, 0.3]), 2) == 1

    def test_ties_by_index(self):
        assert rank_target(np.ones(6), 3) == 3

    def test_masked_items_skipped(self):
        assert rank_target(np.array([9.0, 4.0, 3.0, 2.0]), 3, mask={1}) == 2

    def test_pad_never_counts(self):
        assert rank_target(np.array([100.0, 1.0, 2.0]), 1) == 2

    def test_masked_target(self):
        with pytest.raises(ContractError):
            rank_target(np.ones(4), 2, mask={2})
        with pytest.raises(ContractError):
            rank_target(np.ones(4), 0)

    def test_sort_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(10 ** 4):
            V = int(rng.integers(2, 30))
            # coarse integer scores make ties common
            scores = rng.integers(0, 5, V + 1).astype(float)
            target = int(rng.integers(1, V + 1))
            mask = {int(v) for v in rng.integers(1, V + 1, rng.integers(0, 4))} - {target}
            assert rank_target(scores, target, mask) == sort_rank(scores, target, mask)

    def test_batch_ranks_agree(self):
        rng = np.random.default_rng(1)
        scores = rng.integers(0, 4, (200, 12)).astype(float)
        scores[:, 0] = -np.inf
        targets = rng.integers(1, 12, 200)
        expected = [rank_target(s, t) for s, t in zip(scores, targets)]
        np.testing.assert_array_equal(batch_ranks(scores, targets), expected)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(2)
        scores = rng.standard_normal((50, 20))
        scores[:, 0] = -np.inf
        targets = rng.integers(1, 20, 50)
        np.testing.assert_array_equal(batch_ranks(scores, targets), batch_ranks(np.exp(3 * scores) - 7, targets))


class TestMetrics:
    def test_perfect_hit(self):
        m = metrics_at_k([1])
        assert (m.hr, m.ndcg, m.mrr) == (1.0, 1.0, 1.0)

    def test_rank_three_closed_form(self):
        m = metrics_at_k([3])
        assert m.hr == 1.0 and m.ndcg == 0.5 and m.mrr == 1 / 3

    def test_miss(self):
        m = metrics_at_k([11], k=10)
        assert (m.hr, m.ndcg, m.mrr) == (0.0, 0.0, 0.0)

    def test_loop_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(10 ** 4):
            ranks = list(rng.integers(1, 40, rng.integers(1, 8)))
            k = int(rng.integers(1, 20))
            m = metrics_at_k(ranks, k)
            np.testing.assert_allclose((m.hr, m.ndcg, m.mrr), loop_metrics(ranks, k), rtol=1e-12)

    def test_per_user_chain(self):
        for r in range(1, 30):
            m = metrics_at_k([r], k=10)
            assert m.hr >= m.ndcg >= m.mrr
            assert (m.hr == m.ndcg == m.mrr) == (r == 1 or r > 10)

    def test_k_one_collapses(self):
        m = metrics_at_k([1, 2, 1, 7], k=1)
        assert m.hr == m.ndcg == m.mrr == 0.5

    def test_duplication_invariance(self):
        ranks = [1, 4, 12, 2]
        a, b = metrics_at_k(ranks), metrics_at_k(ranks * 3)
        assert (a.hr, a.ndcg, a.mrr) == pytest.approx((b.hr, b.ndcg, b.mrr), rel=1e-15)

    def test_empty(self):
        with pytest.raises(ContractError):
            metrics_at_k([])

    def test_zero_rank(self):
        with pytest.raises(ContractError):
            metrics_at_k([0, 1])


def hand_fixture():
    seqs = {"u1": "1231", "u2": "1212", "u3": "3124", "u4": "2153", "u5": "1425"}
    records = [InteractionRecord(u, item, t) for u, s in seqs.items() for t, item in enumerate(s)]
    ds = build_dataset(records)
    assert ds.item_ids == ["1", "2", "3", "4", "5"]
    return ds


class TestPopularityBaseline:
    def test_counts_exclude_holdout(self):
        np.testing.assert_array_equal(popularity_counts(hand_fixture(), "test"), [0, 6, 5, 2, 1, 1])

    def test_without_history_mask(self):
        ds = hand_fixture()
        m = evaluate(popularity_scorer(popularity_counts(ds, "test")), ds, "test", max_len=10, mask_history=False)
        np.testing.assert_array_equal(m.per_user_rank, [1, 2, 4, 3, 5])
        assert m.hr == 1.0
        assert m.ndcg == pytest.approx((1 + 1 / math.log2(3) + 1 / math.log2(5) + 0.5 + 1 / math.log2(6)) / 5)
        assert m.mrr == pytest.approx((1 + 1 / 2 + 1 / 4 + 1 / 3 + 1 / 5) / 5)

    def test_with_history_mask(self):
        ds = hand_fixture()
        m = evaluate(popularity_scorer(popularity_counts(ds, "test")), ds, "test", max_len=10)
        np.testing.assert_array_equal(m.per_user_rank, [1, 1, 1, 1, 2])
        assert m.mrr == pytest.approx(0.9)
        assert m.ndcg == pytest.approx((4 + 1 / math.log2(3)) / 5)


@pytest.fixture(scope="module")
def setup():
    ds = build_dataset(synthetic_markov_records(60, 25, 9, seed=2))
    cfg = ModelConfig(vocab_size=ds.num_items + 1, max_len=10, dropout_embed=0.0, dropout_hidden=0.0,
                      block=BlockConfig(8, 4, 2, 2))
    return ds, build_model(cfg, seed=1)


class TestEvaluate:
    def test_batch_size_does_not_matter(self, setup):
        ds, model = setup
        a = evaluate(model, ds, "test", eval_batch=1)
        b = evaluate(model, ds, "test", eval_batch=4096)
        np.testing.assert_array_equal(a.per_user_rank, b.per_user_rank)
        assert a.as_dict() == b.as_dict()

    def test_perfect_scorer(self, setup):
        ds, _ = setup
        inst = build_splits(ds).test
        lookup = {tuple(ds.sequences[u][:p][-10:]): t for u, p, t in zip(inst.users, inst.positions, inst.targets)}

        def oracle(items):
            s = np.zeros((len(items), ds.num_items + 1))
            for r, row in enumerate(items):
                s[r, lookup[tuple(row[row != 0])]] = 1.0
            return s

        m = evaluate(oracle, ds, "test", max_len=10, mask_history=False)
        assert (m.hr, m.ndcg, m.mrr) == (1.0, 1.0, 1.0)

    def test_random_model_near_chance(self, setup):
        ds, model = setup
        m = evaluate(model, ds, "test", mask_history=False)
        p = 10 / ds.num_items
        sigma = math.sqrt(p * (1 - p) / ds.num_users)
        assert abs(m.hr - p) <= 3 * sigma + 1e-12

    def test_bad_split(self, setup):
        ds, model = setup
        with pytest.raises(ValueError):
            evaluate(model, ds, "train")

    def test_report_file(self, setup, tmp_path):
        ds, model = setup
        m = evaluate(model, ds, "valid")
        payload = write_report(tmp_path / "r.json", m, "valid", ds.num_users, 7, "abc")
        assert set(payload) == {"split", "k", "hr", "ndcg", "mrr", "num_users", "seed", "config_hash"}
        assert (tmp_path / "r.json").read_text().startswith("{")
