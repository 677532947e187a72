import itertools
from collections import Counter

import numpy as np
import pytest

from ssm4rec.data import (
    EmptyDatasetError,
    InteractionRecord,
    ParseError,
    build_dataset,
    build_splits,
    content_hash,
    k_core_filter,
    left_pad,
    load_dataset,
    make_batch,
    pack_train_windows,
    pad_and_batch,
    parse_interactions,
    parse_line,
    save_dataset,
    subsample_users,
    synthetic_markov_records,
    trim_leading_pads,
)


def rec(u, i, t=0):
    return InteractionRecord(str(u), str(i), t)


def brute_force_core(records, k):
    """Remove one offending record class per pass until a full pass changes nothing."""
    current = list(records)
    changed = True
    while changed:
        changed = False
        users = Counter(r.user_id for r in current)
        bad_users = {u for u, c in users.items() if c < k}
        if bad_users:
            current = [r for r in current if r.user_id not in bad_users]
            changed = True
        items = Counter(r.item_id for r in current)
        bad_items = {i for i, c in items.items() if c < k}
        if bad_items:
            current = [r for r in current if r.item_id not in bad_items]
            changed = True
    return current


class TestParse:
    def test_movielens_line(self):
        assert parse_line("1::1193::5::978300760", "ml-1m") == ("1", "1193", 978300760)

    def test_amazon_csv_line(self):
        assert parse_line("A2X,B00K,4.0,1393545600", "amazon-csv") == ("A2X", "B00K", 1393545600)

    def test_tsv_line(self):
        assert parse_line("u\ti\t17", "tsv") == ("u", "i", 17)

    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.dat"
        p.write_text("")
        assert parse_interactions(p, "ml-1m") == []

    def test_bad_field_count_names_line(self, tmp_path):
        p = tmp_path / "bad.dat"
        p.write_text("1::2::5::100\n1::3::100\n")
        with pytest.raises(ParseError, match="line 2"):
            parse_interactions(p, "ml-1m")

    def test_non_numeric_timestamp(self):
        with pytest.raises(ParseError, match="timestamp"):
            parse_line("1::2::5::yesterday", "ml-1m", 4)

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            parse_line("a,b,c", "parquet")

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            parse_interactions(tmp_path / "nope.dat", "tsv")


class TestKCore:
    def test_identity_when_already_core(self):
        records = [rec(u, i) for u in range(5) for i in range(5)]
        assert k_core_filter(records, 5) == records

    def test_small_user_removed_entirely(self):
        core = [rec(u, i) for u in range(5) for i in range(5)]
        out = k_core_filter(core + [rec("x", i) for i in range(4)], 5)
        assert all(r.user_id != "x" for r in out)
        assert len(out) == 25

    def test_chained_removal(self):
        # user "c" hits item 9 five times; once "c" falls below k, item 9 does too
        core = [rec(u, i) for u in range(5) for i in range(5)]
        chain = [rec("c", 9)] * 4 + [rec(u, 9) for u in range(1)]
        out = k_core_filter(core + chain, 5)
        assert out == brute_force_core(core + chain, 5)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        records = [rec(int(u), int(i), t) for t, (u, i) in
                   enumerate(zip(rng.zipf(1.6, 400) % 40, rng.zipf(1.4, 400) % 30))]
        try:
            out = k_core_filter(records, 3)
        except EmptyDatasetError:
            assert brute_force_core(records, 3) == []
            return
        assert out == brute_force_core(records, 3)
        assert min(Counter(r.user_id for r in out).values()) >= 3
        assert min(Counter(r.item_id for r in out).values()) >= 3

    def test_everything_removed(self):
        with pytest.raises(EmptyDatasetError, match="empty after filtering"):
            k_core_filter([rec(1, 1), rec(2, 2)], 5)

    def test_bad_k(self):
        with pytest.raises(ValueError):
            k_core_filter([rec(1, 1)], 0)


class TestDataset:
    def test_chronological_with_stable_ties(self):
        ds = build_dataset([rec("u", "a", 5), rec("u", "b", 1), rec("u", "c", 5), rec("u", "d", 3)])
        names = [ds.item_ids[i - 1] for i in ds.sequences[0]]
        assert names == ["b", "d", "a", "c"]

    def test_pad_index_unused(self):
        ds = build_dataset(synthetic_markov_records(20, 10, 6))
        assert all(s.min() >= 1 for s in ds.sequences)
        assert max(s.max() for s in ds.sequences) == ds.num_items

    def test_stats(self):
        ds = build_dataset(synthetic_markov_records(10, 8, 6))
        assert ds.stats() == {"users": 10, "items": 8, "interactions": 60, "avg_length": 6.0}

    def test_duplicates_kept(self):
        ds = build_dataset([rec("u", "a", 1), rec("u", "a", 1)])
        assert list(ds.sequences[0]) == [1, 1]

    def test_cache_round_trip(self, tmp_path):
        ds = build_dataset(synthetic_markov_records(30, 12, 7, seed=3))
        save_dataset(tmp_path / "d.bin", ds)
        back = load_dataset(tmp_path / "d.bin")
        assert back.user_ids == ds.user_ids and back.item_ids == ds.item_ids
        for a, b in zip(back.sequences, ds.sequences):
            np.testing.assert_array_equal(a, b)

    def test_content_hash_depends_on_filter(self, tmp_path):
        p = tmp_path / "log.tsv"
        p.write_text("u\ti\t1\n")
        assert content_hash(p, "tsv", 5) != content_hash(p, "tsv", 3)
        assert content_hash(p, "tsv", 5) == content_hash(p, "tsv", 5)


def seq_dataset(*lengths):
    records = [rec(f"u{u}", f"i{u}_{t}", t) for u, n in enumerate(lengths) for t in range(n)]
    return build_dataset(records)


class TestSplits:
    def test_five_items(self):
        ds = seq_dataset(5)
        s = build_splits(ds)
        v = ds.sequences[0]
        assert list(s.test.targets) == [v[4]] and list(s.valid.targets) == [v[3]]
        assert list(s.train.targets) == [v[1], v[2]]

    def test_three_items(self):
        s = build_splits(seq_dataset(3))
        assert len(s.train) == 0 and len(s.valid) == 1 and len(s.test) == 1

    def test_too_short(self):
        with pytest.raises(ValueError):
            build_splits(seq_dataset(2))

    def test_training_count(self):
        lengths = [3, 4, 5, 9, 17]
        assert len(build_splits(seq_dataset(*lengths)).train) == sum(n - 3 for n in lengths if n >= 4)

    def test_holdout_positions_disjoint(self):
        ds = seq_dataset(6, 8)
        s = build_splits(ds)
        for u, n in enumerate((6, 8)):
            train_pos = set(s.train.positions[s.train.users == u])
            assert s.valid.positions[u] == n - 2 and s.test.positions[u] == n - 1
            assert not train_pos & {n - 2, n - 1}
            assert train_pos == set(range(1, n - 2))


class TestBatching:
    def test_left_pad(self):
        np.testing.assert_array_equal(left_pad(np.array([1, 2, 3]), 5), [0, 0, 1, 2, 3])

    def test_keeps_most_recent(self):
        np.testing.assert_array_equal(left_pad(np.arange(1, 8), 5), [3, 4, 5, 6, 7])

    def test_batch_contract(self):
        ds = seq_dataset(4, 9, 12)
        s = build_splits(ds)
        b = make_batch(ds, s.test, np.arange(3), 6)
        assert b.items.shape == (3, 6)
        assert np.all(b.items[:, -1] != 0)
        np.testing.assert_array_equal(b.lengths, [3, 6, 6])
        np.testing.assert_array_equal(b.targets, s.test.targets)

    def test_trim_leading_pads(self):
        assert trim_leading_pads(np.array([[0, 0, 1, 2], [0, 0, 0, 3]])) == 2
        assert trim_leading_pads(np.array([[4, 1]])) == 0
        assert trim_leading_pads(np.zeros((2, 3), int)) == 2

    def test_same_seed_same_stream(self):
        ds = seq_dataset(*range(4, 20))
        tr = build_splits(ds).train

        def run():
            return [b.items for b in pad_and_batch(ds, tr, 5, 7, np.random.default_rng(3), shuffle=True)]

        for a, b in itertools.zip_longest(run(), run()):
            np.testing.assert_array_equal(a, b)

    def test_stream_covers_each_instance_once(self):
        ds = seq_dataset(*range(4, 12))
        tr = build_splits(ds).train
        targets = np.concatenate([b.targets for b in pad_and_batch(ds, tr, 5, 4, np.random.default_rng(0), True)])
        assert sorted(targets) == sorted(tr.targets)


class TestPackedWindows:
    def test_same_pairs_as_prefix_instances_when_short(self):
        ds = seq_dataset(4, 7, 10)
        L = 10
        packed = pack_train_windows(ds, L)
        pairs = set()
        for row, tgt in zip(packed.items, packed.targets):
            for t in np.nonzero(tgt)[0]:
                pairs.add((tuple(left_pad(row[: t + 1][row[: t + 1] != 0], L)), int(tgt[t])))
        tr = build_splits(ds).train
        b = make_batch(ds, tr, np.arange(len(tr)), L)
        assert pairs == {(tuple(r), int(t)) for r, t in zip(b.items, b.targets)}

    def test_long_sequences_span_windows(self):
        ds = seq_dataset(30)
        packed = pack_train_windows(ds, 8)
        assert np.count_nonzero(packed.targets) == 30 - 3
        assert packed.items.shape[1] == 8


class TestSubsample:
    def test_keeps_whole_histories(self):
        ds = build_dataset(synthetic_markov_records(50, 20, 7, seed=5))
        sub = subsample_users(ds, 10, seed=1)
        assert sub.num_users == 10 and sub.num_interactions == 70
        original = dict(zip(ds.user_ids, ds.sequences))
        for u, seq in zip(sub.user_ids, sub.sequences):
            assert [sub.item_ids[i - 1] for i in seq] == [ds.item_ids[i - 1] for i in original[u]]

    def test_larger_than_population_is_identity(self):
        ds = seq_dataset(4, 5)
        assert subsample_users(ds, 10) is ds
