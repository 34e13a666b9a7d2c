import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advmultvae import data as dp
from advmultvae.data import RawInteraction
from advmultvae.model import UNKNOWN
from advmultvae.rng import stream

ML = dp.FORMATS["ml-1m"]


def write(path, text):
    path.write_text(text)
    return path


def brute_force_filter(pairs, min_u, min_i):
    """Largest subset of users x items where every survivor meets both degree limits.

    Enumerates all user subsets and all item subsets; only usable on toys.
    """
    users = sorted({u for u, _ in pairs})
    items = sorted({i for _, i in pairs})
    best = set()
    for nu in range(len(users), 0, -1):
        for us in itertools.combinations(users, nu):
            for ni in range(len(items), 0, -1):
                for its in itertools.combinations(items, ni):
                    kept = {(u, i) for u, i in pairs if u in us and i in its}
                    ud = {u: 0 for u in us}
                    idg = {i: 0 for i in its}
                    for u, i in kept:
                        ud[u] += 1
                        idg[i] += 1
                    if all(d >= min_u for d in ud.values()) and all(d >= min_i for d in idg.values()):
                        if len(kept) > len(best):
                            best = kept
    return best


def pairs_of(m):
    coo = m.X.tocoo()
    return {(m.user_ids[u], m.item_ids[i]) for u, i in zip(coo.row, coo.col)}


# --- ingestion --------------------------------------------------------------


def test_ingest_ml_line(tmp_path):
    r = write(tmp_path / "ratings.dat", "1::1193::5::978300760\n")
    u = write(tmp_path / "users.dat", "1::F::1::10::48067\n")
    inter, labels = dp.ingest(r, ML, u)
    assert inter == [RawInteraction("1", "1193", 5.0, 978300760)]
    assert labels == {"1": "F"}


def test_empty_file_is_degenerate(tmp_path):
    r = write(tmp_path / "ratings.dat", "")
    u = write(tmp_path / "users.dat", "")
    inter, labels = dp.ingest(r, ML, u)
    assert inter == []
    with pytest.raises(dp.DegenerateDatasetError):
        dp.preprocess(inter, labels)


def test_malformed_line_reports_location(tmp_path):
    r = write(tmp_path / "ratings.dat", "1::2::5::1\n1::oops\n")
    with pytest.raises(dp.ParseError, match=r"ratings.dat:2"):
        dp.read_interactions(r, ML)
    r = write(tmp_path / "bad.dat", "1::2::x::1\n")
    with pytest.raises(dp.ParseError, match=r"bad.dat:1"):
        dp.read_interactions(r, ML)


def test_missing_files(tmp_path):
    with pytest.raises(dp.ConfigurationError):
        dp.ingest(tmp_path / "nope.dat", ML, tmp_path / "u.dat")
    r = write(tmp_path / "ratings.dat", "1::2::5::1\n")
    with pytest.raises(dp.ConfigurationError):
        dp.ingest(r, ML, tmp_path / "missing.dat")


def test_lfm_layout_ingests(tmp_path):
    r = write(tmp_path / "inter.tsv", "user_id\ttrack_id\tcount\n7\t100\t3\n7\t101\t1\n")
    u = write(tmp_path / "users.tsv", "user_id\tgender\tage\n7\tm\t30\n")
    inter, labels = dp.ingest(r, dp.FORMATS["lfm"], u)
    assert inter == [RawInteraction("7", "100", 3.0, None), RawInteraction("7", "101", 1.0, None)]
    m = dp.preprocess(inter, labels, min_weight=2, min_user_deg=1, min_item_deg=1)
    assert m.item_ids == ["100"] and m.labels.tolist() == [0]


# --- filtering --------------------------------------------------------------


TOY = [("a", "x"), ("a", "y"), ("a", "z"), ("b", "x"), ("b", "y"),
       ("c", "x"), ("c", "z"), ("d", "w"), ("e", "w"), ("e", "x")]


@pytest.mark.parametrize("min_u,min_i", [(2, 2), (2, 3), (3, 2), (1, 1), (3, 3)])
def test_fixpoint_matches_brute_force(min_u, min_i):
    inter = [RawInteraction(u, i, 1.0) for u, i in TOY]
    want = brute_force_filter(TOY, min_u, min_i)
    if not want:
        with pytest.raises(dp.DegenerateDatasetError):
            dp.preprocess(inter, {}, min_user_deg=min_u, min_item_deg=min_i)
        return
    m = dp.preprocess(inter, {}, min_user_deg=min_u, min_item_deg=min_i)
    assert pairs_of(m) == want


@settings(max_examples=40, deadline=None)
@given(st.sets(st.tuples(st.integers(0, 5), st.integers(0, 4)), min_size=1, max_size=18),
       st.integers(1, 3), st.integers(1, 3))
def test_fixpoint_matches_brute_force_random(pairs, min_u, min_i):
    pairs = {(str(u), str(i)) for u, i in pairs}
    want = brute_force_filter(pairs, min_u, min_i)
    inter = [RawInteraction(u, i, 1.0) for u, i in pairs]
    if not want:
        with pytest.raises(dp.DegenerateDatasetError):
            dp.preprocess(inter, {}, min_user_deg=min_u, min_item_deg=min_i)
        return
    m = dp.preprocess(inter, {}, min_user_deg=min_u, min_item_deg=min_i)
    assert pairs_of(m) == want
    ud, idg = m.degrees()
    assert ud.min() >= min_u and idg.min() >= min_i


def test_min_weight_threshold():
    inter = [RawInteraction("1", "1", 1.0), RawInteraction("1", "2", 2.0), RawInteraction("1", "3", 5.0)]
    m = dp.preprocess(inter, {"1": "M"}, min_weight=2, min_user_deg=1, min_item_deg=1)
    assert m.item_ids == ["2", "3"]


def test_zero_weight_rows_dropped_and_duplicates_summed():
    inter = [RawInteraction("1", "1", 0.0), RawInteraction("1", "2", 1.0),
             RawInteraction("1", "3", 1.0), RawInteraction("1", "3", 1.0)]
    m = dp.preprocess(inter, {}, min_weight=2, min_user_deg=1, min_item_deg=1)
    assert m.item_ids == ["3"]
    assert m.X.toarray().tolist() == [[1.0]]


def test_preprocess_is_idempotent(synthetic_matrix):
    again = dp.preprocess(synthetic_matrix.to_interactions(), synthetic_matrix.label_names())
    assert again == synthetic_matrix


def test_labels_matched_case_insensitively_and_unknown_kept():
    inter = [RawInteraction(u, i, 1.0) for u in "123" for i in "ab"]
    m = dp.preprocess(inter, {"1": "f", "2": "M"}, min_user_deg=1, min_item_deg=1)
    assert m.labels.tolist() == [1, 0, UNKNOWN]


def test_item_sample_is_seeded():
    inter = [RawInteraction(str(u), str(i), 1.0) for u in range(5) for i in range(20)]
    a = dp.preprocess(inter, {}, min_user_deg=1, min_item_deg=1, item_sample=7, seed=4)
    b = dp.preprocess(inter, {}, min_user_deg=1, min_item_deg=1, item_sample=7, seed=4)
    assert a.n_items == 7 and a.item_ids == b.item_ids


def test_stats_table(synthetic_matrix):
    s = synthetic_matrix.stats()
    rows = s["rows"]
    assert rows["All"][0] == rows["M"][0] + rows["F"][0]
    assert rows["All"][1] == rows["M"][1] + rows["F"][1]
    text = dp.format_stats(synthetic_matrix, "synthetic")
    assert text.splitlines()[1].startswith("synthetic")


# --- cache ------------------------------------------------------------------


def test_cache_round_trip(tmp_path, synthetic_matrix):
    path = tmp_path / "d.bin"
    dp.save_matrix(path, synthetic_matrix)
    back = dp.load_matrix(path)
    assert back == synthetic_matrix
    assert dp.matrix_bytes(back) == path.read_bytes()


def test_cache_rejects_foreign_file(tmp_path):
    p = write(tmp_path / "x.bin", "hello world, not a cache")
    with pytest.raises(dp.ParseError):
        dp.load_matrix(p)


# --- splitting --------------------------------------------------------------


def test_folds_partition_users(synthetic_matrix):
    folds = dp.make_folds(synthetic_matrix, 5, seed=0)
    tests = np.concatenate([f.test_users for f in folds])
    assert sorted(tests.tolist()) == list(range(synthetic_matrix.n_users))
    for i, f in enumerate(folds):
        assert np.array_equal(f.val_users, folds[(i + 1) % 5].test_users)
        tr = set(f.base_train_users.tolist())
        assert tr.isdisjoint(f.val_users.tolist()) and tr.isdisjoint(f.test_users.tolist())
        assert len(tr) + len(f.val_users) + len(f.test_users) == synthetic_matrix.n_users


def test_training_classes_are_balanced(synthetic_matrix):
    for f in dp.make_folds(synthetic_matrix, 5, seed=1):
        counts = np.bincount(synthetic_matrix.labels[f.train_users], minlength=2)
        assert counts[0] == counts[1]
        assert set(f.train_users.tolist()) == set(f.base_train_users.tolist())


def test_balance_classes_upsamples_minority():
    labels = np.array([0] * 100 + [1] * 30)
    out = dp.balance_classes(np.arange(130), labels, np.random.default_rng(0), 2)
    assert np.bincount(labels[out]).tolist() == [100, 100]
    assert set(out[130:].tolist()) <= set(range(100, 130))


def test_balance_classes_rejects_empty_class():
    with pytest.raises(dp.SplitError):
        dp.balance_classes(np.arange(3), np.zeros(3, dtype=int), np.random.default_rng(0), 2)


@pytest.mark.parametrize("n,n_in", [(5, 4), (10, 8), (1, 1), (7, 6), (3, 3)])
def test_holdout_sizes(n, n_in):
    a, b = dp.holdout_split(np.arange(n), np.random.default_rng(0))
    assert len(a) == n_in and len(b) == n - n_in
    assert sorted(np.concatenate([a, b]).tolist()) == list(range(n))


def test_eval_masks_partition_each_user(synthetic_matrix):
    f = dp.make_folds(synthetic_matrix, 5, seed=0)[2]
    for which in ("val", "test"):
        users, inp, tgt = f.eval_split(which)
        full = synthetic_matrix.X[users]
        assert (inp.multiply(tgt)).nnz == 0
        assert ((inp + tgt) != full).nnz == 0


def test_masks_are_reproducible(synthetic_matrix):
    a = dp.make_folds(synthetic_matrix, 5, seed=3)
    b = dp.make_folds(synthetic_matrix, 5, seed=3)
    c = dp.make_folds(synthetic_matrix, 5, seed=4)
    for x, y in zip(a, b):
        assert (x.test_input != y.test_input).nnz == 0
        assert np.array_equal(x.train_users, y.train_users)
    assert any(not np.array_equal(x.test_users, z.test_users) for x, z in zip(a, c))


def test_single_class_dataset_cannot_be_split():
    inter = [RawInteraction(str(u), str(i), 1.0) for u in range(10) for i in range(6)]
    m = dp.preprocess(inter, {str(u): "M" for u in range(10)})
    with pytest.raises(dp.SplitError):
        dp.make_folds(m)


def test_streams_are_keyed():
    a = stream(0, "x", 1).random(3)
    assert np.array_equal(a, stream(0, "x", 1).random(3))
    assert not np.array_equal(a, stream(0, "x", 2).random(3))
    assert not np.array_equal(a, stream(0, "y", 1).random(3))
