import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdch.errors import EvaluationError, FormatError, ShapeError
from fdch.network import Layer, Mlp, init_mlp
from fdch.retrieval import (
    HashIndex,
    average_precision,
    build_index,
    encode,
    encode_image,
    encode_text,
    hamming,
    load_index,
    mean_average_precision,
    pack_codes,
    precision_recall_by_radius,
    rank,
    save_index,
    unpack_codes,
)
from oracles import average_precision_direct, hamming_unpacked


def _signs(rng, k, m):
    return np.where(rng.random((k, m)) < 0.5, 1, -1).astype(np.int8)


def _labels(rng, c, m):
    Y = (rng.random((c, m)) < 0.3).astype(np.uint8)
    Y[rng.integers(0, c, m), np.arange(m)] = 1
    return Y


def _packed(code):
    return pack_codes(np.asarray(code))[0]


# --- encoding -------------------------------------------------------------------


def _bias_net(bias):
    bias = np.asarray(bias, dtype=float)
    return Mlp([Layer(np.zeros((len(bias), 3)), bias, "identity")])


def test_encode_sign_and_tie_rule():
    code = encode_image(_bias_net([0.7, -0.2, 0.0, -3.0]), np.ones(3))
    np.testing.assert_array_equal(code, [1, -1, 1, -1])


def test_encode_zero_input_zero_bias_is_all_plus_one():
    net = Mlp([Layer(np.random.default_rng(0).standard_normal((5, 3)), np.zeros(5), "identity")])
    np.testing.assert_array_equal(encode_text(net, np.zeros(3)), np.ones(5))


def test_encode_positive_scale_invariance_and_repeatability():
    rng = np.random.default_rng(1)
    net = init_mlp([6, 8, 12], ["relu", "identity"], seed=2)
    X = rng.standard_normal((6, 20))
    codes = encode(net, X)
    scaled = net.copy()
    scaled.layers[-1].W *= 2
    scaled.layers[-1].b *= 2
    np.testing.assert_array_equal(encode(scaled, X), codes)
    np.testing.assert_array_equal(encode(net, X), codes)
    assert codes.shape == (12, 20)


def test_encode_independent_of_chunking():
    rng = np.random.default_rng(2)
    net = init_mlp([4, 6, 16], ["tanh", "identity"], seed=0)
    X = rng.standard_normal((4, 80))
    np.testing.assert_array_equal(encode(net, X, chunk=1), encode(net, X, chunk=64))


def test_encode_dim_mismatch():
    with pytest.raises(ShapeError):
        encode(init_mlp([4, 2], ["identity"], seed=0), np.zeros((3, 1)))


# --- packing and hamming --------------------------------------------------------


@pytest.mark.parametrize("k", [1, 7, 16, 63, 64, 65, 130])
def test_pack_unpack_round_trip(k):
    rng = np.random.default_rng(k)
    codes = _signs(rng, k, 9)
    packed = pack_codes(codes)
    assert packed.shape == (9, (k + 63) // 64) and packed.dtype == np.uint64
    np.testing.assert_array_equal(unpack_codes(packed, k), codes)


def test_bit_layout():
    code = -np.ones(70, dtype=np.int8)
    code[[0, 3, 64, 69]] = 1
    word0, word1 = _packed(code)
    assert word0 == (1 << 0) | (1 << 3)
    assert word1 == (1 << 0) | (1 << 5)


def test_hamming_examples():
    rng = np.random.default_rng(0)
    a = _signs(rng, 16, 1)[:, 0]
    assert hamming(_packed(a), _packed(a)) == 0 and int(a @ a) == 16
    assert hamming(_packed(a), _packed(-a)) == 16 and int(a.astype(int) @ -a) == -16
    b = a.copy()
    b[[1, 5, 11]] *= -1
    assert hamming(_packed(a), _packed(b)) == 3 and int(a.astype(int) @ b) == 10


def test_hamming_length_mismatch():
    with pytest.raises(ShapeError):
        hamming(np.zeros(1, np.uint64), np.zeros(2, np.uint64))


def test_hamming_identity_exhaustive_k8():
    codes = np.array(list(itertools.product((-1, 1), repeat=8)), dtype=np.int8).T
    packed = pack_codes(codes)
    ip = codes.T.astype(int) @ codes
    for i in range(256):
        for j in range(256):
            assert 2 * hamming(packed[i], packed[j]) + ip[i, j] == 8


@settings(max_examples=200)
@given(st.integers(1, 200), st.integers(0, 2**32 - 1))
def test_packed_hamming_equals_unpacked_reference(k, seed):
    rng = np.random.default_rng(seed)
    a, b = _signs(rng, k, 2).T
    d = hamming(_packed(a), _packed(b))
    assert d == hamming_unpacked(a, b)
    assert 2 * d + int(a.astype(int) @ b) == k


# --- ranking --------------------------------------------------------------------


def test_rank_tie_rule():
    q = np.ones(4, dtype=np.int8)
    db = np.array([[-1, -1, 1, 1], [1, 1, 1, 1], [1, 1, -1, -1]], dtype=np.int8).T
    res = rank(build_index(db, np.ones((1, 3))), q)
    assert list(res) == [(1, 0), (0, 2), (2, 2)]


def test_rank_is_sorted_permutation():
    rng = np.random.default_rng(3)
    db = _signs(rng, 16, 50)
    idx = build_index(db, _labels(rng, 3, 50))
    q = db[:, 17]
    res = rank(idx, q)
    assert sorted(res.order.tolist()) == list(range(50))
    assert np.all(np.diff(res.distances) >= 0)
    assert res.distances[0] == 0 and 17 in res.order[res.distances == 0]
    for d in np.unique(res.distances):
        tie = res.order[res.distances == d]
        assert np.all(np.diff(tie) > 0)


def test_rank_under_db_permutation_changes_only_ties():
    rng = np.random.default_rng(4)
    db = _signs(rng, 8, 40)
    q = _signs(rng, 8, 1)[:, 0]
    perm = rng.permutation(40)
    a = rank(build_index(db, np.ones((1, 40))), q)
    b = rank(build_index(db[:, perm], np.ones((1, 40))), q)
    np.testing.assert_array_equal(a.distances, b.distances)
    np.testing.assert_array_equal(np.sort(perm[b.order]), np.sort(a.order))


# --- metrics --------------------------------------------------------------------


def test_average_precision_hand_value():
    assert average_precision([1, 0, 1, 0]) == pytest.approx((1 / 1 + 2 / 3) / 2)
    assert average_precision([1, 1, 1]) == 1.0
    assert average_precision([0, 0]) is None


def test_map_all_relevant_on_top_is_one():
    q = np.ones((6, 1), dtype=np.int8)
    db = np.hstack([np.ones((6, 3)), -np.ones((6, 4))]).astype(np.int8)
    labels = np.array([[1, 1, 1, 0, 0, 0, 0], [0, 0, 0, 1, 1, 1, 1]])
    rep = mean_average_precision(build_index(db, labels), q, np.array([[1], [0]]))
    assert rep.map == 1.0 and rep.n_evaluated == 1


def test_map_matches_brute_force_exactly():
    rng = np.random.default_rng(2024)
    for _ in range(20):
        k = int(rng.choice([8, 16, 32]))
        db, dbl = _signs(rng, k, 30), _labels(rng, 4, 30)
        q, ql = _signs(rng, k, 10), _labels(rng, 4, 10)
        rep = mean_average_precision(build_index(db, dbl), q, ql)
        ref = [average_precision_direct(q[:, i], ql[:, i], db, dbl) for i in range(10)]
        assert rep.per_query == ref
        assert 0.0 <= rep.map <= 1.0


def test_map_skips_queries_without_relevant_items():
    db = np.ones((4, 3), dtype=np.int8)
    idx = build_index(db, np.array([[1, 1, 1], [0, 0, 0]]))
    rep = mean_average_precision(idx, np.ones((4, 2), dtype=np.int8), np.array([[1, 0], [0, 1]]))
    assert rep.n_evaluated == 1 and rep.n_skipped == 1 and rep.per_query[1] is None
    with pytest.raises(EvaluationError, match="no evaluable queries"):
        mean_average_precision(idx, np.ones((4, 1), dtype=np.int8), np.array([[0], [1]]))


def test_pr_hand_enumeration():
    a = _signs(np.random.default_rng(5), 8, 1)
    idx = build_index(np.hstack([a, -a]), np.array([[1, 0], [0, 1]]))
    pts = precision_recall_by_radius(idx, a, np.array([[1], [0]]))
    assert len(pts) == 9
    assert (pts[0].precision, pts[0].recall) == (1.0, 1.0)
    assert (pts[8].precision, pts[8].recall) == (0.5, 1.0)


def test_pr_zero_retrieval_flag():
    q = np.ones((4, 1), dtype=np.int8)
    db = -np.ones((4, 2), dtype=np.int8)
    db[0, 1] = 1  # distances 4 and 3
    pts = precision_recall_by_radius(build_index(db, np.ones((1, 2))), q, np.ones((1, 1)))
    assert [p.zero_retrieval for p in pts] == [True, True, True, False, False]
    assert pts[0].precision == 1.0 and pts[0].recall == 0.0
    assert pts[3].precision == 1.0 and pts[3].recall == 0.5


def test_pr_monotone_recall_and_full_radius():
    rng = np.random.default_rng(6)
    for _ in range(20):
        k = 16
        idx = build_index(_signs(rng, k, 30), _labels(rng, 3, 30))
        pts = precision_recall_by_radius(idx, _signs(rng, k, 5), _labels(rng, 3, 5))
        rec = [p.recall for p in pts]
        assert len(pts) == k + 1 and rec[-1] == 1.0
        assert all(b >= a for a, b in zip(rec, rec[1:]))


def test_query_shape_checks():
    idx = build_index(np.ones((8, 3), dtype=np.int8), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        mean_average_precision(idx, np.ones((16, 1)), np.ones((2, 1)))
    with pytest.raises(ShapeError):
        rank(idx, np.ones(16))


# --- index file -----------------------------------------------------------------


def test_index_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    for k in (16, 70):
        idx = build_index(_signs(rng, k, 13), _labels(rng, 5, 13), [f"doc-{i}" for i in range(13)], "text")
        save_index(idx, tmp_path / "a.fdch")
        assert load_index(tmp_path / "a.fdch") == idx


def test_index_header_layout(tmp_path):
    idx = build_index(np.ones((16, 2), dtype=np.int8), np.ones((1, 2)))
    save_index(idx, tmp_path / "a.fdch")
    raw = (tmp_path / "a.fdch").read_bytes()
    assert raw[:4] == b"FDCH"
    assert int.from_bytes(raw[4:6], "little") == 1  # version
    assert int.from_bytes(raw[8:10], "little") == 16  # k
    assert int.from_bytes(raw[10:18], "little") == 2  # n


def test_index_errors(tmp_path):
    idx = build_index(np.ones((16, 4), dtype=np.int8), np.ones((2, 4)))
    path = tmp_path / "a.fdch"
    save_index(idx, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-2])
    with pytest.raises(FormatError, match="unexpected end of file"):
        load_index(path)
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError, match="not a code index file"):
        load_index(path)
    path.write_bytes(raw[:4] + (9).to_bytes(2, "little") + raw[6:])
    with pytest.raises(FormatError, match="version 9"):
        load_index(path)


def test_index_invariants():
    with pytest.raises(ShapeError):
        HashIndex(16, np.zeros((3, 1), np.uint64), np.ones((1, 2)))
    with pytest.raises(ShapeError):
        HashIndex(16, np.zeros((3, 2), np.uint64), np.ones((1, 3)))
