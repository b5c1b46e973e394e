import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chn.errors import InputError, ParseError, ShapeError
from chn.hashing import (HashCodeMatrix, all_codes, binarize, dumps_codes, hamming, hamming_matrix,
                         load_codes, loads_codes, quantization_bound_report, random_codes,
                         save_codes, search, verify_identities)

signs_strategy = st.integers(1, 150).flatmap(
    lambda b: st.lists(st.lists(st.sampled_from([-1, 1]), min_size=b, max_size=b), min_size=1, max_size=6))


def test_binarize_examples():
    codes = binarize([[0.3, -0.2, 0.0], [0.1, 0.2, 0.3]])
    assert codes.bits().tolist() == [[1, 0, 0], [1, 1, 1]]
    assert codes.signs().tolist()[0] == [1, -1, -1]


def test_hamming_examples():
    a = HashCodeMatrix.from_signs([[1, -1, 1]])
    b = HashCodeMatrix.from_signs([[1, 1, 1]])
    assert hamming(a, b) == 1
    assert hamming(a, a) == 0
    x = random_codes(1, 64, seed=0)
    comp = HashCodeMatrix.from_bits(1 - x.bits())
    assert hamming(x, comp) == 64
    with pytest.raises(ShapeError):
        hamming(a, random_codes(1, 4, 0))


@settings(max_examples=60, deadline=None)
@given(signs_strategy)
def test_packing_round_trip_and_distance_oracle(rows):
    S = np.array(rows)
    codes = HashCodeMatrix.from_signs(S)
    assert np.array_equal(codes.signs(), S)
    D = hamming_matrix(codes, codes)
    brute = (S[:, None, :] != S[None, :, :]).sum(axis=2)
    assert np.array_equal(D, brute)


def test_padding_bits_must_be_zero():
    with pytest.raises(ShapeError):
        HashCodeMatrix(np.array([[0b1000]], dtype=np.uint64), 3)


def test_search_examples():
    q = HashCodeMatrix.from_signs([[1, -1, 1, 1]])
    db = HashCodeMatrix.from_signs([[1, -1, 1, 1], [-1, 1, -1, -1]])
    assert search(db, q, 2) == [(0, 0), (1, 4)]
    tied = HashCodeMatrix.from_signs([[1, 1, 1, 1], [-1, -1, 1, 1], [1, -1, 1, -1]])
    assert search(tied, q, 3) == [(0, 1), (1, 1), (2, 1)]
    assert len(search(db, q, 10)) == 2


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 30), b=st.integers(1, 12), seed=st.integers(0, 1000), R=st.integers(1, 40))
def test_search_matches_sorted_brute_force(n, b, seed, R):
    db = random_codes(n, b, seed)
    q = random_codes(1, b, seed + 1)
    dist = [int(np.sum(q.bits()[0] != db.bits()[k])) for k in range(n)]
    expect = sorted(range(n), key=lambda k: (dist[k], k))[:R]
    assert search(db, q, R) == [(k, dist[k]) for k in expect]


def test_identity_fig2_codes():
    codes = HashCodeMatrix.from_signs([[1, -1, 1], [1, 1, 1]])
    inner = int(codes.signs()[0] @ codes.signs()[1])
    assert inner == 1 and (3 - inner) // 2 == hamming(codes[0], codes[1])
    assert verify_identities(codes, exhaustive=True).ok


@pytest.mark.parametrize("b", [1, 2, 5, 8])
def test_identities_exhaustive(b):
    report = verify_identities(all_codes(b), exhaustive=True)
    assert report.pairs_checked == 2 ** b * (2 ** b + 1) // 2
    assert report.ok


def test_identities_random_long_codes():
    report = verify_identities(random_codes(500, 64, 1), sample_pairs=10_000, seed=2)
    assert report.ok and report.pairs_checked == 10_000


def test_bound_examples():
    r = quantization_bound_report([[1.0, 1.0], [0.5, 0.5]])
    assert r.itq_error[0] == 0 and r.bound_rhs[0] == pytest.approx(0) and not r.violated[0]
    assert r.itq_error[1] == pytest.approx(0.5)
    assert r.bound_rhs[1] == pytest.approx(0, abs=1e-12)
    assert r.violated[1]
    assert r.exact_rhs[1] == pytest.approx(0.5 + 2 - 2)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 16).flatmap(lambda b: st.lists(
    st.floats(-1, 1, allow_nan=False), min_size=b, max_size=b)))
def test_first_proof_step_holds_everywhere(u):
    u = np.array(u)
    sg = np.where(u > 0, 1.0, -1.0)
    assert abs(np.sum((u - sg) ** 2) - np.sum((np.abs(u) - 1) ** 2)) <= 1e-12
    quantization_bound_report(u[None, :])


def test_bound_holds_on_sqrt_b_sphere():
    # the stated inequality is valid once ||u||^2 = b; only the vertices
    # lie on that sphere inside the cube, where it is an equality
    for b in (2, 4, 8, 16):
        ids = np.arange(min(2 ** b, 4096))
        V = np.where((ids[:, None] >> np.arange(b)) & 1, 1.0, -1.0)
        r = quantization_bound_report(V)
        assert np.allclose(r.itq_error, r.bound_rhs, atol=1e-9)
        assert not r.violated.any()


def test_bound_rejects_bad_embeddings():
    with pytest.raises(InputError):
        quantization_bound_report([[0.2, np.nan]])
    with pytest.raises(InputError):
        quantization_bound_report([[0.2, 1.5]])


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 20), b=st.integers(1, 200), seed=st.integers(0, 10 ** 6))
def test_code_file_round_trip(tmp_path_factory, n, b, seed):
    codes = random_codes(n, b, seed)
    path = tmp_path_factory.mktemp("c") / "x.chnb"
    save_codes(path, codes)
    assert load_codes(path) == codes


def test_code_file_corruption():
    data = dumps_codes(random_codes(3, 10, 0))
    with pytest.raises(ParseError):
        loads_codes(b"XXXX" + data[4:])
    with pytest.raises(ParseError):
        loads_codes(data[:-1])
    with pytest.raises(ParseError):
        loads_codes(data[:5])


@pytest.mark.parametrize("b", range(1, 8))
def test_hamming_is_a_metric_exhaustively(b):
    D = hamming_matrix(all_codes(b), all_codes(b))
    assert np.array_equal(D, D.T)
    assert np.all((D == 0) == np.eye(len(D), dtype=bool))
    # triangle inequality over every triple
    assert np.all(D[:, None, :] <= D[:, :, None] + D[None, :, :])


def test_hamming_metric_b8_all_triples():
    D = hamming_matrix(all_codes(8), all_codes(8))
    assert np.array_equal(D, D.T) and np.all((D == 0) == np.eye(256, dtype=bool))
    for k in range(256):
        assert np.all(D[k][:, None] <= D[k][None, :] + D)
