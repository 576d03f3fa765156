import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ihalab.errors import DegenerateRowError, ShapeError
from ihalab.tensor import CONTRACTIONS, as_tensor, contract, matmul, numerical_rank, softmax_rows


def loop_mix(alpha, x):
    M, H, P = alpha.shape
    N, _, d = x.shape
    out = np.zeros((H, P, N, d))
    for h in range(H):
        for p in range(P):
            for n in range(N):
                for dd in range(d):
                    out[h, p, n, dd] = sum(alpha[m, h, p] * x[n, m, dd] for m in range(M))
    return out


def loop_collapse_general(r, t):
    H, Q = r.shape
    _, N, d = t.shape
    out = np.zeros((H, N, d))
    for h in range(H):
        for q in range(Q):
            out[h] += r[h, q] * t[q]
    return out


def test_matmul_matches_numpy(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(matmul(a, b), a @ b)


def test_matmul_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(3, 4\).*\(5, 2\)"):
        matmul(np.ones((3, 4)), np.ones((5, 2)))


def test_zero_sized_axis_rejected():
    with pytest.raises(ShapeError):
        as_tensor(np.ones((0, 3)))


def test_contractions_match_loops(rng):
    alpha = rng.normal(size=(3, 3, 2))
    x = rng.normal(size=(5, 3, 4))
    np.testing.assert_allclose(contract("mix_heads", alpha, x), loop_mix(alpha, x), atol=1e-13)
    r = rng.normal(size=(3, 6))
    t = rng.normal(size=(6, 5, 4))
    np.testing.assert_allclose(contract("collapse_general", r, t), loop_collapse_general(r, t), atol=1e-13)
    rb = rng.normal(size=(3, 2))
    tb = rng.normal(size=(3, 5, 2, 4))
    want = np.einsum("hp,hnpd->hnd", rb, tb)
    np.testing.assert_allclose(contract("collapse", rb, tb), want, atol=1e-13)


def test_contract_rejects_unknown_and_mismatch():
    with pytest.raises(ShapeError):
        contract("nope", np.ones(2))
    with pytest.raises(ShapeError):
        contract("mix_heads", np.ones((3, 3, 2)), np.ones((5, 2, 4)))
    with pytest.raises(ShapeError):
        contract("mix_heads", np.ones((3, 3)), np.ones((5, 3, 4)))
    assert set(CONTRACTIONS) == {"mix_heads", "collapse", "collapse_general"}


def test_softmax_rows_basic():
    np.testing.assert_allclose(softmax_rows(np.zeros((1, 3))), np.full((1, 3), 1 / 3), atol=1e-15)
    np.testing.assert_allclose(softmax_rows(np.array([[1000.0, 0.0]])), [[1.0, 0.0]], atol=1e-15)


def test_softmax_masked_entries_exactly_zero(rng):
    s = rng.normal(size=(4, 5))
    mask = rng.random((4, 5)) < 0.6
    mask[:, 0] = True
    p = softmax_rows(s, mask)
    assert np.all(p[~mask] == 0.0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-14)


def test_softmax_fully_masked_row_raises():
    with pytest.raises(DegenerateRowError):
        softmax_rows(np.zeros((2, 3)), np.array([[True, False, False], [False, False, False]]))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.floats(-50, 50))
def test_softmax_shift_invariant(m, n, c):
    s = np.random.default_rng(m * 7 + n).normal(size=(m, n))
    np.testing.assert_allclose(softmax_rows(s + c), softmax_rows(s), atol=1e-12)


def test_numerical_rank():
    assert numerical_rank(np.eye(5)) == 5
    assert numerical_rank(np.zeros((3, 3))) == 0
    a = np.outer(np.arange(1.0, 5.0), np.arange(1.0, 4.0))
    assert numerical_rank(a) == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 8), st.integers(0, 10_000))
def test_numerical_rank_of_product(m, n, r, seed):
    rng = np.random.default_rng(seed)
    r = min(r, m, n)
    a = rng.normal(size=(m, r)) @ rng.normal(size=(r, n))
    assert numerical_rank(a) == r
