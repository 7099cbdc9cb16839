import numpy as np
import pytest
from hypothesis import given, strategies as st

from subseg.bases import (BasisKind, lsf_rmse_curve, make_dct1d, make_dct2d, make_hadamard,
                          make_polynomial2d, make_sinusoid1d, orthonormalize, polynomial_1d,
                          zigzag_order)
from subseg.errors import DegeneracyError, ParameterError


def test_dct_dc_column_is_constant():
    b = make_dct2d(8, 1)
    assert b.columns.shape == (64, 1)
    np.testing.assert_allclose(b.columns[:, 0], 1 / 8, atol=1e-15)
    assert b.kind is BasisKind.DCT2D


def test_dct_zigzag_prefix():
    b = make_dct2d(64, 10)
    assert b.ordering[:6] == ((0, 0), (0, 1), (1, 0), (2, 0), (1, 1), (0, 2))


def test_full_dct_is_orthonormal():
    b = make_dct2d(4, 16)
    assert b.orthonormality_error() < 1e-12


def test_dct_count_out_of_range():
    with pytest.raises(ParameterError):
        make_dct2d(4, 17)
    with pytest.raises(ParameterError):
        make_dct2d(4, 0)


def test_zigzag_is_bijection():
    pairs = zigzag_order(7)
    assert sorted(pairs) == [(u, v) for u in range(7) for v in range(7)]
    sums = [u + v for u, v in pairs]
    assert sums == sorted(sums)


def test_polynomial_constant_column():
    b = make_polynomial2d(8, 1)
    np.testing.assert_allclose(b.columns[:, 0], 1 / 8, atol=1e-14)


def test_polynomial_linear_term_by_hand():
    # Gram-Schmidt of {1, x} on x = 1..4 leaves x - 2.5 normalized
    q = polynomial_1d(4, 1)
    expected = np.array([-1.5, -0.5, 0.5, 1.5]) / np.sqrt(5.0)
    lin = q[:, 1] * np.sign(q[-1, 1])
    np.testing.assert_allclose(lin, expected, atol=1e-12)


def test_polynomial_orthonormal():
    assert make_polynomial2d(8, 10).orthonormality_error() < 1e-10


def test_hadamard_base_case():
    b = make_hadamard(2, 2)
    np.testing.assert_allclose(b.columns, np.array([[1, 1], [1, -1]]) / np.sqrt(2), atol=1e-15)


def test_hadamard_entries_and_sequency():
    b = make_hadamard(4, 4)
    np.testing.assert_allclose(np.abs(b.columns), 0.5)
    assert b.orthonormality_error() < 1e-12
    changes = [int(np.sum(np.diff(np.sign(c)) != 0)) for c in b.columns.T]
    assert changes == [0, 1, 2, 3]


def test_hadamard_large_block():
    b = make_hadamard(4096, 8)
    assert b.columns.shape == (4096, 8)
    assert b.orthonormality_error() < 1e-10


def test_hadamard_rejects_non_power_of_two():
    with pytest.raises(ParameterError):
        make_hadamard(12, 4)


def test_orthonormalize_identity_unchanged():
    b = orthonormalize(np.eye(5))
    np.testing.assert_allclose(b.columns, np.eye(5), atol=1e-15)


def test_orthonormalize_duplicate_column():
    m = np.random.default_rng(0).normal(size=(8, 3))
    m[:, 2] = m[:, 0]
    with pytest.raises(DegeneracyError) as err:
        orthonormalize(m)
    assert err.value.rank == 2


def test_orthonormalize_matches_qr_oracle():
    m = np.random.default_rng(1).normal(size=(16, 4))
    q = orthonormalize(m).columns
    assert np.max(np.abs(q.T @ q - np.eye(4))) < 1e-10
    # QR spans the same nested spaces; columns agree up to sign
    qr = np.linalg.qr(m)[0]
    np.testing.assert_allclose(np.abs(q.T @ qr), np.eye(4), atol=1e-10)


def test_orthonormalize_idempotent():
    q = orthonormalize(np.random.default_rng(2).normal(size=(10, 3))).columns
    np.testing.assert_allclose(orthonormalize(q).columns, q, atol=1e-12)


def test_one_dimensional_bases_orthonormal():
    assert make_dct1d(256, 10).orthonormality_error() < 1e-10
    assert make_sinusoid1d(256, 10).orthonormality_error() < 1e-10


def test_truncate_keeps_prefix():
    b = make_dct2d(8, 10)
    t = b.truncate(4)
    np.testing.assert_array_equal(t.columns, b.columns[:, :4])
    assert t.ordering == b.ordering[:4]


@given(st.sampled_from([4, 8, 16]), st.integers(0, 2**31 - 1))
def test_full_dct_reconstructs_any_block(n, seed):
    b = make_dct2d(n, n * n)
    f = np.random.default_rng(seed).uniform(0, 255, n * n)
    rec = b.synthesize(b.coefficients(f))
    assert np.sqrt(np.mean((rec - f) ** 2)) < 1e-8


@given(st.integers(1, 30), st.integers(0, 2**31 - 1))
def test_lsf_rmse_non_increasing(k, seed):
    rng = np.random.default_rng(seed)
    f = rng.uniform(0, 255, size=(8, 8))
    curve = lsf_rmse_curve(f, make_dct2d(8, max(k, 2)))
    assert np.all(np.diff(curve) <= 0)
