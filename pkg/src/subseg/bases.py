"""Orthonormal subspaces for block modelling.

All 2D bases act on blocks vectorized in column-major order, i.e. pixel
``(x, y)`` (row ``x``, column ``y``) sits at index ``x + N*y``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import DegeneracyError, ParameterError

ORTHO_TOL = 1e-10
# Relative residual norm below which a new direction counts as dependent.
DEPENDENCE_TOL = 1e-9


class BasisKind(str, enum.Enum):
    DCT2D = "dct2d"
    POLYNOMIAL2D = "polynomial2d"
    HADAMARD = "hadamard"
    LEARNED = "learned"
    CUSTOM = "custom"


@dataclass(frozen=True)
class BasisSet:
    """Column-orthonormal matrix of flattened basis functions.

    ``columns`` is an ``n x K`` read-only array; ``block_side`` is ``N`` with
    ``n = N**2`` for 2D bases or 0 for 1D ones.
    """

    columns: np.ndarray
    block_side: int
    ordering: tuple
    kind: BasisKind
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        cols = np.array(self.columns, dtype=float, copy=True)
        if cols.ndim != 2:
            raise ParameterError("basis columns must be a 2D matrix")
        n, k = cols.shape
        if k > n:
            raise ParameterError(f"more columns ({k}) than rows ({n})")
        if len(self.ordering) != k:
            raise ParameterError("ordering length must equal column count")
        if self.block_side and self.block_side**2 != n:
            raise ParameterError(f"block_side {self.block_side} does not match n={n}")
        cols.setflags(write=False)
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "ordering", tuple(self.ordering))

    @property
    def n(self) -> int:
        return self.columns.shape[0]

    @property
    def k(self) -> int:
        return self.columns.shape[1]

    def coefficients(self, signal: np.ndarray) -> np.ndarray:
        return self.columns.T @ np.asarray(signal, dtype=float)

    def synthesize(self, alpha: np.ndarray) -> np.ndarray:
        return self.columns @ np.asarray(alpha, dtype=float)

    def truncate(self, k: int) -> "BasisSet":
        if not 1 <= k <= self.k:
            raise ParameterError(f"cannot truncate {self.k} columns to {k}")
        return BasisSet(self.columns[:, :k], self.block_side, self.ordering[:k], self.kind)

    def orthonormality_error(self) -> float:
        g = self.columns.T @ self.columns
        return float(np.max(np.abs(g - np.eye(self.k)))) if self.k else 0.0

    def __hash__(self):
        return id(self)

    def __eq__(self, other):
        return self is other


def zigzag_order(block_side: int, count: int | None = None) -> list[tuple[int, int]]:
    """Frequency pairs ``(u, v)`` in JPEG-style zigzag order.

    Anti-diagonal ``d = u + v`` is walked with ``u`` ascending for odd ``d``
    and descending for even ``d``, so the sequence starts
    ``(0,0), (0,1), (1,0), (2,0), (1,1), (0,2)``.
    """
    n = block_side
    total = n * n
    if count is None:
        count = total
    out = []
    for d in range(2 * n - 1):
        lo, hi = max(0, d - n + 1), min(d, n - 1)
        us = range(lo, hi + 1) if d % 2 else range(hi, lo - 1, -1)
        for u in us:
            out.append((u, d - u))
            if len(out) == count:
                return out
    return out


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II vectors of length ``n`` as columns (column u = frequency u)."""
    x = np.arange(n)[:, None]
    u = np.arange(n)[None, :]
    c = np.cos((2 * x + 1) * np.pi * u / (2 * n))
    beta = np.full(n, np.sqrt(2.0 / n))
    beta[0] = np.sqrt(1.0 / n)
    return c * beta


def _outer_columns(rows_1d: np.ndarray, cols_1d: np.ndarray, pairs) -> np.ndarray:
    n = rows_1d.shape[0]
    us, vs = np.array(pairs, dtype=np.int64).reshape(-1, 2).T
    # entry (i, j) of each outer product lands at i + n*j, the column-major position
    return (cols_1d[:, vs][:, None, :] * rows_1d[:, us][None, :, :]).reshape(n * n, len(pairs))


def _check_count(block_side: int, num_bases: int):
    if block_side < 1:
        raise ParameterError(f"block_side must be positive, got {block_side}")
    if not 1 <= num_bases <= block_side * block_side:
        raise ParameterError(
            f"num_bases must lie in [1, {block_side * block_side}], got {num_bases}"
        )


@lru_cache(maxsize=64)
def make_dct2d(block_side: int, num_bases: int) -> BasisSet:
    """First ``num_bases`` separable 2D DCT-II functions in zigzag order."""
    _check_count(block_side, num_bases)
    pairs = zigzag_order(block_side, num_bases)
    d = dct_matrix(block_side)
    return BasisSet(_outer_columns(d, d, pairs), block_side, pairs, BasisKind.DCT2D)


def gram_schmidt(columns: np.ndarray, tol: float = DEPENDENCE_TOL) -> np.ndarray:
    """Modified Gram-Schmidt with one re-orthogonalization pass when needed.

    Raises DegeneracyError with ``rank`` set to the number of independent
    leading columns when column ``rank`` is numerically dependent.
    """
    a = np.array(columns, dtype=float, copy=True)
    if a.ndim == 1:
        a = a[:, None]
    n, k = a.shape
    q = np.zeros((n, k))
    for j in range(k):
        v = a[:, j].copy()
        norm0 = np.linalg.norm(v)
        if norm0 == 0 or not np.isfinite(norm0):
            raise DegeneracyError(f"column {j} is zero or non-finite", rank=j)
        for i in range(j):
            v -= (q[:, i] @ v) * q[:, i]
        norm = np.linalg.norm(v)
        # second pass whenever the first one cancelled heavily
        if j and norm < 0.5 * norm0:
            for i in range(j):
                v -= (q[:, i] @ v) * q[:, i]
            norm = np.linalg.norm(v)
        if norm <= tol * norm0:
            raise DegeneracyError(
                f"column {j} is linearly dependent on the preceding columns "
                f"(effective rank {j})",
                rank=j,
            )
        q[:, j] = v / norm
    return q


def orthonormalize(columns: np.ndarray, kind: BasisKind = BasisKind.CUSTOM,
                   block_side: int = 0) -> BasisSet:
    """Orthonormal basis spanning the same nested spaces as ``columns``."""
    q = gram_schmidt(columns)
    if block_side == 0:
        root = int(round(np.sqrt(q.shape[0])))
        block_side = root if root * root == q.shape[0] else 0
    return BasisSet(q, block_side, tuple(range(q.shape[1])), kind)


def polynomial_1d(block_side: int, max_degree: int) -> np.ndarray:
    """Orthonormalized monomials ``x**0 .. x**max_degree`` sampled on ``x = 1..N``.

    The monomials are evaluated on the affinely rescaled grid ``[-1, 1]``;
    each rescaled monomial equals a positive multiple of ``x**d`` plus lower
    degree terms, so Gram-Schmidt yields the same vectors while staying
    well conditioned.
    """
    if max_degree >= block_side:
        raise ParameterError(f"degree {max_degree} needs more than {block_side} samples")
    x = np.arange(1, block_side + 1, dtype=float)
    t = (x - x.mean()) / max(x.max() - x.mean(), 1.0)
    mono = np.vander(t, max_degree + 1, increasing=True)
    try:
        return gram_schmidt(mono)
    except DegeneracyError as exc:
        raise DegeneracyError(
            f"monomial of degree {exc.rank} is numerically dependent on lower degrees "
            f"for block side {block_side}",
            rank=exc.rank,
            degree=exc.rank,
        ) from None


@lru_cache(maxsize=64)
def make_polynomial2d(block_side: int, num_bases: int) -> BasisSet:
    """2D orthonormal polynomials ordered by total degree, zigzag within a degree."""
    _check_count(block_side, num_bases)
    pairs = zigzag_order(block_side, num_bases)
    max_deg = max(max(u, v) for u, v in pairs)
    q = polynomial_1d(block_side, max_deg)
    return BasisSet(_outer_columns(q, q, pairs), block_side, pairs, BasisKind.POLYNOMIAL2D)


def _bit_reverse(i: int, bits: int) -> int:
    r = 0
    for _ in range(bits):
        r = (r << 1) | (i & 1)
        i >>= 1
    return r


def walsh_columns(n: int, count: int) -> np.ndarray:
    """First ``count`` sequency-ordered Walsh (Hadamard) vectors of length ``n``, unit norm."""
    bits = n.bit_length() - 1
    idx = np.arange(n)
    out = np.empty((n, count))
    for s in range(count):
        natural = _bit_reverse(s ^ (s >> 1), bits)
        parity = np.zeros(n, dtype=np.int64)
        m = idx & natural
        while m.any():
            parity ^= m & 1
            m >>= 1
        out[:, s] = 1.0 - 2.0 * parity
    return out / np.sqrt(n)


@lru_cache(maxsize=64)
def make_hadamard(n: int, num_bases: int) -> BasisSet:
    """Sylvester Hadamard columns in ascending sequency (number of sign changes)."""
    if n < 1 or n & (n - 1):
        raise ParameterError(f"Hadamard length must be a power of two, got {n}")
    if not 1 <= num_bases <= n:
        raise ParameterError(f"num_bases must lie in [1, {n}], got {num_bases}")
    root = int(round(np.sqrt(n)))
    side = root if root * root == n else 0
    return BasisSet(walsh_columns(n, num_bases), side, tuple(range(num_bases)),
                    BasisKind.HADAMARD)


def make_dct1d(n: int, num_bases: int) -> BasisSet:
    if not 1 <= num_bases <= n:
        raise ParameterError(f"num_bases must lie in [1, {n}], got {num_bases}")
    return BasisSet(dct_matrix(n)[:, :num_bases], 0, tuple(range(num_bases)), BasisKind.CUSTOM)


def make_sinusoid1d(n: int, num_bases: int) -> BasisSet:
    """Orthonormal sine/cosine pairs at integer frequencies 1, 2, ... (no constant)."""
    if not 1 <= num_bases <= n - 1:
        raise ParameterError(f"num_bases must lie in [1, {n - 1}], got {num_bases}")
    t = np.arange(n)
    cols, order = [], []
    f = 1
    while len(cols) < num_bases:
        cols.append(np.cos(2 * np.pi * f * t / n))
        order.append(("cos", f))
        if len(cols) < num_bases:
            cols.append(np.sin(2 * np.pi * f * t / n))
            order.append(("sin", f))
        f += 1
    q = gram_schmidt(np.column_stack(cols))
    return BasisSet(q, 0, tuple(order), BasisKind.CUSTOM)


def lsf_rmse_curve(block: np.ndarray, basis: BasisSet) -> np.ndarray:
    """Least-squares residual RMSE when using the first 1..K columns.

    Uses the Pythagorean identity for nested orthonormal bases, so the curve is
    exactly non-increasing in floating point.
    """
    f = np.asarray(block, dtype=float).ravel(order="F")
    alpha = basis.coefficients(f)
    energy = float(f @ f) - np.cumsum(alpha**2)
    return np.sqrt(np.maximum(energy, 0.0) / f.size)
