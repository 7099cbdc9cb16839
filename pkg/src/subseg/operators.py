"""Finite differences and proximal maps shared by the solvers."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import NumericalError, ParameterError


def _diff_1d(n: int) -> sp.csr_matrix:
    if n < 2:
        return sp.csr_matrix((0, max(n, 0)))
    return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n), format="csr")


@dataclass(frozen=True, eq=False)
class DifferenceOperator:
    """Forward differences between existing neighbours, no wraparound.

    For a 2D block of side ``N`` (column-major vectorization) ``dx`` holds the
    horizontal differences ``S[x, y+1] - S[x, y]`` and ``dy`` the vertical ones
    ``S[x+1, y] - S[x, y]``; each has ``N*(N-1)`` rows.  A 1D operator
    (``block_side == 0``) has an empty ``dy``.
    """

    block_side: int
    length: int
    dx: sp.csr_matrix
    dy: sp.csr_matrix

    @property
    def stacked(self) -> sp.csr_matrix:
        return self._stacked

    def __post_init__(self):
        object.__setattr__(self, "_stacked", sp.vstack([self.dx, self.dy], format="csr"))
        object.__setattr__(self, "_gram", (self._stacked.T @ self._stacked).tocsc())

    @property
    def gram(self) -> sp.csc_matrix:
        """``D^T D``, the graph Laplacian of the pixel grid."""
        return self._gram

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self._stacked @ v

    def adjoint(self, v: np.ndarray) -> np.ndarray:
        return self._stacked.T @ v

    @property
    def rows(self) -> int:
        return self._stacked.shape[0]


@lru_cache(maxsize=32)
def difference_operator(block_side: int) -> DifferenceOperator:
    """Anisotropic 2D difference operator for ``N x N`` blocks."""
    if block_side < 1:
        raise ParameterError(f"block_side must be positive, got {block_side}")
    d = _diff_1d(block_side)
    eye = sp.identity(block_side, format="csr")
    dx = sp.kron(d, eye, format="csr")
    dy = sp.kron(eye, d, format="csr")
    return DifferenceOperator(block_side, block_side * block_side, dx, dy)


@lru_cache(maxsize=32)
def grid_difference_operator(rows: int, cols: int) -> DifferenceOperator:
    """Anisotropic differences on a ``rows x cols`` grid (column-major)."""
    if rows < 1 or cols < 1:
        raise ParameterError(f"grid dimensions must be positive, got {rows}x{cols}")
    if rows == cols:
        return difference_operator(rows)
    dx = sp.kron(_diff_1d(cols), sp.identity(rows, format="csr"), format="csr")
    dy = sp.kron(sp.identity(cols, format="csr"), _diff_1d(rows), format="csr")
    return DifferenceOperator(rows, rows * cols, dx, dy)


@lru_cache(maxsize=32)
def difference_operator_1d(length: int) -> DifferenceOperator:
    if length < 1:
        raise ParameterError(f"length must be positive, got {length}")
    return DifferenceOperator(0, length, _diff_1d(length), sp.csr_matrix((0, length)))


def total_variation(signal: np.ndarray, op: DifferenceOperator) -> float:
    """Anisotropic TV: sum of absolute horizontal and vertical differences."""
    x = np.asarray(signal, dtype=float).ravel()
    if x.size != op.length:
        raise ParameterError(f"signal length {x.size} does not match operator length {op.length}")
    return float(np.abs(op.apply(x)).sum())


def soft_threshold(x, t: float) -> np.ndarray:
    """Elementwise ``sign(x) * max(|x| - t, 0)``."""
    if t < 0:
        raise ParameterError(f"threshold must be non-negative, got {t}")
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def block_soft_threshold(x, t: float) -> np.ndarray:
    """Group shrinkage ``max(1 - t/||x||, 0) * x``; the zero vector maps to itself."""
    if t < 0:
        raise ParameterError(f"threshold must be non-negative, got {t}")
    x = np.asarray(x, dtype=float)
    norm = np.linalg.norm(x)
    if norm <= t or norm == 0.0:
        return np.zeros_like(x)
    return (1.0 - t / norm) * x


def group_soft_threshold(x: np.ndarray, labels: np.ndarray, t: float,
                         num_groups: int | None = None) -> np.ndarray:
    """``block_soft_threshold`` applied independently to each labelled group.

    ``x`` may be a vector or an ``n x m`` matrix (groups run along axis 0).
    """
    if t < 0:
        raise ParameterError(f"threshold must be non-negative, got {t}")
    x = np.asarray(x, dtype=float)
    if num_groups is None:
        num_groups = int(labels.max()) + 1
    sq = x * x
    if x.ndim == 1:
        norms = np.sqrt(np.bincount(labels, weights=sq, minlength=num_groups))
    else:
        norms = np.sqrt(np.stack(
            [np.bincount(labels, weights=sq[:, j], minlength=num_groups) for j in range(x.shape[1])],
            axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norms > t, 1.0 - t / np.where(norms > 0, norms, 1.0), 0.0)
    return scale[labels] * x


def svt(m, t: float) -> np.ndarray:
    """Singular value thresholding ``U max(S - t, 0) V^T`` (thin SVD)."""
    if t < 0:
        raise ParameterError(f"threshold must be non-negative, got {t}")
    m = np.asarray(m, dtype=float)
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD failed: {exc}") from exc
    s = np.maximum(s - t, 0.0)
    keep = s > 0
    return (u[:, keep] * s[keep]) @ vt[keep]


def project_box01(x) -> np.ndarray:
    return np.clip(np.asarray(x, dtype=float), 0.0, 1.0)


def project_topk(x, k: int) -> np.ndarray:
    """Keep the ``k`` largest-magnitude entries; ties favour lower indices."""
    x = np.asarray(x, dtype=float)
    if not 0 <= k <= x.size:
        raise ParameterError(f"k must lie in [0, {x.size}], got {k}")
    if k == x.size:
        return x.copy()
    out = np.zeros_like(x)
    if k:
        keep = np.argsort(-np.abs(x), kind="stable")[:k]
        out[keep] = x[keep]
    return out


def vec(block: np.ndarray) -> np.ndarray:
    """Column-major vectorization used throughout the package."""
    return np.asarray(block, dtype=float).ravel(order="F")


def unvec(values: np.ndarray, block_side: int) -> np.ndarray:
    return np.asarray(values).reshape((block_side, block_side), order="F")
