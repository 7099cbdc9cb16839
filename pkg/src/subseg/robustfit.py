"""Background fitting on a single block: least squares, least absolute deviation and RANSAC."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bases import BasisSet
from .errors import DataError, DegeneracyError, ParameterError

IRLS_WEIGHT_FLOOR = 1e-6
# K x K sample systems with a worse condition number are treated as singular.
SAMPLE_COND_LIMIT = 1e10


@dataclass
class FitResult:
    alpha: np.ndarray
    inlier_mask: np.ndarray
    residual: np.ndarray
    inlier_ratio: float
    converged: bool = True
    iterations: int = 0

    @property
    def foreground(self) -> np.ndarray:
        return ~self.inlier_mask


@dataclass(frozen=True)
class RansacConfig:
    num_bases: int | None = 10
    inlier_threshold: float = 10.0
    max_iters: int = 200
    early_stop_ratio: float = 0.95
    rng_seed: int | None = 0

    def __post_init__(self):
        if self.inlier_threshold <= 0:
            raise ParameterError("inlier threshold must be positive")
        if self.max_iters < 1:
            raise ParameterError("max_iters must be at least 1")
        if not 0 < self.early_stop_ratio <= 1:
            raise ParameterError("early_stop_ratio must lie in (0, 1]")
        if self.num_bases is not None and self.num_bases < 1:
            raise ParameterError("num_bases must be positive")


def _signal(block) -> np.ndarray:
    """BlockSignal, flat vector or 2D block (column-major) as a float vector."""
    f = np.asarray(getattr(block, "values", block), dtype=float).ravel(order="F")
    if not np.all(np.isfinite(f)):
        raise DataError("block intensities must be finite")
    return f


def _check(f: np.ndarray, basis: BasisSet):
    if f.size != basis.n:
        raise DataError(f"block has {f.size} pixels but basis expects {basis.n}")


def _result(f, p, alpha, eps_in, converged=True, iterations=0) -> FitResult:
    residual = f - p @ alpha
    inliers = np.abs(residual) < eps_in
    return FitResult(alpha, inliers, residual, float(inliers.mean()), converged, iterations)


def fit_lsf(block, basis: BasisSet, inlier_threshold: float = 10.0) -> FitResult:
    """Least-squares fit; orthonormal columns reduce it to ``alpha = P^T f``."""
    f = _signal(block)
    _check(f, basis)
    return _result(f, basis.columns, basis.coefficients(f), inlier_threshold)


def lad_objective(f, basis: BasisSet, alpha) -> float:
    return float(np.abs(_signal(f) - basis.synthesize(alpha)).sum())


def fit_lad(block, basis: BasisSet, max_iters: int = 100, tol: float = 1e-8,
            inlier_threshold: float = 10.0) -> FitResult:
    """Least absolute deviation fit by IRLS started from the least-squares solution.

    The best iterate seen is returned, so the l1 objective never exceeds the
    least-squares one.  ``converged`` is False when ``max_iters`` ran out.
    """
    f = _signal(block)
    _check(f, basis)
    p = basis.columns
    alpha = p.T @ f
    best_alpha, best_obj = alpha, np.abs(f - p @ alpha).sum()
    prev = best_obj
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        r = f - p @ alpha
        w = 1.0 / np.maximum(np.abs(r), IRLS_WEIGHT_FLOOR)
        pw = p * w[:, None]
        try:
            alpha = np.linalg.solve(p.T @ pw, pw.T @ f)
        except np.linalg.LinAlgError:
            alpha = np.linalg.lstsq(pw.T @ p, pw.T @ f, rcond=None)[0]
        obj = np.abs(f - p @ alpha).sum()
        if obj < best_obj:
            best_alpha, best_obj = alpha, obj
        if abs(prev - obj) <= tol * max(prev, 1e-300):
            converged = True
            break
        prev = obj
    return _result(f, p, best_alpha, inlier_threshold, converged, it)


def ransac_segment(block, basis: BasisSet, cfg: RansacConfig | None = None,
                   rng: np.random.Generator | None = None) -> FitResult:
    """RANSAC background fit; pixels outside the final consensus set are foreground.

    Each trial solves the K x K system on K distinct random pixels.  Singular
    samples are redrawn and still count as a trial.  The best consensus set is
    refit by least squares and thresholded once more.
    """
    cfg = cfg or RansacConfig()
    f = _signal(block)
    _check(f, basis)
    if cfg.num_bases is not None and cfg.num_bases != basis.k:
        basis = basis.truncate(cfg.num_bases)
    p = basis.columns
    n, k = p.shape
    if k > n:
        raise ParameterError("more bases than pixels")
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    eps = cfg.inlier_threshold

    best_count, best_inliers = -1, None
    trials = 0
    for trials in range(1, cfg.max_iters + 1):
        idx = rng.choice(n, size=k, replace=False)
        sub = p[idx]
        if np.linalg.cond(sub) > SAMPLE_COND_LIMIT:
            continue
        alpha = np.linalg.solve(sub, f[idx])
        inliers = np.abs(f - p @ alpha) < eps
        count = int(inliers.sum())
        if count > best_count:
            best_count, best_inliers = count, inliers
        if best_count >= cfg.early_stop_ratio * n:
            break
    if best_inliers is None:
        raise DegeneracyError(f"all {cfg.max_iters} RANSAC samples gave singular systems", rank=None)

    if best_inliers.any():
        alpha = np.linalg.lstsq(p[best_inliers], f[best_inliers], rcond=None)[0]
    else:
        alpha = p.T @ f
    return _result(f, p, alpha, eps, True, trials)
