"""Smooth-plus-sparse block decomposition solved with ADMM.

Minimizes ``||alpha||_1 + lam1 ||f - P alpha||_1 + lam2 ||D f - D P alpha||_1``
by splitting ``y = alpha``, ``z = f - P alpha`` and ``x = D f - D P alpha``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg as sla

from .bases import BasisSet
from .errors import DataError, NumericalError, ParameterError
from .operators import (DifferenceOperator, difference_operator, difference_operator_1d,
                        soft_threshold)
from .results import DecompositionResult


@dataclass(frozen=True)
class SdConfig:
    basis: BasisSet
    lambda1: float = 10.0
    lambda2: float = 4.0
    rho1: float = 1.0
    rho2: float = 1.0
    rho3: float = 1.0
    max_iters: int = 50
    tol: float = 1e-6
    inlier_threshold: float = 10.0
    diffop: DifferenceOperator | None = field(default=None)

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "rho1", "rho2", "rho3", "inlier_threshold"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.max_iters < 1:
            raise ParameterError("max_iters must be at least 1")
        if self.diffop is None:
            op = (difference_operator(self.basis.block_side) if self.basis.block_side
                  else difference_operator_1d(self.basis.n))
            object.__setattr__(self, "diffop", op)
        if self.diffop.length != self.basis.n:
            raise ParameterError("difference operator and basis sizes differ")


@dataclass
class SdState:
    alpha: np.ndarray
    y: np.ndarray
    z: np.ndarray
    x_aux: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    u3: np.ndarray
    loss_trace: list = field(default_factory=list)


@lru_cache(maxsize=64)
def _system(basis: BasisSet, op: DifferenceOperator, rho1: float, rho2: float, rho3: float):
    """``D P`` and the Cholesky factor of ``A``; identical for every block."""
    p = basis.columns
    dp = np.asarray(op.stacked @ p)
    a = rho3 * dp.T @ dp + rho2 * p.T @ p + rho1 * np.eye(basis.k)
    return dp, sla.cho_factor(a), a


def _signal(block, n: int) -> np.ndarray:
    f = np.asarray(getattr(block, "values", block), dtype=float).ravel(order="F")
    if f.size != n:
        raise DataError(f"block has {f.size} pixels but basis expects {n}")
    if not np.all(np.isfinite(f)):
        raise DataError("block intensities must be finite")
    return f


def sd_objective(alpha, block, cfg: SdConfig) -> float:
    f = _signal(block, cfg.basis.n)
    s = f - cfg.basis.synthesize(alpha)
    return float(np.abs(alpha).sum() + cfg.lambda1 * np.abs(s).sum()
                 + cfg.lambda2 * np.abs(cfg.diffop.apply(s)).sum())


def sd_init(f: np.ndarray, cfg: SdConfig) -> SdState:
    p = cfg.basis.columns
    alpha = p.T @ f
    s = f - p @ alpha
    k, n = p.shape[1], p.shape[0]
    return SdState(alpha, alpha.copy(), s, cfg.diffop.apply(s), np.zeros(k), np.zeros(n),
                   np.zeros(cfg.diffop.rows))


def sd_solve(block, cfg: SdConfig, state: SdState | None = None) -> DecompositionResult:
    f = _signal(block, cfg.basis.n)
    p = cfg.basis.columns
    dp, factor, _ = _system(cfg.basis, cfg.diffop, cfg.rho1, cfg.rho2, cfg.rho3)
    df = cfg.diffop.apply(f)
    st = state or sd_init(f, cfg)
    r1, r2, r3 = cfg.rho1, cfg.rho2, cfg.rho3
    prev = None
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        rhs = (st.u1 - p.T @ st.u2 - dp.T @ st.u3 + r1 * st.y
               + r2 * p.T @ (f - st.z) + r3 * dp.T @ (df - st.x_aux))
        st.alpha = sla.cho_solve(factor, rhs)
        pa = p @ st.alpha
        dpa = dp @ st.alpha
        st.y = soft_threshold(st.alpha - st.u1 / r1, 1.0 / r1)
        st.z = soft_threshold(f - pa - st.u2 / r2, cfg.lambda1 / r2)
        st.x_aux = soft_threshold(df - dpa - st.u3 / r3, cfg.lambda2 / r3)
        st.u1 = st.u1 + r1 * (st.y - st.alpha)
        st.u2 = st.u2 + r2 * (st.z + pa - f)
        st.u3 = st.u3 + r3 * (st.x_aux + dpa - df)
        if not np.all(np.isfinite(st.alpha)) or not np.all(np.isfinite(st.u2)):
            raise NumericalError("non-finite ADMM iterate", iteration=it)
        loss = sd_objective(st.alpha, f, cfg)
        st.loss_trace.append(loss)
        if prev is not None and abs(prev - loss) < cfg.tol * max(abs(prev), 1e-300):
            converged = True
            break
        prev = loss

    s = f - p @ st.alpha
    mask = np.abs(s) >= cfg.inlier_threshold
    diag = {
        "primal_residuals": (
            float(np.linalg.norm(st.y - st.alpha)),
            float(np.linalg.norm(st.z + p @ st.alpha - f)),
            float(np.linalg.norm(st.x_aux + dp @ st.alpha - df)),
        ),
        "state": st,
    }
    return DecompositionResult(alpha=[st.alpha], sparse=s, mask=mask,
                               mask_continuous=np.abs(s), loss_trace=list(st.loss_trace),
                               iterations=it, converged=converged, diagnostics=diag)
