"""Overlaid two-component decomposition ``x = (1-w) o P1 a1 + w o P2 a2``.

The binary mask ``w`` is relaxed to the box ``[0, 1]`` and the problem

    1/2 ||x - (1-w) o P1 a1 - w o P2 a2||^2 + lam1 ||w||_1 + lam2 ||D w||_1

is solved by ADMM with ``y = w`` and ``z = D w``; the coefficient vectors are
kept ``k``-sparse by hard projection.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .bases import BasisSet
from .errors import DataError, NumericalError, ParameterError
from .operators import (DifferenceOperator, difference_operator, difference_operator_1d,
                        project_box01, project_topk, soft_threshold)

RIDGE = 1e-8
# Gram matrices with a worse condition number get the ridge.
GRAM_COND_LIMIT = 1e12


class BinarizeMode(str, enum.Enum):
    AT_END = "at_end"
    EACH_ITERATION = "each_iteration"


class InitScheme(str, enum.Enum):
    ZEROS = "zeros"
    HALF = "half"
    GAUSSIAN = "gaussian"
    UNIFORM = "uniform"
    LSF_ERROR = "lsf_error"


@dataclass(frozen=True)
class MdConfig:
    basis1: BasisSet
    basis2: BasisSet
    k1: int | None = None
    k2: int | None = None
    lambda1: float = 10.0
    lambda2: float = 0.2
    rho1: float = 1.0
    rho2: float = 1.0
    max_iters: int = 10
    tol: float = 1e-6
    binarize_threshold: float = 0.5
    binarize_mode: BinarizeMode = BinarizeMode.AT_END
    init: InitScheme = InitScheme.ZEROS
    seed: int = 0
    refit: bool = True
    diffop: DifferenceOperator | None = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "binarize_mode", BinarizeMode(self.binarize_mode))
        object.__setattr__(self, "init", InitScheme(self.init))
        if self.basis1.n != self.basis2.n:
            raise ParameterError("the two bases have different signal lengths")
        object.__setattr__(self, "k1", self.basis1.k if self.k1 is None else self.k1)
        object.__setattr__(self, "k2", self.basis2.k if self.k2 is None else self.k2)
        if not 1 <= self.k1 <= self.basis1.k or not 1 <= self.k2 <= self.basis2.k:
            raise ParameterError("sparsity caps must lie in [1, basis dimension]")
        for name in ("lambda1", "lambda2", "rho1", "rho2"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")
        if not 0 < self.binarize_threshold < 1:
            raise ParameterError("binarize_threshold must lie in (0, 1)")
        if self.max_iters < 1:
            raise ParameterError("max_iters must be at least 1")
        if self.diffop is None:
            side = self.basis1.block_side
            op = difference_operator(side) if side else difference_operator_1d(self.basis1.n)
            object.__setattr__(self, "diffop", op)
        if self.diffop.length != self.basis1.n:
            raise ParameterError("difference operator does not match the bases")


@dataclass
class MaskedResult:
    alpha1: np.ndarray
    alpha2: np.ndarray
    w_continuous: np.ndarray
    w_binary: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    loss_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    diagnostics: dict = field(default_factory=dict)

    @property
    def reconstruction(self) -> np.ndarray:
        wb = self.w_binary.astype(float)
        return (1 - wb) * self.c1 + wb * self.c2


def _signal(x, n: int) -> np.ndarray:
    f = np.asarray(getattr(x, "values", x), dtype=float).ravel(order="F")
    if f.size != n:
        raise DataError(f"signal has {f.size} entries but the bases expect {n}")
    if not np.all(np.isfinite(f)):
        raise DataError("signal must be finite")
    return f


def md_objective(x, alpha1, alpha2, w, cfg: MdConfig) -> float:
    f = _signal(x, cfg.basis1.n)
    w = np.asarray(w, dtype=float)
    c1 = cfg.basis1.synthesize(alpha1)
    c2 = cfg.basis2.synthesize(alpha2)
    r = f - (1 - w) * c1 - w * c2
    return float(0.5 * r @ r + cfg.lambda1 * np.abs(w).sum()
                 + cfg.lambda2 * np.abs(cfg.diffop.apply(w)).sum())


def weighted_ls(p: np.ndarray, weights: np.ndarray, target: np.ndarray, stats: dict) -> np.ndarray:
    """``(P^T W^T W P)^{-1} P^T W^T target`` with a ridge fallback when singular."""
    pw = p * weights[:, None]
    g = pw.T @ pw
    rhs = pw.T @ target
    if not np.all(np.isfinite(g)) or np.linalg.cond(g) > GRAM_COND_LIMIT:
        stats["ridge_steps"] = stats.get("ridge_steps", 0) + 1
        g = g + RIDGE * np.eye(g.shape[0])
    return np.linalg.solve(g, rhs)


def md_initialize(x, cfg: MdConfig, scheme: InitScheme | str | None = None) -> np.ndarray:
    """Starting mask; random schemes draw from ``cfg.seed``."""
    scheme = InitScheme(scheme or cfg.init)
    n = cfg.basis1.n
    rng = np.random.default_rng(cfg.seed)
    if scheme is InitScheme.ZEROS:
        return np.zeros(n)
    if scheme is InitScheme.HALF:
        return np.full(n, 0.5)
    if scheme is InitScheme.GAUSSIAN:
        return project_box01(rng.normal(0.5, np.sqrt(0.1), size=n))
    if scheme is InitScheme.UNIFORM:
        return rng.uniform(0.0, 1.0, size=n)
    f = _signal(x, n)
    r = np.abs(f - cfg.basis1.synthesize(cfg.basis1.coefficients(f)))
    return (r > r.mean()).astype(float)


def _binarize(w, thr):
    return (w >= thr).astype(np.uint8)


def md_solve(x, cfg: MdConfig, w0: np.ndarray | None = None) -> MaskedResult:
    f = _signal(x, cfg.basis1.n)
    p1, p2 = np.asarray(cfg.basis1.columns), np.asarray(cfg.basis2.columns)
    d = cfg.diffop.stacked
    dtd = cfg.diffop.gram
    n = f.size
    eye = sp.identity(n, format="csc")
    stats: dict = {}

    w = project_box01(md_initialize(f, cfg) if w0 is None else w0)
    y = w.copy()
    z = d @ w
    u1 = np.zeros(n)
    u2 = np.zeros(d.shape[0])
    a2 = np.zeros(p2.shape[1])
    a1 = np.zeros(p1.shape[1])

    trace = []
    prev = 1.0
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        ws = 1.0 - w
        a1 = project_topk(weighted_ls(p1, ws, f - w * (p2 @ a2), stats), cfg.k1)
        c1 = p1 @ a1
        a2 = project_topk(weighted_ls(p2, w, f - ws * c1, stats), cfg.k2)
        c2 = p2 @ a2
        cdiag = c2 - c1
        h = f - c1
        m_w = (sp.diags(cdiag * cdiag) + cfg.rho2 * dtd + cfg.rho1 * eye).tocsc()
        rhs = cdiag * h + cfg.rho1 * y + cfg.rho2 * (d.T @ z) - u1 - d.T @ u2
        w = project_box01(spla.spsolve(m_w, rhs))
        if cfg.binarize_mode is BinarizeMode.EACH_ITERATION:
            w = _binarize(w, cfg.binarize_threshold).astype(float)
        y = soft_threshold(w + u1 / cfg.rho1, cfg.lambda1 / cfg.rho1)
        dw = d @ w
        z = soft_threshold(dw + u2 / cfg.rho2, cfg.lambda2 / cfg.rho2)
        u1 = u1 + cfg.rho1 * (w - y)
        u2 = u2 + cfg.rho2 * (dw - z)

        loss = md_objective(f, a1, a2, w, cfg)
        if not np.isfinite(loss):
            raise NumericalError("masked decomposition loss is not finite", iteration=it)
        trace.append(loss)
        if abs(loss - prev) <= cfg.tol * abs(prev):
            converged = True
            break
        prev = loss

    wb = _binarize(w, cfg.binarize_threshold)
    if cfg.refit:
        # final coefficients fit each component on its own binary support
        fb = wb.astype(float)
        a1 = project_topk(weighted_ls(p1, 1.0 - fb, (1.0 - fb) * f, stats), cfg.k1)
        a2 = project_topk(weighted_ls(p2, fb, fb * f, stats), cfg.k2)
    diag = {"ridge_steps": stats.get("ridge_steps", 0)}
    return MaskedResult(a1, a2, w, wb, p1 @ a1, p2 @ a2, trace, it, converged, diag)
