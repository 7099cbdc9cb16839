"""Masked low-rank plus sparse decomposition ``X = (1-W) o L + W o S``.

Rows of ``X`` index pixels and columns index frames, so the row-wise group
penalty on ``W`` favours a pixel being foreground in many frames at once.
The relaxed problem

    ||L||_* + lam1 ||S||_1 + lam2 ||W||_{2,1},  W in [0, 1]

is solved by linearized ADMM: each block takes one gradient step on the
augmented term and then applies its proximal map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericalError, ParameterError
from .operators import project_box01, soft_threshold, svt


@dataclass(frozen=True)
class MrConfig:
    lambda1: float = 0.02
    lambda2: float = 3.0
    rho: float = 0.1
    # None selects 2x the Lipschitz bound of the linearized block
    rho_l: float | None = None
    rho_s: float | None = None
    rho_w: float | None = None
    max_iters: int = 300
    tol: float = 1e-7
    binarize_threshold: float = 0.5

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "rho"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")
        for name in ("rho_l", "rho_s", "rho_w"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ParameterError(f"{name} must be positive")
        if self.max_iters < 1:
            raise ParameterError("max_iters must be at least 1")
        if not 0 < self.binarize_threshold < 1:
            raise ParameterError("binarize_threshold must lie in (0, 1)")


@dataclass
class MrResult:
    L: np.ndarray
    S: np.ndarray
    W_continuous: np.ndarray
    W_binary: np.ndarray
    U: np.ndarray
    loss_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    diagnostics: dict = field(default_factory=dict)


def row_group_norm(w) -> float:
    """Sum over rows of the row's Euclidean norm."""
    w = np.asarray(w, dtype=float)
    return float(np.sqrt((w * w).sum(axis=1)).sum())


def row_block_soft(m: np.ndarray, t: float) -> np.ndarray:
    """Block soft-thresholding applied to every row independently."""
    norms = np.sqrt((m * m).sum(axis=1))
    scale = np.where(norms > t, 1.0 - t / np.where(norms > 0, norms, 1.0), 0.0)
    return m * scale[:, None]


def feasibility_residual(x, l, s, w) -> np.ndarray:
    return x - (1.0 - w) * l - w * s


def mr_objective(x, l, s, w, cfg: MrConfig) -> float:
    """Relaxed objective plus the quadratic feasibility penalty."""
    r = feasibility_residual(x, l, s, w)
    nuc = float(np.linalg.svd(l, compute_uv=False).sum())
    return (nuc + cfg.lambda1 * float(np.abs(s).sum()) + cfg.lambda2 * row_group_norm(w)
            + 0.5 * cfg.rho * float((r * r).sum()))


def _matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.size == 0:
        raise DataError(f"expected a non-empty matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("matrix entries must be finite")
    return x


def _lipschitz_weights(cfg: MrConfig, l, s):
    # the linearized maps are diagonal: (1-W)^2 and W^2 are at most 1, (L-S)^2 is data dependent
    d = l - s
    rho_w = cfg.rho_w or max(2.0 * float(np.max(d * d)), 1e-12)
    return cfg.rho_l or 2.0, cfg.rho_s or 2.0, rho_w


def mr_step_l(x, l, s, w, u, cfg: MrConfig, rho_l: float) -> np.ndarray:
    """Gradient step on the augmented term followed by singular value thresholding."""
    ws = 1.0 - w
    g = ws * l + w * s - x - u / cfg.rho
    return svt(l - g * ws / rho_l, 1.0 / (cfg.rho * rho_l))


def mr_step_s(x, l, s, w, u, cfg: MrConfig, rho_s: float) -> np.ndarray:
    g = (1.0 - w) * l + w * s - x - u / cfg.rho
    return soft_threshold(s - g * w / rho_s, cfg.lambda1 / (cfg.rho * rho_s))


def mr_step_w(x, l, s, w, u, cfg: MrConfig, rho_w: float) -> np.ndarray:
    """Row-wise block shrinkage of the linearized step, then projection into the box."""
    d = l - s
    q = d * w - l + x + u / cfg.rho
    return project_box01(row_block_soft(w - q * d / rho_w, cfg.lambda2 / (cfg.rho * rho_w)))


def mr_solve(x, cfg: MrConfig | None = None) -> MrResult:
    cfg = cfg or MrConfig()
    x = _matrix(x)
    l = np.zeros_like(x)
    s = x.copy()
    w = np.zeros_like(x)
    u = np.zeros_like(x)

    trace = []
    prev = None
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        rho_l, rho_s, _ = _lipschitz_weights(cfg, l, s)
        l = mr_step_l(x, l, s, w, u, cfg, rho_l)
        s = mr_step_s(x, l, s, w, u, cfg, rho_s)
        # C uses the freshly updated L and S
        w = mr_step_w(x, l, s, w, u, cfg, _lipschitz_weights(cfg, l, s)[2])
        u = u + cfg.rho * feasibility_residual(x, l, s, w)
        if not (np.all(np.isfinite(l)) and np.all(np.isfinite(u))):
            raise NumericalError("non-finite masked RPCA iterate", iteration=it)
        loss = mr_objective(x, l, s, w, cfg)
        trace.append(loss)
        if prev is not None and abs(prev - loss) <= cfg.tol * abs(prev):
            converged = True
            break
        prev = loss

    wb = (w >= cfg.binarize_threshold).astype(np.uint8)
    diag = {"feasibility": float(np.linalg.norm(feasibility_residual(x, l, s, w))),
            "rank": int(np.linalg.matrix_rank(l))}
    return MrResult(l, s, w, wb, u, trace, it, converged, diag)


def synth_overlaid_lowrank(rows: int = 40, cols: int = 30, rank: int = 2, density: float = 0.05,
                           spike_scale: float = 5.0, seed: int = 0):
    """Rank-``rank`` background with spikes overlaid on a few whole-row runs.

    Returns ``(X, L_true, S_true, W_true)``.  The support is clustered in rows:
    a handful of rows carry contiguous runs of frames so that about
    ``density`` of all entries are foreground.
    """
    rng = np.random.default_rng(seed)
    l_true = rng.normal(size=(rows, rank)) @ rng.normal(size=(rank, cols))
    peak = float(np.abs(l_true).max())
    target = max(1, int(round(density * rows * cols)))
    run = max(1, cols // 2)
    w_true = np.zeros((rows, cols), dtype=np.uint8)
    order = rng.permutation(rows)
    i = 0
    while int(w_true.sum()) < target:
        length = min(run, target - int(w_true.sum()))
        start = rng.integers(0, cols - length + 1)
        w_true[order[i], start:start + length] = 1
        i += 1
    mag = spike_scale * peak * (1.0 + rng.uniform(size=(rows, cols)))
    s_true = np.where(w_true == 1, rng.choice([-1.0, 1.0], size=(rows, cols)) * mag, 0.0)
    x = np.where(w_true == 1, s_true, l_true)
    return x, l_true, s_true, w_true
