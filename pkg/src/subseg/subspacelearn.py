"""Learning a smooth subspace from training blocks corrupted by sparse positive outliers.

The model is ``x_i = P alpha_i + s_i + noise`` with ``P^T P = I`` and
``s_i >= 0``; the objective summed over samples is

    1/2 ||x_i - P a_i - s_i||^2 + lam1/2 ||D P a_i||^2
        + lam2 ||s_i||_1 + lam3 sum_m ||s_{i,g_m}||_2
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .bases import BasisKind, BasisSet, gram_schmidt, make_dct2d
from .errors import DataError, DegeneracyError, NumericalError, ParameterError
from .operators import DifferenceOperator, difference_operator, difference_operator_1d
from .results import DecompositionResult

FORMAT_VERSION = 1


def grid_groups(block_side: int, cell: int = 2) -> np.ndarray:
    """Labels of non-overlapping ``cell x cell`` squares, in column-major pixel order."""
    if cell < 1:
        raise ParameterError("group cell size must be positive")
    idx = np.arange(block_side)
    per_row = -(-block_side // cell)
    lab = (idx[:, None] // cell) + per_row * (idx[None, :] // cell)
    return lab.ravel(order="F")


def interval_groups(length: int, size: int = 2) -> np.ndarray:
    return np.arange(length) // size


@dataclass(frozen=True)
class SlConfig:
    subspace_dim: int = 20
    lambda1: float = 0.5
    lambda2: float = 1.0
    lambda3: float = 2.0
    group_cell: int = 2
    outer_iters: int = 50
    tol: float = 1e-5
    seed: int = 0
    s_rule: str = "shrink_then_clamp"
    groups: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.subspace_dim < 1:
            raise ParameterError("subspace_dim must be positive")
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be non-negative")
        if self.s_rule not in ("shrink_then_clamp", "exact"):
            raise ParameterError("s_rule must be 'shrink_then_clamp' or 'exact'")
        if self.outer_iters < 1:
            raise ParameterError("outer_iters must be at least 1")

    def group_labels(self, n: int, block_side: int) -> np.ndarray:
        if self.groups is not None:
            g = np.asarray(self.groups, dtype=np.int64)
            if g.shape != (n,) or g.min() < 0:
                raise ParameterError("groups must label every coordinate with a non-negative id")
            return g
        if block_side:
            return grid_groups(block_side, self.group_cell)
        return interval_groups(n, self.group_cell)


class _Problem:
    """Shared operators for one block geometry."""

    def __init__(self, n: int, block_side: int, cfg: SlConfig):
        self.n = n
        self.block_side = block_side
        self.cfg = cfg
        self.op: DifferenceOperator = (difference_operator(block_side) if block_side
                                       else difference_operator_1d(n))
        self.lap = self.op.gram
        self.labels = cfg.group_labels(n, block_side)
        self.num_groups = int(self.labels.max()) + 1
        self._smoother = None

    @property
    def smoother(self):
        """Sparse LU of ``I + lam1 D^T D``, built on first use."""
        if self._smoother is None:
            m = (sp.identity(self.n, format="csc") + self.cfg.lambda1 * self.lap).tocsc()
            self._smoother = spla.splu(m)
        return self._smoother

    def group_norms(self, s: np.ndarray) -> np.ndarray:
        """``(num_groups, m)`` l2 norms of every group of every column of ``s``."""
        s = s[:, None] if s.ndim == 1 else s
        return np.sqrt(_group_sums(self.labels, self.num_groups, s * s))


def _group_sums(labels: np.ndarray, num: int, values: np.ndarray) -> np.ndarray:
    """Per-group sums along axis 0 of a vector or matrix."""
    if values.ndim == 1:
        return np.bincount(labels, weights=values, minlength=num)
    ind = sp.csr_matrix((np.ones(labels.size), (labels, np.arange(labels.size))),
                        shape=(num, labels.size))
    return np.asarray(ind @ values)


def _as_matrix(blocks) -> tuple[np.ndarray, int]:
    """Training blocks to an ``n x m`` matrix plus block side (0 for 1D)."""
    if isinstance(blocks, np.ndarray) and blocks.ndim == 2:
        n = blocks.shape[0]
        root = int(round(np.sqrt(n)))
        return np.asarray(blocks, dtype=float), root if root * root == n else 0
    cols, side = [], None
    for b in blocks:
        v = np.asarray(getattr(b, "values", b), dtype=float)
        bs = getattr(b, "block_side", None)
        if v.ndim == 2:
            bs = v.shape[0]
            v = v.ravel(order="F")
        if side is None:
            side = bs if bs is not None else 0
        cols.append(v)
    if not cols:
        raise DataError("no training blocks")
    try:
        x = np.column_stack(cols)
    except ValueError as exc:
        raise DataError("training blocks differ in size") from exc
    if side is None or (side and side * side != x.shape[0]):
        root = int(round(np.sqrt(x.shape[0])))
        side = root if root * root == x.shape[0] else 0
    return x, side


def sl_objective(x, p, a, s, prob: _Problem) -> float:
    """Total training objective; ``x``, ``s`` are ``n x m`` and ``a`` is ``k x m``."""
    cfg = prob.cfg
    pa = p @ a
    fit = 0.5 * np.sum((x - pa - s) ** 2)
    smooth = 0.5 * cfg.lambda1 * np.sum((prob.op.stacked @ pa) ** 2)
    return float(fit + smooth + cfg.lambda2 * np.abs(s).sum()
                 + cfg.lambda3 * prob.group_norms(s).sum())


def sl_update_alpha(x, s, p, cfg: SlConfig, lap=None) -> np.ndarray:
    """``(P^T P + lam1 P^T D^T D P)^{-1} P^T (x - s)``; works column-wise on matrices."""
    p = np.asarray(p, dtype=float)
    g = p.T @ p
    if cfg.lambda1:
        if lap is None:
            n = p.shape[0]
            root = int(round(np.sqrt(n)))
            op = difference_operator(root) if root * root == n else difference_operator_1d(n)
            lap = op.gram
        g = g + cfg.lambda1 * (p.T @ (lap @ p))
    return np.linalg.solve(g, p.T @ (np.asarray(x, dtype=float) - s))


def sl_update_s(x, alpha, p, cfg: SlConfig, labels=None) -> np.ndarray:
    """Group shrinkage of the shifted residual, clamped to be non-negative.

    With ``s_rule='shrink_then_clamp'`` the block-soft map is applied to ``r - lam2`` and
    negatives are zeroed afterwards.  ``s_rule='exact'`` clamps first, which
    is the exact minimizer under ``s >= 0``.
    """
    r = np.asarray(x, dtype=float) - np.asarray(p) @ np.asarray(alpha)
    v = r - cfg.lambda2
    if labels is None:
        n = r.shape[0]
        root = int(round(np.sqrt(n)))
        labels = grid_groups(root, cfg.group_cell) if root * root == n else \
            interval_groups(n, cfg.group_cell)
    if cfg.s_rule == "exact":
        v = np.maximum(v, 0.0)
    num = int(labels.max()) + 1
    norms = np.sqrt(_group_sums(labels, num, v * v))
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norms > cfg.lambda3, 1.0 - cfg.lambda3 / np.where(norms > 0, norms, 1), 0.0)
    return np.maximum(scale[labels] * v, 0.0)


def _reexpress(p_raw: np.ndarray, a: np.ndarray, fallback: np.ndarray):
    """Orthonormalize ``p_raw`` and rewrite ``a`` so that ``P a`` is unchanged.

    A column that turns out dependent is replaced by ``fallback`` (unit
    direction), which only changes ``P a`` if that column carried weight.
    """
    p = p_raw.copy()
    for _ in range(p.shape[1] + 1):
        try:
            q = gram_schmidt(p)
            break
        except DegeneracyError as exc:
            j = exc.rank
            p[:, j] = fallback[:, j % fallback.shape[1]]
            fallback = np.roll(fallback, -1, axis=1)
    else:
        raise NumericalError("could not orthonormalize the learned basis")
    r = q.T @ p
    return q, r @ a


def sl_update_basis(x, a, s, p, cfg: SlConfig, prob: _Problem | None = None,
                    orthonormalize: bool = True):
    """Column-by-column closed-form update of ``P`` followed by Gram-Schmidt.

    Returns ``(P_new, A_new, P_raw)`` where ``A_new`` re-expresses the
    coefficients in the orthonormalized basis and ``P_raw`` is the basis
    before orthonormalization.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x, a, s = x[:, None], np.asarray(a)[:, None], np.asarray(s)[:, None]
    if prob is None:
        root = int(round(np.sqrt(x.shape[0])))
        prob = _Problem(x.shape[0], root if root * root == x.shape[0] else 0, cfg)
    p = np.array(p, dtype=float, copy=True)
    lam = cfg.lambda1
    xs = x - s
    resid_norm = np.linalg.norm(xs - p @ a, axis=0)
    order = np.argsort(-resid_norm, kind="stable")
    fallback = (xs - p @ a)[:, order[: p.shape[1]]]
    fallback = fallback / np.maximum(np.linalg.norm(fallback, axis=0), 1e-300)
    for j in range(p.shape[1]):
        aj = a[j]
        c = float(aj @ aj)
        if c <= 1e-300:
            continue
        paj = p @ (a @ aj)
        beta = xs @ aj - paj + p[:, j] * c
        if lam:
            beta = beta - lam * (prob.lap @ (paj - p[:, j] * c))
            p[:, j] = prob.smoother.solve(beta) / c
        else:
            p[:, j] = beta / c
    dead = np.einsum("ij,ij->i", a, a) <= 1e-300
    for j in np.flatnonzero(dead):
        p[:, j] = fallback[:, j % fallback.shape[1]]
    if not orthonormalize:
        return p, a, p
    q, a_new = _reexpress(p, a, fallback)
    return q, a_new, p


@dataclass
class LearnedSubspace:
    basis: BasisSet
    loss_trace: list = field(default_factory=list)
    step_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    def save(self, path) -> None:
        """Text format: a ``# subseg-subspace v1 n k block_side`` header then one row per pixel."""
        b = self.basis
        header = f"subseg-subspace v{FORMAT_VERSION} {b.n} {b.k} {b.block_side} {b.kind.value}"
        np.savetxt(Path(path), b.columns, fmt="%.17g", header=header)

    @classmethod
    def load(cls, path) -> "LearnedSubspace":
        path = Path(path)
        try:
            with open(path) as fh:
                first = fh.readline().lstrip("#").split()
            if len(first) < 5 or first[0] != "subseg-subspace":
                raise DataError(f"{path} is not a subspace file")
            if first[1] != f"v{FORMAT_VERSION}":
                raise DataError(f"unsupported subspace file version {first[1]}")
            n, k, side = int(first[2]), int(first[3]), int(first[4])
            cols = np.loadtxt(path, ndmin=2)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read subspace {path}: {exc}") from exc
        if cols.shape != (n, k):
            raise DataError(f"{path}: header says {n}x{k}, data is {cols.shape}")
        basis = BasisSet(cols, side, tuple(range(k)), BasisKind(first[5] if len(first) > 5 else "learned"))
        return cls(basis)


def initial_basis(n: int, block_side: int, k: int, seed: int) -> np.ndarray:
    if block_side:
        return np.array(make_dct2d(block_side, k).columns)
    rng = np.random.default_rng(seed)
    return gram_schmidt(rng.normal(size=(n, k)))


def sl_train(training_blocks, cfg: SlConfig | None = None, init: np.ndarray | None = None,
             record_steps: bool = False) -> LearnedSubspace:
    """Alternate coefficient, outlier and basis updates until the loss settles.

    ``step_trace`` (when ``record_steps``) holds ``(stage, loss)`` pairs for
    every update: ``alpha``, ``s``, ``basis_raw`` (before Gram-Schmidt) and
    ``basis`` (after Gram-Schmidt with coefficients re-expressed).
    """
    cfg = cfg or SlConfig()
    x, side = _as_matrix(training_blocks)
    n, m = x.shape
    k = cfg.subspace_dim
    if k > n:
        raise ParameterError(f"subspace_dim {k} exceeds signal length {n}")
    if m < k:
        raise DataError(f"need at least {k} training blocks, got {m}")
    if not np.all(np.isfinite(x)):
        raise DataError("training data must be finite")
    prob = _Problem(n, side, cfg)
    p = init.copy() if init is not None else initial_basis(n, side, k, cfg.seed)
    s = np.zeros_like(x)
    a = sl_update_alpha(x, s, p, cfg, prob.lap)
    steps = []
    losses = []
    prev = sl_objective(x, p, a, s, prob)
    converged = False
    it = 0
    for it in range(1, cfg.outer_iters + 1):
        a = sl_update_alpha(x, s, p, cfg, prob.lap)
        if record_steps:
            steps.append(("alpha", sl_objective(x, p, a, s, prob)))
        s = sl_update_s(x, a, p, cfg, prob.labels)
        if record_steps:
            steps.append(("s", sl_objective(x, p, a, s, prob)))
        a_old = a
        p, a, p_raw = sl_update_basis(x, a, s, p, cfg, prob)
        if record_steps:
            steps.append(("basis_raw", sl_objective(x, p_raw, a_old, s, prob)))
        loss = sl_objective(x, p, a, s, prob)
        if record_steps:
            steps.append(("basis", loss))
        if not np.isfinite(loss):
            raise NumericalError("training loss is not finite", iteration=it)
        losses.append(loss)
        if abs(prev - loss) < cfg.tol * max(abs(prev), 1e-300):
            converged = True
            break
        prev = loss
    basis = BasisSet(p, side, tuple(range(k)), BasisKind.LEARNED,
                     meta={"lambda": (cfg.lambda1, cfg.lambda2, cfg.lambda3)})
    return LearnedSubspace(basis, losses, steps, it, converged)


def sl_segment(block, learned, cfg: SlConfig | None = None, max_iters: int = 100,
               tol: float = 1e-8) -> DecompositionResult:
    """Fixed-basis decomposition; the support of the non-negative outlier part is foreground."""
    cfg = cfg or SlConfig()
    basis = learned.basis if isinstance(learned, LearnedSubspace) else learned
    f = np.asarray(getattr(block, "values", block), dtype=float).ravel(order="F")
    if f.size != basis.n:
        raise DataError(f"block has {f.size} pixels but subspace expects {basis.n}")
    prob = _Problem(basis.n, basis.block_side, cfg)
    p = np.asarray(basis.columns)
    s = np.zeros_like(f)
    trace = []
    prev = None
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        a = sl_update_alpha(f, s, p, cfg, prob.lap)
        s = sl_update_s(f, a, p, cfg, prob.labels)
        loss = sl_objective(f[:, None], p, a[:, None], s[:, None], prob)
        if not np.isfinite(loss):
            raise NumericalError("segmentation loss is not finite", iteration=it)
        trace.append(loss)
        if prev is not None and abs(prev - loss) <= tol * max(abs(prev), 1e-300):
            converged = True
            break
        prev = loss
    return DecompositionResult(alpha=[a], sparse=s, mask=s > 0, mask_continuous=s,
                               loss_trace=trace, iterations=it, converged=converged)
