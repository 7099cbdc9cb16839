"""Global-motion fitting on optical flow and masked moving-object segmentation.

Pixel coordinates follow image conventions: ``x`` is the column, ``y`` the row,
both 0-based from the top-left corner.  A homography maps ``(x, y)`` to

    x' = (a1 + a2 x + a3 y) / (1 + a7 x + a8 y)
    y' = (a4 + a5 x + a6 y) / (1 + a7 x + a8 y)

and the flow is ``u = x' - x``, ``v = y' - y``.  Clearing denominators gives two
linear equations in ``a`` per pixel; the affine model drops ``a7, a8``.
Per-pixel vectors are flattened column-major like every other signal here.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DataError, DegeneracyError, NumericalError, ParameterError
from .operators import grid_difference_operator, project_box01, soft_threshold

FLO_MAGIC = 202021.25
RANK_TOL = 1e-10


class MotionModel(str, enum.Enum):
    HOMOGRAPHY = "homography"
    AFFINE = "affine"

    @property
    def num_params(self) -> int:
        return 8 if self is MotionModel.HOMOGRAPHY else 6


IDENTITY = {MotionModel.HOMOGRAPHY: np.array([0, 1, 0, 0, 0, 1, 0, 0], dtype=float),
            MotionModel.AFFINE: np.array([0, 1, 0, 0, 0, 1], dtype=float)}


@dataclass(frozen=True)
class FlowField:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if u.ndim != 2 or u.shape != v.shape or u.size == 0:
            raise DataError(f"flow components must be equal non-empty 2D arrays, got {u.shape} and {v.shape}")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise DataError("flow must be finite")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def dims(self) -> tuple:
        return self.u.shape


@dataclass(frozen=True)
class HomographySystem:
    px: np.ndarray
    py: np.ndarray
    bx: np.ndarray
    by: np.ndarray
    dims: tuple
    model: MotionModel = MotionModel.HOMOGRAPHY

    @property
    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        return np.vstack([self.px, self.py]), np.concatenate([self.bx, self.by])


def pixel_grid(dims) -> tuple[np.ndarray, np.ndarray]:
    """Column-major flattened ``(x, y)`` = (column, row) coordinates."""
    rows, cols = dims
    y, x = np.meshgrid(np.arange(rows, dtype=float), np.arange(cols, dtype=float), indexing="ij")
    return x.ravel(order="F"), y.ravel(order="F")


def _rows(x, y, xn, yn, model: MotionModel):
    n = x.size
    one, zero = np.ones(n), np.zeros(n)
    px = [one, x, y, zero, zero, zero]
    py = [zero, zero, zero, one, x, y]
    if model is MotionModel.HOMOGRAPHY:
        px += [-x * xn, -y * xn]
        py += [-x * yn, -y * yn]
    return np.column_stack(px), np.column_stack(py)


def build_system(flow: FlowField, model: MotionModel | str = MotionModel.HOMOGRAPHY) -> HomographySystem:
    model = MotionModel(model)
    x, y = pixel_grid(flow.dims)
    bx = x + flow.u.ravel(order="F")
    by = y + flow.v.ravel(order="F")
    px, py = _rows(x, y, bx, by, model)
    return HomographySystem(px, py, bx, by, flow.dims, model)


def homography_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.size == 6:
        a = np.concatenate([a, [0.0, 0.0]])
    return np.array([[a[1], a[2], a[0]], [a[4], a[5], a[3]], [a[6], a[7], 1.0]])


def params_from_matrix(h: np.ndarray, model: MotionModel | str = MotionModel.HOMOGRAPHY) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    if abs(h[2, 2]) < 1e-300:
        raise DegeneracyError("homography has a vanishing scale entry")
    h = h / h[2, 2]
    a = np.array([h[0, 2], h[0, 0], h[0, 1], h[1, 2], h[1, 0], h[1, 1], h[2, 0], h[2, 1]])
    return a[:MotionModel(model).num_params]


def predict_flow(a, dims) -> FlowField:
    """Flow induced at every pixel by the global mapping ``a``."""
    x, y = pixel_grid(dims)
    h = homography_matrix(a)
    den = h[2, 0] * x + h[2, 1] * y + 1.0
    if np.any(np.abs(den) < 1e-12):
        raise NumericalError("mapping sends a pixel to infinity")
    xn = (h[0, 0] * x + h[0, 1] * y + h[0, 2]) / den
    yn = (h[1, 0] * x + h[1, 1] * y + h[1, 2]) / den
    return FlowField((xn - x).reshape(dims, order="F"), (yn - y).reshape(dims, order="F"))


def _normalizer(dims) -> np.ndarray:
    rows, cols = dims
    cx, cy = (cols - 1) / 2.0, (rows - 1) / 2.0
    sx, sy = max(cx, 1.0), max(cy, 1.0)
    return np.array([[1 / sx, 0, -cx / sx], [0, 1 / sy, -cy / sy], [0, 0, 1.0]])


def _solve_lsq(p: np.ndarray, b: np.ndarray) -> np.ndarray:
    scale = np.linalg.norm(p, axis=0)
    scale[scale == 0] = 1.0
    sol, _, rank, sv = np.linalg.lstsq(p / scale, b, rcond=None)
    if rank < p.shape[1] or sv[-1] <= RANK_TOL * sv[0]:
        raise DegeneracyError(f"motion system has rank {rank} < {p.shape[1]}", rank=int(rank))
    return sol / scale


def fit_global_lsq(system: HomographySystem, normalize: bool = True,
                   weights: np.ndarray | None = None) -> np.ndarray:
    """Least-squares motion parameters over both flow components jointly.

    With ``normalize`` the equations are rebuilt in coordinates scaled to
    ``[-1, 1]`` and the solution is mapped back, which only improves
    conditioning.  ``weights`` (one per pixel) scale both equations of a pixel.
    """
    model = system.model
    if normalize:
        t = _normalizer(system.dims)
        x, y = pixel_grid(system.dims)
        xs, ys = t[0, 0] * x + t[0, 2], t[1, 1] * y + t[1, 2]
        bx = t[0, 0] * system.bx + t[0, 2]
        by = t[1, 1] * system.by + t[1, 2]
        px, py = _rows(xs, ys, bx, by, model)
    else:
        px, py, bx, by = system.px, system.py, system.bx, system.by
    xg, yg = pixel_grid(system.dims)
    p = np.vstack([px, py])
    b = np.concatenate([bx, by])
    if weights is not None:
        ww = np.concatenate([weights, weights])
        p, b = p * ww[:, None], b * ww
    a = _solve_lsq(p, b)
    if not normalize:
        return a
    h = np.linalg.inv(t) @ homography_matrix(a) @ t
    return params_from_matrix(h, model)


@dataclass(frozen=True)
class MotionConfig:
    lambda1: float = 1.0
    lambda2: float = 0.8
    lambda3: float = 0.5
    rho1: float = 1.0
    rho2: float = 1.0
    max_iters: int = 50
    tol: float = 1e-6
    binarize_threshold: float = 0.5
    model: MotionModel = MotionModel.HOMOGRAPHY
    # "lsq_error" starts from pixels whose least-squares flow error exceeds the mean
    init: str = "lsq_error"

    def __post_init__(self):
        object.__setattr__(self, "model", MotionModel(self.model))
        if self.init not in ("zeros", "lsq_error"):
            raise ParameterError(f"unknown init {self.init!r}")
        for name in ("lambda1", "lambda2", "lambda3", "rho1", "rho2"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")
        if self.max_iters < 1:
            raise ParameterError("max_iters must be at least 1")
        if not 0 < self.binarize_threshold < 1:
            raise ParameterError("binarize_threshold must lie in (0, 1)")


@dataclass
class MotionResult:
    a: np.ndarray
    s_x: np.ndarray
    s_y: np.ndarray
    w_continuous: np.ndarray
    w_binary: np.ndarray
    loss_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    diagnostics: dict = field(default_factory=dict)


def motion_objective(system: HomographySystem, a, s_x, s_y, w, cfg: MotionConfig) -> float:
    w = np.asarray(w, dtype=float).ravel(order="F")
    rx = system.bx - (1 - w) * (system.px @ a) - w * s_x
    ry = system.by - (1 - w) * (system.py @ a) - w * s_y
    op = grid_difference_operator(*system.dims)
    x, y = pixel_grid(system.dims)
    return float(0.5 * (rx @ rx + ry @ ry)
                 + cfg.lambda1 * (np.abs(s_x - x).sum() + np.abs(s_y - y).sum())
                 + cfg.lambda2 * np.abs(w).sum() + cfg.lambda3 * np.abs(op.apply(w)).sum())


def _masked_shift(t: np.ndarray, w: np.ndarray, lam: float) -> np.ndarray:
    # argmin_d 1/2 (t - w d)^2 + lam |d|, elementwise; d is irrelevant where w = 0
    out = np.zeros_like(t)
    on = w > 0
    out[on] = np.sign(t[on]) * np.maximum(np.abs(t[on]) / w[on] - lam / w[on] ** 2, 0.0)
    return out


def motion_masked_segment(flow: FlowField, cfg: MotionConfig | None = None) -> MotionResult:
    """Jointly estimate global motion ``a``, outlier positions ``s`` and one shared mask ``w``.

    The sparsity penalty acts on ``s - (x, y)``, the displacement of an
    outlier pixel, so the result does not depend on where the coordinate
    origin sits.  ``s`` starts at the observed new positions so that the first
    mask update already sees every pixel's disagreement with the global fit.
    """
    cfg = cfg or MotionConfig()
    system = build_system(flow, cfg.model)
    op = grid_difference_operator(*system.dims)
    d, dtd = op.stacked, op.gram
    n = system.bx.size
    eye = sp.identity(n, format="csc")
    px, py, bx, by = system.px, system.py, system.bx, system.by
    xg, yg = pixel_grid(system.dims)

    a = fit_global_lsq(system)
    if cfg.init == "lsq_error":
        e = flow_error(flow, a).ravel(order="F")
        w = (e > e.mean()).astype(float)
    else:
        w = np.zeros(n)
    y = w.copy()
    z = d @ w
    u1 = np.zeros(n)
    u2 = np.zeros(d.shape[0])
    sx, sy = bx.copy(), by.copy()

    trace = []
    prev = None
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        ws = 1.0 - w
        p = np.vstack([px * ws[:, None], py * ws[:, None]])
        target = np.concatenate([bx - w * sx, by - w * sy])
        try:
            a = _solve_lsq(p, target)
        except DegeneracyError:
            # too few background pixels left to pin the mapping; keep the previous one
            pass
        gx, gy = px @ a, py @ a
        cx, cy = sx - gx, sy - gy
        hx, hy = bx - gx, by - gy
        m_w = (sp.diags(cx * cx + cy * cy) + cfg.rho2 * dtd + cfg.rho1 * eye).tocsc()
        rhs = cx * hx + cy * hy + cfg.rho1 * y + cfg.rho2 * (d.T @ z) - u1 - d.T @ u2
        w = project_box01(spla.spsolve(m_w, rhs))
        sx = xg + _masked_shift(bx - (1 - w) * gx - w * xg, w, cfg.lambda1)
        sy = yg + _masked_shift(by - (1 - w) * gy - w * yg, w, cfg.lambda1)
        y = soft_threshold(w + u1 / cfg.rho1, cfg.lambda2 / cfg.rho1)
        dw = d @ w
        z = soft_threshold(dw + u2 / cfg.rho2, cfg.lambda3 / cfg.rho2)
        u1 = u1 + cfg.rho1 * (w - y)
        u2 = u2 + cfg.rho2 * (dw - z)

        loss = motion_objective(system, a, sx, sy, w, cfg)
        if not np.isfinite(loss):
            raise NumericalError("motion segmentation loss is not finite", iteration=it)
        trace.append(loss)
        if prev is not None and abs(loss - prev) <= cfg.tol * abs(prev):
            converged = True
            break
        prev = loss

    dims = system.dims
    wb = (w >= cfg.binarize_threshold).astype(np.uint8)
    diag = {"foreground_fraction": float(wb.mean())}
    return MotionResult(a, sx, sy, w.reshape(dims, order="F"), wb.reshape(dims, order="F"),
                        trace, it, converged, diag)


def flow_error(flow: FlowField, a) -> np.ndarray:
    """Per-pixel Euclidean distance between observed and model-predicted flow."""
    pred = predict_flow(a, flow.dims)
    return np.hypot(flow.u - pred.u, flow.v - pred.v)


def lsq_threshold_segment(flow: FlowField, threshold: float = 1.0,
                          model: MotionModel | str = MotionModel.HOMOGRAPHY):
    """Baseline: global least-squares fit on all pixels, then threshold the flow error."""
    if not threshold > 0:
        raise ParameterError("threshold must be positive")
    a = fit_global_lsq(build_system(flow, model))
    return a, (flow_error(flow, a) > threshold).astype(np.uint8)


def mask_iou(pred, truth) -> float:
    p, t = np.asarray(pred, bool), np.asarray(truth, bool)
    union = (p | t).sum()
    return 1.0 if union == 0 else float((p & t).sum() / union)


def synth_motion_scene(dims=(48, 64), outlier_fraction: float = 0.15, seed: int = 0,
                       noise: float = 0.0, relative_motion: float = 4.0):
    """Homography flow with one rectangle moving by its own translation.

    Returns ``(flow, mask, a_true)``; the rectangle covers about
    ``outlier_fraction`` of the frame and its flow differs from the background
    flow by at least ``relative_motion / 2`` pixels everywhere.
    """
    rng = np.random.default_rng(seed)
    rows, cols = dims
    a_true = np.array([rng.uniform(-2, 2), 1 + rng.uniform(-0.03, 0.03), rng.uniform(-0.02, 0.02),
                       rng.uniform(-2, 2), rng.uniform(-0.02, 0.02), 1 + rng.uniform(-0.03, 0.03),
                       rng.uniform(-2e-4, 2e-4), rng.uniform(-2e-4, 2e-4)])
    bg = predict_flow(a_true, dims)
    mask = np.zeros(dims, dtype=np.uint8)
    if outlier_fraction > 0:
        area = outlier_fraction * rows * cols
        aspect = rng.uniform(0.7, 1.4)
        h = int(np.clip(round(np.sqrt(area * aspect)), 1, rows))
        wdt = int(np.clip(round(area / h), 1, cols))
        r0 = rng.integers(0, rows - h + 1)
        c0 = rng.integers(0, cols - wdt + 1)
        mask[r0:r0 + h, c0:c0 + wdt] = 1
    u, v = bg.u.copy(), bg.v.copy()
    inside = mask == 1
    if inside.any():
        ang = rng.uniform(0, 2 * np.pi)
        shift = relative_motion * np.array([np.cos(ang), np.sin(ang)])
        tu = float(np.mean(bg.u[inside]) + shift[0])
        tv = float(np.mean(bg.v[inside]) + shift[1])
        u[inside], v[inside] = tu, tv
    if noise > 0:
        u = u + rng.normal(0, noise, dims)
        v = v + rng.normal(0, noise, dims)
    return FlowField(u, v), mask, a_true


def read_flow(path) -> FlowField:
    """Read a Middlebury ``.flo`` file or a CSV with ``row,col,u,v`` lines."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"flow file not found: {path}")
    if path.suffix.lower() == ".flo":
        raw = path.read_bytes()
        if len(raw) < 12 or np.frombuffer(raw[:4], "<f4")[0] != np.float32(FLO_MAGIC):
            raise DataError(f"{path} is not a .flo file")
        width, height = (int(v) for v in np.frombuffer(raw[4:12], "<i4"))
        data = np.frombuffer(raw[12:], "<f4")
        if width <= 0 or height <= 0 or data.size != 2 * width * height:
            raise DataError(f"{path} has an inconsistent size header")
        data = data.reshape(height, width, 2).astype(float)
        return FlowField(data[..., 0], data[..., 1])
    try:
        with path.open(newline="") as fh:
            recs = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
        if recs and not _is_number(recs[0][0]):
            recs = recs[1:]
        arr = np.array(recs, dtype=float)
    except (ValueError, OSError) as exc:
        raise DataError(f"cannot parse flow CSV {path}: {exc}") from exc
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise DataError(f"flow CSV {path} must have 4 columns: row, col, u, v")
    r, c = arr[:, 0].astype(int), arr[:, 1].astype(int)
    if r.min() < 0 or c.min() < 0:
        raise DataError("negative pixel index in flow CSV")
    dims = (r.max() + 1, c.max() + 1)
    if arr.shape[0] != dims[0] * dims[1]:
        raise DataError("flow CSV does not cover a full rectangular grid")
    u, v = np.full(dims, np.nan), np.full(dims, np.nan)
    u[r, c], v[r, c] = arr[:, 2], arr[:, 3]
    return FlowField(u, v)


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def write_flow(path, flow: FlowField) -> None:
    path = Path(path)
    if path.suffix.lower() == ".flo":
        h, w = flow.dims
        with path.open("wb") as fh:
            fh.write(np.array([FLO_MAGIC], "<f4").tobytes())
            fh.write(np.array([w, h], "<i4").tobytes())
            fh.write(np.stack([flow.u, flow.v], axis=-1).astype("<f4").tobytes())
        return
    with path.open("w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["row", "col", "u", "v"])
        for r in range(flow.dims[0]):
            for c in range(flow.dims[1]):
                out.writerow([r, c, repr(float(flow.u[r, c])), repr(float(flow.v[r, c]))])
