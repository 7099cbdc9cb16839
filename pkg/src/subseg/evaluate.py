"""Mask scoring, the additive two-component baseline and corpus benchmarks."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bases import BasisSet, make_dct2d, make_hadamard
from .errors import DataError, NumericalError, ParameterError
from .imageio import MaskImage, extract_blocks, load_image, load_mask, stitch_masks, synth_sheet
from .maskeddecomp import MdConfig, md_solve
from .operators import (DifferenceOperator, difference_operator, difference_operator_1d,
                        project_topk, soft_threshold)
from .pipeline import Core, PipelineConfig, block_basis, segment_image
from .results import DecompositionResult
from .robustfit import fit_lad, fit_lsf

log = logging.getLogger(__name__)

METHODS = ("ransac", "sd", "lsf", "lad", "masked")


def _mask_array(m) -> np.ndarray:
    return np.asarray(getattr(m, "values", m)).astype(bool)


def confusion_counts(predicted, truth) -> tuple[int, int, int]:
    p, t = _mask_array(predicted), _mask_array(truth)
    if p.shape != t.shape:
        raise DataError(f"mask shapes differ: {p.shape} vs {t.shape}")
    return int((p & t).sum()), int((p & ~t).sum()), int((~p & t).sum())


def score_mask(predicted, truth) -> tuple[float, float, float]:
    """Foreground-positive ``(precision, recall, f1)``.

    Empty denominators: precision is 1 only when nothing was predicted and the
    truth is empty as well, recall likewise, and F1 is 1 only when both masks
    are empty.
    """
    tp, fp, fn = confusion_counts(predicted, truth)
    empty_truth = tp + fn == 0
    empty_pred = tp + fp == 0
    precision = tp / (tp + fp) if not empty_pred else (1.0 if empty_truth else 0.0)
    recall = tp / (tp + fn) if not empty_truth else (1.0 if empty_pred else 0.0)
    if empty_truth and empty_pred:
        return 1.0, 1.0, 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return float(precision), float(recall), float(f1)


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


# -- additive baseline ----------------------------------------------------

@dataclass(frozen=True)
class AdditiveConfig:
    lambda1: float = 0.3
    lambda2: float = 10.0
    k1: int | None = None
    k2: int | None = None
    outer_iters: int = 30
    inner_iters: int = 30
    rho: float = 1.0
    threshold: float = 0.5

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "rho"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")
        if not self.threshold >= 0:
            raise ParameterError("threshold must be non-negative")


def additive_objective(x, basis1: BasisSet, basis2: BasisSet, alpha1, alpha2,
                       cfg: AdditiveConfig, diffop: DifferenceOperator) -> float:
    c2 = basis2.synthesize(alpha2)
    r = np.asarray(x, dtype=float) - basis1.synthesize(alpha1) - c2
    return float(0.5 * r @ r + cfg.lambda1 * np.abs(c2).sum()
                 + cfg.lambda2 * np.abs(diffop.apply(c2)).sum())


def _component2_step(r, p2, dp2, cfg: AdditiveConfig, alpha2):
    """ADMM for ``min 1/2||r - P2 a||^2 + lam1 ||P2 a||_1 + lam2 ||D P2 a||_1``."""
    rho = cfg.rho
    k = p2.shape[1]
    gram = np.eye(k) * (1 + rho) + rho * dp2.T @ dp2
    chol = np.linalg.cholesky(gram)
    v = p2 @ alpha2
    t = dp2 @ alpha2
    uv = np.zeros_like(v)
    ut = np.zeros_like(t)
    a = alpha2
    for _ in range(cfg.inner_iters):
        rhs = p2.T @ r + rho * p2.T @ (v - uv) + rho * dp2.T @ (t - ut)
        a = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
        pa, dpa = p2 @ a, dp2 @ a
        v = soft_threshold(pa + uv, cfg.lambda1 / rho)
        t = soft_threshold(dpa + ut, cfg.lambda2 / rho)
        uv += pa - v
        ut += dpa - t
    return a


def additive_baseline(x, basis1: BasisSet, basis2: BasisSet, cfg: AdditiveConfig | None = None,
                      diffop: DifferenceOperator | None = None) -> DecompositionResult:
    """Additive two-component model; the mask thresholds ``|P2 alpha2|``.

    Alternates an exact fit of the first component (orthonormal basis, then
    top-k) with a small ADMM solve for the second.
    """
    cfg = cfg or AdditiveConfig()
    f = np.asarray(getattr(x, "values", x), dtype=float).ravel(order="F")
    if f.size != basis1.n or basis2.n != basis1.n:
        raise DataError("signal and basis lengths differ")
    if diffop is None:
        side = basis1.block_side
        diffop = difference_operator(side) if side else difference_operator_1d(basis1.n)
    k1 = cfg.k1 or basis1.k
    k2 = cfg.k2 or basis2.k
    p1, p2 = basis1.columns, basis2.columns
    dp2 = np.asarray(diffop.stacked @ p2)
    a1 = np.zeros(basis1.k)
    a2 = np.zeros(basis2.k)
    trace = []
    for _ in range(cfg.outer_iters):
        a1 = project_topk(p1.T @ (f - p2 @ a2), k1)
        a2 = project_topk(_component2_step(f - p1 @ a1, p2, dp2, cfg, a2), k2)
        loss = additive_objective(f, basis1, basis2, a1, a2, cfg, diffop)
        if not np.isfinite(loss):
            raise NumericalError("additive baseline diverged")
        trace.append(loss)
    c2 = p2 @ a2
    return DecompositionResult(alpha=[a1, a2], sparse=c2, mask=np.abs(c2) > cfg.threshold,
                               mask_continuous=np.abs(c2), loss_trace=trace,
                               iterations=cfg.outer_iters, converged=False)


def best_threshold_f1(magnitude: np.ndarray, truth: np.ndarray, thresholds=None) -> tuple[float, float]:
    """Largest F1 over a threshold sweep and the threshold achieving it."""
    if thresholds is None:
        thresholds = np.unique(np.concatenate([[0.0], np.quantile(magnitude, np.linspace(0, 1, 101))]))
    best = (-1.0, 0.0)
    for t in thresholds:
        f1 = score_mask(magnitude > t, truth)[2]
        if f1 > best[0]:
            best = (f1, float(t))
    return best


# -- corpora ----------------------------------------------------------------

@dataclass
class CorpusItem:
    name: str
    image: np.ndarray
    truth: MaskImage | None


def synth_corpus(count: int = 6, seed: int = 0, height: int = 128, width: int = 128) -> list:
    """Grey sheets mixing flat, constant and smooth backgrounds with text."""
    items = []
    for i in range(count):
        img, truth = synth_sheet(height, width, seed=seed * 1000 + i)
        items.append(CorpusItem(f"synth-{i:03d}", img, truth))
    return items


def load_manifest(path) -> list:
    """Corpus from a manifest of ``image_path [truth_path]`` lines, relative to the manifest."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    items = []
    for line in path.read_text().splitlines():
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        img_path = path.parent / parts[0]
        truth = None
        if len(parts) > 1 and (path.parent / parts[1]).exists():
            truth = load_mask(path.parent / parts[1])
        else:
            log.warning("no ground truth for %s; it will be skipped", parts[0])
        items.append(CorpusItem(parts[0], load_image(img_path), truth))
    return items


# -- methods ------------------------------------------------------------------

def _luma(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    if image.ndim == 3:
        return image[..., 0] * 0.299 + image[..., 1] * 0.587 + image[..., 2] * 0.114
    return image


def _blockwise(image, side, fn) -> np.ndarray:
    luma = _luma(image)
    blocks = extract_blocks(luma, side)
    return stitch_masks(blocks, [fn(b) for b in blocks], luma.shape).values


def segment_with(method: str, image: np.ndarray, configs: dict | None = None) -> np.ndarray:
    """Foreground mask of ``image`` from one of :data:`METHODS`."""
    configs = configs or {}
    pcfg = configs.get("pipeline") or PipelineConfig()
    if method in ("ransac", "sd"):
        cfg = PipelineConfig(**{**pcfg.to_dict(), "core": Core(method)})
        return segment_image(image, cfg).mask.values
    side = pcfg.max_block
    if method == "lsf":
        basis = block_basis(pcfg, side)
        return _blockwise(image, side, lambda b: ~fit_lsf(b, basis, pcfg.eps_in).inlier_mask)
    if method == "lad":
        basis = block_basis(pcfg, side)
        return _blockwise(image, side, lambda b: ~fit_lad(b, basis, inlier_threshold=pcfg.eps_in).inlier_mask)
    if method == "masked":
        mcfg = configs.get("masked") or MdConfig(make_dct2d(side, 40), make_hadamard(side * side, 8),
                                                 init="lsf_error")
        return _blockwise(image, side, lambda b: md_solve(b, mcfg).w_binary.astype(bool))
    raise ParameterError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


@dataclass
class BenchmarkRow:
    method: str
    item: str
    precision: float
    recall: float
    f1: float
    wall_time_s: float
    blocks: int


@dataclass
class BenchmarkReport:
    rows: list = field(default_factory=list)

    def averages(self) -> dict:
        out = {}
        for m in dict.fromkeys(r.method for r in self.rows):
            sel = [r for r in self.rows if r.method == m]
            nblk = sum(r.blocks for r in sel)
            out[m] = {"precision": float(np.mean([r.precision for r in sel])),
                      "recall": float(np.mean([r.recall for r in sel])),
                      "f1": float(np.mean([r.f1 for r in sel])),
                      "items": len(sel),
                      "ms_per_block": 1000 * sum(r.wall_time_s for r in sel) / max(nblk, 1)}
        return out

    def to_csv(self, include_timing: bool = False) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        head = ["method", "item", "precision", "recall", "f1"]
        out.writerow(head + (["wall_time_s"] if include_timing else []))
        for r in self.rows:
            row = [r.method, r.item, f"{r.precision:.6f}", f"{r.recall:.6f}", f"{r.f1:.6f}"]
            out.writerow(row + ([f"{r.wall_time_s:.6f}"] if include_timing else []))
        for m, avg in self.averages().items():
            row = [m, "MEAN", f"{avg['precision']:.6f}", f"{avg['recall']:.6f}", f"{avg['f1']:.6f}"]
            out.writerow(row + ([f"{avg['ms_per_block'] / 1000:.6f}"] if include_timing else []))
        return buf.getvalue()

    def to_json(self, include_timing: bool = False) -> str:
        avgs = self.averages()
        rows = []
        for r in self.rows:
            d = {"method": r.method, "item": r.item, "precision": round(r.precision, 6),
                 "recall": round(r.recall, 6), "f1": round(r.f1, 6)}
            if include_timing:
                d["wall_time_s"] = round(r.wall_time_s, 6)
            rows.append(d)
        summary = {}
        for m, a in avgs.items():
            summary[m] = {k: round(v, 6) for k, v in a.items() if k != "ms_per_block"}
            if include_timing:
                summary[m]["ms_per_block"] = round(a["ms_per_block"], 3)
        return json.dumps({"rows": rows, "summary": summary}, indent=2, sort_keys=True)


def _evaluate(args):
    method, item, configs = args
    t0 = time.perf_counter()
    pred = segment_with(method, item.image, configs)
    dt = time.perf_counter() - t0
    side = (configs.get("pipeline") or PipelineConfig()).max_block
    nblk = int(np.ceil(item.image.shape[0] / side) * np.ceil(item.image.shape[1] / side))
    p, r, f = score_mask(pred, item.truth)
    return BenchmarkRow(method, item.name, p, r, f, dt, nblk)


def run_benchmark(corpus, methods=("ransac", "sd"), configs: dict | None = None,
                  jobs: int = 1) -> BenchmarkReport:
    """Score every method on every corpus item that has ground truth."""
    for m in methods:
        if m not in METHODS:
            raise ParameterError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    usable = []
    for item in corpus:
        if item.truth is None:
            log.warning("skipping %s: no ground truth", item.name)
            continue
        usable.append(item)
    work = [(m, item, configs or {}) for m in methods for item in usable]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_evaluate, work))
    else:
        rows = [_evaluate(w) for w in work]
    return BenchmarkReport(rows)
