"""Block-level segmentation with simple-case shortcuts and quadtree refinement."""

from __future__ import annotations

import enum
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .bases import BasisSet, make_dct2d, make_polynomial2d
from .errors import DataError, ParameterError
from .imageio import BlockSignal, MaskImage, extract_blocks, rgb_to_ycbcr, stitch_masks
from .robustfit import RansacConfig, fit_lsf, ransac_segment
from .sparsedecomp import SdConfig, sd_solve


class Core(str, enum.Enum):
    RANSAC = "ransac"
    SD = "sd"


class NodeClass(str, enum.Enum):
    PURE_BACKGROUND = "pure_background"
    SMOOTH_BACKGROUND = "smooth_background"
    TEXT_OVER_CONSTANT = "text_over_constant"
    CORE_SEGMENTED = "core_segmented"
    SPLIT = "split"


def _power_of_two(v: int) -> bool:
    return v > 0 and not v & (v - 1)


@dataclass(frozen=True)
class PipelineConfig:
    max_block: int = 64
    min_block: int = 8
    eps1: float = 3.0
    eps_in: float = 10.0
    eps2: float = 0.5
    t1: int = 10
    r_min: float = 50.0
    color_tolerance: float = 10.0
    core: Core = Core.RANSAC
    basis: str = "dct"
    num_bases: int = 10
    ransac_max_iters: int = 200
    early_stop_ratio: float = 0.95
    lambda1: float = 10.0
    lambda2: float = 4.0
    rho1: float = 1.0
    rho2: float = 1.0
    rho3: float = 1.0
    sd_max_iters: int = 50
    sd_tol: float = 1e-6
    check_chroma: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "core", Core(self.core))
        if not (_power_of_two(self.max_block) and self.max_block >= 8):
            raise ParameterError(f"max_block must be a power of two >= 8, got {self.max_block}")
        if not (_power_of_two(self.min_block) and 8 <= self.min_block <= self.max_block):
            raise ParameterError(f"min_block must be a power of two in [8, max_block], got {self.min_block}")
        for name in ("eps1", "eps_in", "r_min", "t1"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")
        if not 0 <= self.eps2 <= 1:
            raise ParameterError("eps2 must lie in [0, 1]")
        if self.basis not in ("dct", "polynomial"):
            raise ParameterError(f"unknown basis {self.basis!r}")
        if not 1 <= self.num_bases <= self.min_block**2:
            raise ParameterError("num_bases does not fit the smallest block")

    @classmethod
    def from_mapping(cls, values: dict) -> "PipelineConfig":
        """Build from string or typed values, ignoring keys meant for other commands."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                continue
            default = known[key].default
            kwargs[key] = _coerce(raw, default)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["core"] = self.core.value
        return d


def _coerce(raw, default):
    if not isinstance(raw, str):
        return raw
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ParameterError(f"expected a boolean, got {raw!r}")
    if isinstance(default, enum.Enum):
        return raw.lower()
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def block_basis(cfg: PipelineConfig, side: int) -> BasisSet:
    maker = make_dct2d if cfg.basis == "dct" else make_polynomial2d
    return maker(side, cfg.num_bases)


@dataclass
class QuadtreeNode:
    origin: tuple
    side: int
    classification: NodeClass
    children: list = field(default_factory=list)
    mask: np.ndarray | None = None
    inlier_ratio: float = 1.0
    iterations: int = 0

    def full_mask(self) -> np.ndarray:
        """``side x side`` foreground mask assembled from the leaves."""
        if self.classification is not NodeClass.SPLIT:
            return self.mask
        out = np.zeros((self.side, self.side), dtype=np.uint8)
        for child in self.children:
            r = child.origin[0] - self.origin[0]
            c = child.origin[1] - self.origin[1]
            out[r:r + child.side, c:c + child.side] = child.full_mask()
        return out

    def leaves(self):
        if self.classification is NodeClass.SPLIT:
            for child in self.children:
                yield from child.leaves()
        else:
            yield self

    def depth(self) -> int:
        if self.classification is not NodeClass.SPLIT:
            return 0
        return 1 + max(c.depth() for c in self.children)

    def to_dict(self) -> dict:
        d = {"origin": list(self.origin), "side": self.side,
             "classification": self.classification.value}
        if self.classification is NodeClass.SPLIT:
            d["children"] = [c.to_dict() for c in self.children]
        else:
            d["inlier_ratio"] = round(self.inlier_ratio, 6)
            d["iterations"] = self.iterations
        return d


def _modal_value(values: np.ndarray) -> float:
    uniq, counts = np.unique(values, return_counts=True)
    return float(uniq[np.argmax(counts)])


def classify_simple(block: BlockSignal, cfg: PipelineConfig):
    """Steps 1-3: returns ``(classification, foreground mask)`` or None."""
    side = block.block_side
    f = block.values
    empty = np.zeros((side, side), dtype=np.uint8)
    if f.std() < cfg.eps1:
        return NodeClass.PURE_BACKGROUND, empty
    fit = fit_lsf(block, block_basis(cfg, side), cfg.eps_in)
    if fit.inlier_mask.all():
        return NodeClass.SMOOTH_BACKGROUND, empty
    luma = np.rint(f)
    if np.unique(luma).size < cfg.t1 and np.ptp(f) > cfg.r_min:
        fg = np.abs(luma - _modal_value(luma)) >= cfg.color_tolerance
        return NodeClass.TEXT_OVER_CONSTANT, fg.reshape((side, side), order="F").astype(np.uint8)
    return None


def _node_rng(cfg: PipelineConfig, origin, side) -> np.random.Generator:
    # keyed on absolute position so a block gives the same result alone or inside an image
    return np.random.default_rng([cfg.seed, int(origin[0]), int(origin[1]), side])


def run_core(block: BlockSignal, cfg: PipelineConfig) -> tuple[np.ndarray, int]:
    """Luma foreground (flat, column-major) from the configured core solver."""
    basis = block_basis(cfg, block.block_side)
    if cfg.core is Core.RANSAC:
        rcfg = RansacConfig(basis.k, cfg.eps_in, cfg.ransac_max_iters, cfg.early_stop_ratio, None)
        res = ransac_segment(block, basis, rcfg, rng=_node_rng(cfg, block.origin, block.block_side))
        return ~res.inlier_mask, res.iterations
    scfg = SdConfig(basis, cfg.lambda1, cfg.lambda2, cfg.rho1, cfg.rho2, cfg.rho3,
                    cfg.sd_max_iters, cfg.sd_tol, cfg.eps_in)
    res = sd_solve(block, scfg)
    return res.mask.astype(bool), res.iterations


def verify_chroma(block: BlockSignal, fg: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    """Demote background pixels whose Cb or Cr cannot be fit by the smooth model."""
    if block.chroma is None:
        return fg
    p = block_basis(cfg, block.block_side).columns
    fg = fg.copy()
    for plane in block.chroma:
        inl = ~fg
        if inl.sum() == 0:
            break
        alpha = np.linalg.lstsq(p[inl], plane[inl], rcond=None)[0]
        bad = np.abs(plane - p @ alpha) >= cfg.eps_in
        fg |= inl & bad
    return fg


def segment_block(block: BlockSignal, cfg: PipelineConfig) -> QuadtreeNode:
    side = block.block_side
    if side < cfg.min_block or not _power_of_two(side):
        raise DataError(f"block side {side} is not a power of two >= {cfg.min_block}")
    simple = classify_simple(block, cfg)
    if simple is not None:
        cls, mask = simple
        return QuadtreeNode(block.origin, side, cls, mask=mask,
                            inlier_ratio=1.0 - float(mask.mean()))
    fg, iters = run_core(block, cfg)
    if cfg.check_chroma:
        fg = verify_chroma(block, fg, cfg)
    ratio = 1.0 - float(fg.mean())
    if ratio >= cfg.eps2 or side <= cfg.min_block:
        return QuadtreeNode(block.origin, side, NodeClass.CORE_SEGMENTED,
                            mask=fg.reshape((side, side), order="F").astype(np.uint8),
                            inlier_ratio=ratio, iterations=iters)
    half = side // 2
    children = [segment_block(block.sub_block(r, c, half), cfg)
                for c in (0, half) for r in (0, half)]
    children.sort(key=lambda n: n.origin)
    return QuadtreeNode(block.origin, side, NodeClass.SPLIT, children=children,
                        inlier_ratio=ratio, iterations=iters)


@dataclass
class SegmentationReport:
    mask: MaskImage
    nodes: list
    wall_times: list
    config: PipelineConfig

    def diagnostics(self, include_timing: bool = False) -> dict:
        blocks = []
        for node, t in zip(self.nodes, self.wall_times):
            d = node.to_dict()
            if include_timing:
                d["wall_time_s"] = round(t, 6)
            blocks.append(d)
        return {"shape": list(self.mask.dims), "config": self.config.to_dict(),
                "foreground_fraction": round(self.mask.fraction, 6), "blocks": blocks}

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.diagnostics(include_timing), indent=2, sort_keys=True)


def _timed_segment(args):
    block, cfg = args
    t0 = time.perf_counter()
    node = segment_block(block, cfg)
    return node, time.perf_counter() - t0


def split_channels(image: np.ndarray):
    """Luma plane and optional ``(H, W, 2)`` chroma planes of a grey or RGB image."""
    image = np.asarray(image, dtype=float)
    if image.ndim == 2:
        return image, None
    if image.ndim == 3 and image.shape[2] == 3:
        ycc = rgb_to_ycbcr(image)
        return ycc[..., 0], ycc[..., 1:]
    raise DataError(f"unsupported image shape {image.shape}")


def segment_image(image: np.ndarray, cfg: PipelineConfig | None = None,
                  jobs: int = 1) -> SegmentationReport:
    """Tile into ``max_block`` blocks, segment each and stitch the foreground mask."""
    cfg = cfg or PipelineConfig()
    luma, chroma = split_channels(image)
    if luma.size == 0:
        raise DataError("image is empty")
    blocks = extract_blocks(luma, cfg.max_block, chroma=chroma)
    work = [(b, cfg) for b in blocks]
    if jobs > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            out = list(pool.map(_timed_segment, work, chunksize=max(1, len(work) // (4 * jobs))))
    else:
        out = [_timed_segment(w) for w in work]
    nodes = [o[0] for o in out]
    mask = stitch_masks(blocks, [n.full_mask() for n in nodes], luma.shape)
    return SegmentationReport(mask, nodes, [o[1] for o in out], cfg)
