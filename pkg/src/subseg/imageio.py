"""Image, mask, signal and matrix I/O plus block tiling and synthetic data."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .bases import make_dct2d
from .errors import DataError, ParameterError
from .operators import unvec, vec


@dataclass(frozen=True)
class BlockSignal:
    """A vectorized ``N x N`` block (column-major) or a 1D signal (``block_side == 0``)."""

    values: np.ndarray
    block_side: int = 0
    origin: tuple = (0, 0)
    chroma: tuple | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if not np.all(np.isfinite(v)):
            raise DataError("block intensities must be finite")
        if self.block_side and v.size != self.block_side**2:
            raise DataError(f"block of side {self.block_side} needs {self.block_side**2} values, got {v.size}")
        object.__setattr__(self, "values", v)
        if self.chroma is not None:
            chroma = tuple(np.asarray(c, dtype=float).ravel() for c in self.chroma)
            if len(chroma) != 2 or any(c.size != v.size for c in chroma):
                raise DataError("chroma must be two vectors matching the luma length")
            object.__setattr__(self, "chroma", chroma)

    @classmethod
    def from_array(cls, block: np.ndarray, origin=(0, 0), chroma=None) -> "BlockSignal":
        block = np.asarray(block, dtype=float)
        if block.ndim != 2 or block.shape[0] != block.shape[1]:
            raise DataError(f"expected a square block, got shape {block.shape}")
        ch = None if chroma is None else tuple(vec(c) for c in chroma)
        return cls(vec(block), block.shape[0], tuple(origin), ch)

    @property
    def n(self) -> int:
        return self.values.size

    def as_array(self) -> np.ndarray:
        if not self.block_side:
            return self.values.copy()
        return unvec(self.values, self.block_side).copy()

    def chroma_arrays(self):
        if self.chroma is None:
            return None
        return tuple(unvec(c, self.block_side) for c in self.chroma)

    def sub_block(self, row: int, col: int, side: int) -> "BlockSignal":
        """Child block at offset ``(row, col)`` relative to this block."""
        a = self.as_array()[row:row + side, col:col + side]
        ch = None
        if self.chroma is not None:
            ch = tuple(c[row:row + side, col:col + side] for c in self.chroma_arrays())
        return BlockSignal.from_array(a, (self.origin[0] + row, self.origin[1] + col), ch)


@dataclass(frozen=True)
class MaskImage:
    """Binary per-pixel labels, 1 = foreground."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise DataError(f"mask must be 2D, got shape {v.shape}")
        if v.dtype != bool and not np.isin(v, (0, 1)).all():
            raise DataError("mask values must be 0 or 1")
        object.__setattr__(self, "values", v.astype(np.uint8))

    @property
    def dims(self) -> tuple:
        return self.values.shape

    @property
    def fraction(self) -> float:
        return float(self.values.mean()) if self.values.size else 0.0


# -- colour ---------------------------------------------------------------

def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    """BT.601 full-range conversion; returns float ``(H, W, 3)`` in Y, Cb, Cr order."""
    rgb = np.asarray(rgb, dtype=float)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return np.stack([y, cb, cr], axis=-1)


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    ycc = np.asarray(ycc, dtype=float)
    y, cb, cr = ycc[..., 0], ycc[..., 1] - 128.0, ycc[..., 2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b], axis=-1)


# -- files ----------------------------------------------------------------

def load_image(path) -> np.ndarray:
    """Read a PGM/PPM/PNG file as float64: ``(H, W)`` grey or ``(H, W, 3)`` RGB."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "1", "I", "I;16", "I;16B", "F"):
                arr = np.asarray(im, dtype=float)
                if im.mode == "1":
                    arr = arr * 255.0
            else:
                arr = np.asarray(im.convert("RGB"), dtype=float)
    except FileNotFoundError as exc:
        raise DataError(f"no such image: {path}") from exc
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if arr.size == 0:
        raise DataError(f"image {path} is empty")
    return arr


def _to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


def save_image(image: np.ndarray, path) -> None:
    image = np.asarray(image)
    Image.fromarray(_to_uint8(image), mode="RGB" if image.ndim == 3 else "L").save(Path(path))


def save_mask(mask, path) -> None:
    """Write a mask; ``.pbm`` gives P4, anything else an 8-bit image with {0, 255}."""
    values = mask.values if isinstance(mask, MaskImage) else np.asarray(mask)
    img = Image.fromarray((values > 0).astype(np.uint8) * 255, mode="L")
    path = Path(path)
    if path.suffix.lower() == ".pbm":
        img = img.convert("1")
    img.save(path)


def load_mask(path) -> MaskImage:
    arr = load_image(path)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    return MaskImage(arr > 127)


def load_signal(path) -> np.ndarray:
    """Plain text, one value per line."""
    try:
        data = np.loadtxt(Path(path), dtype=float, ndmin=1)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read signal {path}: {exc}") from exc
    if data.ndim != 1 or not np.all(np.isfinite(data)):
        raise DataError(f"signal file {path} must hold one finite value per line")
    return data


def save_signal(values, path) -> None:
    np.savetxt(Path(path), np.asarray(values, dtype=float).ravel(), fmt="%.17g")


def load_matrix(path) -> np.ndarray:
    """``.npy`` binary or comma-separated text."""
    path = Path(path)
    try:
        if path.suffix == ".npy":
            data = np.load(path, allow_pickle=False)
        else:
            data = np.loadtxt(path, delimiter=",", dtype=float, ndmin=2)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read matrix {path}: {exc}") from exc
    if data.ndim != 2:
        raise DataError(f"{path} does not hold a 2D matrix")
    return np.asarray(data, dtype=float)


def save_matrix(matrix, path) -> None:
    path = Path(path)
    if path.suffix == ".npy":
        np.save(path, np.asarray(matrix, dtype=float))
    else:
        np.savetxt(path, np.asarray(matrix, dtype=float), delimiter=",", fmt="%.17g")


# -- tiling ---------------------------------------------------------------

def padded_shape(shape, block_side: int, stride: int | None = None) -> tuple:
    stride = stride or block_side
    out = []
    for dim in shape[:2]:
        steps = max(0, math.ceil((dim - block_side) / stride))
        out.append(steps * stride + block_side)
    return tuple(out)


def pad_edge(image: np.ndarray, target) -> np.ndarray:
    ph, pw = target[0] - image.shape[0], target[1] - image.shape[1]
    widths = [(0, ph), (0, pw)] + [(0, 0)] * (image.ndim - 2)
    return np.pad(image, widths, mode="edge")


def extract_blocks(image: np.ndarray, block_side: int, stride: int | None = None,
                   chroma: np.ndarray | None = None) -> list[BlockSignal]:
    """Tile a luma image into blocks, padding right/bottom edges by replication.

    ``chroma`` is an optional ``(H, W, 2)`` array of Cb/Cr planes.
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 2 or image.size == 0:
        raise DataError(f"expected a non-empty 2D luma image, got shape {image.shape}")
    if block_side < 1:
        raise ParameterError("block_side must be positive")
    stride = stride or block_side
    target = padded_shape(image.shape, block_side, stride)
    padded = pad_edge(image, target)
    pch = None
    if chroma is not None:
        if chroma.shape[:2] != image.shape:
            raise DataError("chroma planes must match the luma image")
        pch = pad_edge(np.asarray(chroma, dtype=float), target)
    blocks = []
    for r in range(0, target[0] - block_side + 1, stride):
        for c in range(0, target[1] - block_side + 1, stride):
            sl = np.s_[r:r + block_side, c:c + block_side]
            ch = None if pch is None else (pch[sl][..., 0], pch[sl][..., 1])
            blocks.append(BlockSignal.from_array(padded[sl], (r, c), ch))
    return blocks


def stitch_masks(blocks, masks, shape) -> MaskImage:
    """Place per-block masks at their origins and crop to ``shape`` (OR on overlap)."""
    if len(blocks) != len(masks):
        raise DataError("need exactly one mask per block")
    h = max([shape[0]] + [b.origin[0] + b.block_side for b in blocks])
    w = max([shape[1]] + [b.origin[1] + b.block_side for b in blocks])
    canvas = np.zeros((h, w), dtype=np.uint8)
    for b, m in zip(blocks, masks):
        m = np.asarray(m.values if isinstance(m, MaskImage) else m)
        if m.ndim == 1:
            m = unvec(m, b.block_side)
        if m.shape != (b.block_side, b.block_side):
            raise DataError(f"mask shape {m.shape} does not match block side {b.block_side}")
        r, c = b.origin
        canvas[r:r + b.block_side, c:c + b.block_side] |= (m > 0).astype(np.uint8)
    return MaskImage(canvas[:shape[0], :shape[1]])


# -- synthetic data -------------------------------------------------------

_SMOOTH_RE = re.compile(r"^smooth(?:-dct)?(?:\((\d+)\))?$")


def parse_background(spec: str) -> tuple[str, int]:
    spec = spec.strip().lower()
    if spec in ("constant", "texture"):
        return spec, 0
    m = _SMOOTH_RE.match(spec)
    if not m:
        raise ParameterError(f"unknown background kind {spec!r}")
    return "smooth", int(m.group(1) or 6)


def synth_background(block_side: int, kind: str, rng: np.random.Generator,
                     level: float = 128.0, amplitude: float = 60.0) -> np.ndarray:
    kind, k = parse_background(kind)
    n = block_side
    if kind == "constant":
        return np.full((n, n), float(level))
    if kind == "smooth":
        basis = make_dct2d(n, max(k, 1))
        alpha = np.zeros(basis.k)
        if basis.k > 1:
            alpha[1:] = rng.normal(size=basis.k - 1) / np.arange(1, basis.k) ** 0.5
        surface = unvec(basis.synthesize(alpha), n)
        span = np.ptp(surface)
        if span > 0:
            surface = surface * (amplitude / span)
        return level + surface - surface.mean()
    xs = np.arange(n)[:, None]
    ys = np.arange(n)[None, :]
    tex = np.zeros((n, n))
    for _ in range(4):
        fx, fy = rng.uniform(0.15, 0.45, size=2) * rng.choice([-1, 1], size=2)
        tex += np.sin(2 * np.pi * (fx * xs + fy * ys) + rng.uniform(0, 2 * np.pi))
    tex += 0.5 * rng.normal(size=(n, n))
    return level + tex * (amplitude / (2 * max(np.ptp(tex), 1e-9)))


def draw_strokes(block_side: int, density: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of random bars (each a 4-connected rectangle) covering ~``density``."""
    n = block_side
    mask = np.zeros((n, n), dtype=bool)
    if density <= 0:
        return mask
    target = density * n * n
    max_thick = max(1, n // 24)
    guard = 0
    while mask.sum() < target - 0.5 * max(1, n // 8) and guard < 10 * n * n:
        guard += 1
        length = int(rng.integers(max(2, n // 8), max(3, n // 3) + 1))
        thick = int(rng.integers(1, max_thick + 1)) if max_thick > 1 else 1
        if rng.random() < 0.5:
            h, w = thick, length
        else:
            h, w = length, thick
        r = int(rng.integers(0, n - h + 1))
        c = int(rng.integers(0, n - w + 1))
        mask[r:r + h, c:c + w] = True
    return mask


def foreground_level(background: np.ndarray, gap: float) -> float:
    """Constant text intensity at least ``gap`` away from every background pixel."""
    hi, lo = background.max() + gap, background.min() - gap
    if hi <= 255:
        return float(hi)
    if lo >= 0:
        return float(lo)
    return 255.0 if 255 - background.max() >= background.min() else 0.0


def synth_text_block(block_side: int, background: str = "constant", text_density: float = 0.15,
                     fg_intensity_gap: float = 100.0, seed: int = 0, *, level: float = 128.0,
                     amplitude: float = 60.0, noise_sigma: float = 0.0,
                     quantize: bool = True) -> tuple[BlockSignal, MaskImage]:
    """Text strokes over a constant, smooth or textured background.

    Deterministic for a given seed; the returned mask is exact ground truth.
    """
    if not 0 <= text_density <= 0.5:
        raise ParameterError(f"text density must lie in [0, 0.5], got {text_density}")
    rng = np.random.default_rng(seed)
    bg = synth_background(block_side, background, rng, level, amplitude)
    strokes = draw_strokes(block_side, text_density, rng)
    img = bg.copy()
    if strokes.any():
        img[strokes] = foreground_level(bg, fg_intensity_gap)
    if noise_sigma > 0:
        img += rng.normal(scale=noise_sigma, size=img.shape)
    if quantize:
        img = np.clip(np.rint(img), 0, 255)
    return BlockSignal.from_array(img), MaskImage(strokes)


def synth_two_region_block(block_side: int = 64, levels=(70.0, 170.0), text_density: float = 0.2,
                           fg_intensity_gap: float = 60.0, seed: int = 0, split_col: int | None = None,
                           noise: float = 5.0) -> tuple[BlockSignal, MaskImage]:
    """Two flat backgrounds side by side with text on top.

    Uniform noise of +-``noise`` keeps the block away from the few-colours
    shortcut while staying inside the inlier threshold.
    """
    rng = np.random.default_rng(seed)
    n = block_side
    split = n // 2 if split_col is None else split_col
    bg = np.empty((n, n))
    bg[:, :split] = levels[0]
    bg[:, split:] = levels[1]
    strokes = draw_strokes(n, text_density, rng)
    img = bg + rng.uniform(-noise, noise, size=bg.shape)
    img[strokes] = foreground_level(bg, fg_intensity_gap)
    return BlockSignal.from_array(np.clip(np.rint(img), 0, 255)), MaskImage(strokes)


def synth_sheet(height: int, width: int, seed: int = 0, block_side: int = 64,
                kinds=("constant", "smooth-dct(6)", "flat"), text_density=(0.05, 0.25),
                fg_intensity_gap: float = 90.0, noise_sigma: float = 1.0) -> tuple[np.ndarray, MaskImage]:
    """Grey test sheet assembled from independently generated blocks.

    ``flat`` blocks carry no text; the other kinds are passed to
    :func:`synth_text_block`.
    """
    rng = np.random.default_rng(seed)
    ph, pw = padded_shape((height, width), block_side)
    img = np.zeros((ph, pw))
    truth = np.zeros((ph, pw), dtype=np.uint8)
    for r in range(0, ph, block_side):
        for c in range(0, pw, block_side):
            kind = kinds[int(rng.integers(len(kinds)))]
            sub_seed = int(rng.integers(2**31))
            lvl = float(rng.uniform(60, 180))
            if kind == "flat":
                blk, m = synth_text_block(block_side, "constant", 0.0, 0.0, sub_seed, level=lvl,
                                          noise_sigma=noise_sigma)
            else:
                dens = float(rng.uniform(*text_density))
                blk, m = synth_text_block(block_side, kind, dens, fg_intensity_gap, sub_seed,
                                          level=lvl, noise_sigma=noise_sigma)
            img[r:r + block_side, c:c + block_side] = blk.as_array()
            truth[r:r + block_side, c:c + block_side] = m.values
    return img[:height, :width], MaskImage(truth[:height, :width])
