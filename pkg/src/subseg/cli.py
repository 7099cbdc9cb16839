"""Command-line entry point: ``subseg <command> [options]``.

Exit codes: 0 success, 1 usage or parameter error, 2 data error, 3 numerical
failure.  Settings come from an optional ``key = value`` config file and are
overridden by explicit flags.  Keys without a prefix configure the block
pipeline; ``learn.``, ``masked.``, ``masked1d.``, ``mrpca.`` and ``motion.``
prefixes configure the other commands.
"""

from __future__ import annotations

import argparse
import dataclasses
import enum
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .bases import make_dct2d, make_hadamard, make_sinusoid1d
from .errors import DataError, DegeneracyError, NumericalError, ParameterError, SubsegError
from .evaluate import METHODS, load_manifest, run_benchmark, synth_corpus
from .imageio import (BlockSignal, MaskImage, extract_blocks, load_image, load_matrix, load_signal,
                      pad_edge, save_mask, save_matrix, save_signal, stitch_masks)
from .maskeddecomp import MdConfig, md_solve
from .maskedrpca import MrConfig, mr_solve
from .motionseg import MotionConfig, lsq_threshold_segment, motion_masked_segment, read_flow
from .pipeline import PipelineConfig, _coerce, _node_rng, block_basis, segment_image, split_channels
from .robustfit import RansacConfig, ransac_segment
from .sparsedecomp import SdConfig, sd_solve
from .subspacelearn import LearnedSubspace, SlConfig, sl_segment, sl_train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
PACKAGED_CONFIG = "paper.cfg"

log = logging.getLogger("subseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- configuration ---------------------------------------------------------------

def resolve_config_path(name: str) -> Path:
    """A config path as given, else the copy shipped inside the package."""
    p = Path(name)
    if p.exists():
        return p
    if p.name == name:
        packaged = resources.files("subseg").joinpath(name)
        if packaged.is_file():
            return Path(str(packaged))
    raise DataError(f"config file not found: {name}")


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for num, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"{source}:{num}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ParameterError(f"{source}:{num}: empty key")
        out[key] = value
    return out


def load_config(name: str | None) -> dict:
    if not name:
        return {}
    path = resolve_config_path(name)
    return parse_config_text(path.read_text(), str(path))


def section(config: dict, prefix: str | None) -> dict:
    if prefix is None:
        return {k: v for k, v in config.items() if "." not in k}
    lead = prefix + "."
    return {k[len(lead):]: v for k, v in config.items() if k.startswith(lead)}


def build_config(cls, values: dict, **fixed):
    """Instantiate dataclass ``cls`` from string values; unknown keys are an error."""
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = dict(fixed)
    for key, raw in values.items():
        if key not in known:
            raise ParameterError(f"unknown setting {key!r} for {cls.__name__}")
        if key in fixed:
            continue
        default = known[key].default
        if isinstance(raw, str) and default is None:
            kwargs[key] = None if raw.lower() == "none" else float(raw)
        elif isinstance(raw, str) and isinstance(default, enum.Enum):
            kwargs[key] = raw.lower()
        else:
            kwargs[key] = _coerce(raw, default)
    return cls(**kwargs)


def _settings(args, prefix: str | None) -> dict:
    """Config-file section overlaid with ``--set``; prefixed keys for other commands are skipped."""
    values = section(load_config(args.config), prefix)
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        if "." in key:
            head, _, key = key.partition(".")
            if head != prefix:
                continue
        values[key] = value
    return values


def _overlay(values: dict, **flags) -> dict:
    out = dict(values)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


# -- output helpers ----------------------------------------------------------------

def _emit(args, payload: dict, human: str) -> None:
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(human)


def _round_list(values, digits=10):
    return [round(float(v), digits) for v in np.asarray(values).ravel()]


def _pipeline_config(args) -> PipelineConfig:
    values = _overlay(_settings(args, None), core=getattr(args, "core", None),
                      eps_in=getattr(args, "eps_in", None), max_block=getattr(args, "max_block", None),
                      num_bases=getattr(args, "num_bases", None), basis=getattr(args, "basis", None),
                      seed=args.seed)
    return PipelineConfig.from_mapping(values)


# -- commands --------------------------------------------------------------------

def cmd_segment(args) -> int:
    cfg = _pipeline_config(args)
    image = load_image(args.input)
    report = segment_image(image, cfg, jobs=args.jobs)
    save_mask(report.mask, args.output)
    if args.diagnostics:
        Path(args.diagnostics).write_text(report.to_json(args.timing) + "\n")
    payload = report.diagnostics(args.timing)
    _emit(args, payload, f"segmented {args.input}: {len(report.nodes)} blocks, "
                         f"foreground fraction {report.mask.fraction:.6f} -> {args.output}")
    return EXIT_OK


def _single_block(args, cfg: PipelineConfig) -> BlockSignal:
    image = load_image(args.input)
    luma, _ = split_channels(image)
    side = args.side or cfg.max_block
    r, c = args.origin
    if r < 0 or c < 0 or r >= luma.shape[0] or c >= luma.shape[1]:
        raise DataError(f"origin {r},{c} lies outside the {luma.shape} image")
    crop = luma[r:r + side, c:c + side]
    crop = pad_edge(crop, (side, side))
    return BlockSignal.from_array(crop, (r, c))


def _origin(text: str):
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError("origin must be ROW,COL") from exc
    return r, c


def cmd_sd(args) -> int:
    cfg = _pipeline_config(args)
    block = _single_block(args, cfg)
    basis = block_basis(cfg, block.block_side)
    res = sd_solve(block, SdConfig(basis, cfg.lambda1, cfg.lambda2, cfg.rho1, cfg.rho2, cfg.rho3,
                                   cfg.sd_max_iters, cfg.sd_tol, cfg.eps_in))
    mask = res.mask.reshape((block.block_side,) * 2, order="F")
    save_mask(mask, args.output)
    payload = {"origin": list(block.origin), "side": block.block_side, "iterations": res.iterations,
               "converged": res.converged, "objective": round(res.loss_trace[-1], 8),
               "foreground_fraction": round(float(mask.mean()), 6), "alpha": _round_list(res.alpha[0])}
    _emit(args, payload, f"sd: {res.iterations} iterations, objective {payload['objective']}, "
                         f"foreground fraction {payload['foreground_fraction']} -> {args.output}")
    return EXIT_OK


def cmd_ransac(args) -> int:
    cfg = _pipeline_config(args)
    block = _single_block(args, cfg)
    basis = block_basis(cfg, block.block_side)
    rng = _node_rng(cfg, block.origin, block.block_side)
    res = ransac_segment(block, basis, RansacConfig(basis.k, cfg.eps_in, cfg.ransac_max_iters,
                                                    cfg.early_stop_ratio, None), rng=rng)
    mask = res.foreground.reshape((block.block_side,) * 2, order="F")
    save_mask(mask, args.output)
    payload = {"origin": list(block.origin), "side": block.block_side, "trials": res.iterations,
               "inlier_ratio": round(res.inlier_ratio, 6), "alpha": _round_list(res.alpha)}
    _emit(args, payload, f"ransac: {res.iterations} trials, inlier ratio {payload['inlier_ratio']} "
                         f"-> {args.output}")
    return EXIT_OK


def _training_patches(paths, side: int, stride: int) -> np.ndarray:
    cols = []
    for p in paths:
        luma, _ = split_channels(load_image(p))
        for b in extract_blocks(luma, side, stride):
            cols.append(b.values)
    if not cols:
        raise DataError("no training patches")
    return np.stack(cols, axis=1)


def _synthetic_patches(count: int, side: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    basis = make_dct2d(side, min(side * side, 15))
    coef = rng.normal(scale=40.0, size=(basis.k, count))
    return 128.0 + basis.columns @ coef


def cmd_learn(args) -> int:
    values = _overlay(_settings(args, "learn"), subspace_dim=args.dim, seed=args.seed)
    side = int(values.pop("patch_side", args.patch_side))
    stride = int(values.pop("stride", args.stride))
    cfg = build_config(SlConfig, values)
    if args.inputs:
        data = _training_patches(args.inputs, side, stride)
    else:
        data = _synthetic_patches(args.synthetic, side, cfg.seed)
    learned = sl_train(data, cfg)
    learned.save(args.output)
    payload = {"samples": int(data.shape[1]), "n": learned.basis.n, "k": learned.basis.k,
               "iterations": learned.iterations, "converged": learned.converged,
               "final_loss": round(learned.loss_trace[-1], 6) if learned.loss_trace else None}
    if args.apply:
        luma, _ = split_channels(load_image(args.apply))
        blocks = extract_blocks(luma, side)
        masks = [sl_segment(b, learned, cfg).mask for b in blocks]
        mask = stitch_masks(blocks, masks, luma.shape)
        if not args.mask:
            raise UsageError("--apply needs --mask")
        save_mask(mask, args.mask)
        payload["foreground_fraction"] = round(mask.fraction, 6)
    _emit(args, payload, f"learned a {learned.basis.k}-dim subspace from {data.shape[1]} patches "
                         f"in {learned.iterations} iterations -> {args.output}")
    return EXIT_OK


def cmd_masked(args) -> int:
    path = Path(args.input)
    one_d = path.suffix.lower() in (".txt", ".dat", ".csv")
    if one_d:
        values = _overlay(_settings(args, "masked1d"), seed=args.seed)
        k1 = int(values.pop("k1", 10))
        k2 = int(values.pop("k2", 10))
        x = load_signal(path)
        if x.size & (x.size - 1):
            raise DataError("1D signals must have a power-of-two length for the Hadamard basis")
        cfg = build_config(MdConfig, values, basis1=make_sinusoid1d(x.size, k1),
                           basis2=make_hadamard(x.size, k2))
        res = md_solve(x, cfg)
        prefix = args.output
        save_signal(res.w_binary, f"{prefix}.mask.txt")
        save_signal(res.c1, f"{prefix}.c1.txt")
        save_signal(res.c2, f"{prefix}.c2.txt")
        payload = {"length": int(x.size), "iterations": res.iterations, "converged": res.converged,
                   "foreground": int(res.w_binary.sum()),
                   "final_loss": round(res.loss_trace[-1], 8), "diagnostics": res.diagnostics}
        _emit(args, payload, f"masked 1D: {res.iterations} iterations, {payload['foreground']} "
                             f"second-component samples -> {prefix}.*.txt")
        return EXIT_OK
    values = _overlay(_settings(args, "masked"), seed=args.seed)
    side = int(values.pop("block_side", 64))
    k1 = int(values.pop("k1", 40))
    k2 = int(values.pop("k2", 8))
    cfg = build_config(MdConfig, values, basis1=make_dct2d(side, k1),
                       basis2=make_hadamard(side * side, k2))
    luma, _ = split_channels(load_image(path))
    blocks = extract_blocks(luma, side)
    results = [md_solve(b, cfg) for b in blocks]
    mask = stitch_masks(blocks, [r.w_binary for r in results], luma.shape)
    save_mask(mask, args.output)
    payload = {"blocks": len(blocks), "foreground_fraction": round(mask.fraction, 6),
               "iterations": [r.iterations for r in results]}
    _emit(args, payload, f"masked 2D: {len(blocks)} blocks, foreground fraction "
                         f"{payload['foreground_fraction']} -> {args.output}")
    return EXIT_OK


def cmd_mrpca(args) -> int:
    cfg = build_config(MrConfig, _settings(args, "mrpca"))
    x = load_matrix(args.input)
    res = mr_solve(x, cfg)
    ext = ".npy" if Path(args.input).suffix == ".npy" else ".csv"
    save_matrix(res.L, f"{args.output}.L{ext}")
    save_matrix(res.S, f"{args.output}.S{ext}")
    save_matrix(res.W_binary, f"{args.output}.W{ext}")
    payload = {"shape": list(x.shape), "iterations": res.iterations, "converged": res.converged,
               "foreground": int(res.W_binary.sum()), "rank": res.diagnostics["rank"],
               "feasibility": round(res.diagnostics["feasibility"], 10)}
    _emit(args, payload, f"mrpca: {res.iterations} iterations, rank {payload['rank']}, "
                         f"{payload['foreground']} foreground entries -> {args.output}.*{ext}")
    return EXIT_OK


def cmd_motionseg(args) -> int:
    values = _settings(args, "motion")
    baseline_threshold = float(values.pop("baseline_threshold", 1.0))
    cfg = build_config(MotionConfig, values)
    flow = read_flow(args.input)
    if args.baseline:
        a, mask = lsq_threshold_segment(flow, baseline_threshold, cfg.model)
        payload = {"method": "lsq_threshold", "a": _round_list(a)}
    else:
        res = motion_masked_segment(flow, cfg)
        a, mask = res.a, res.w_binary
        payload = {"method": "masked", "a": _round_list(a), "iterations": res.iterations,
                   "converged": res.converged, "final_loss": round(res.loss_trace[-1], 6)}
    save_mask(MaskImage(mask), args.output)
    payload["foreground_fraction"] = round(float(np.mean(mask)), 6)
    payload["dims"] = list(flow.dims)
    if args.diagnostics:
        Path(args.diagnostics).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _emit(args, payload, f"motionseg ({payload['method']}): foreground fraction "
                         f"{payload['foreground_fraction']} -> {args.output}")
    return EXIT_OK


def cmd_bench(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    pcfg = _pipeline_config(args)
    if args.corpus == "synth":
        corpus = synth_corpus(args.count, seed=args.seed or 0)
    else:
        corpus = load_manifest(args.corpus)
    report = run_benchmark(corpus, methods, {"pipeline": pcfg}, jobs=args.jobs)
    text = report.to_json(args.timing) + "\n" if args.json else report.to_csv(args.timing)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value settings file (paper.cfg ships with the package)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
    common.add_argument("--seed", type=int, default=None, help="seed for every random choice")
    common.add_argument("--json", action="store_true", help="machine-readable diagnostics on stdout")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes")
    common.add_argument("--timing", action="store_true", help="include wall-clock times in reports")

    parser = _Parser(prog="subseg", description="Foreground/background separation by subspace models.")
    parser.add_argument("--version", action="version", version=f"subseg {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    pipe = _Parser(add_help=False)
    pipe.add_argument("--core", choices=["ransac", "sd"])
    pipe.add_argument("--eps-in", type=float, dest="eps_in")
    pipe.add_argument("--max-block", type=int, dest="max_block")
    pipe.add_argument("--num-bases", type=int, dest="num_bases")
    pipe.add_argument("--basis", choices=["dct", "polynomial"])

    p = sub.add_parser("segment", parents=[common, pipe], help="segment an image with the block pipeline")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True, help="mask image")
    p.add_argument("--diagnostics", help="write the per-block JSON report here")
    p.set_defaults(func=cmd_segment)

    for name, fn, text in (("sd", cmd_sd, "sparse decomposition of one block"),
                           ("ransac", cmd_ransac, "RANSAC segmentation of one block")):
        p = sub.add_parser(name, parents=[common, pipe], help=text)
        p.add_argument("input")
        p.add_argument("-o", "--output", required=True, help="mask image")
        p.add_argument("--origin", type=_origin, default=(0, 0), help="block origin ROW,COL")
        p.add_argument("--side", type=int, help="block side (default max_block)")
        p.set_defaults(func=fn)

    p = sub.add_parser("learn", parents=[common], help="learn a subspace from training patches")
    p.add_argument("inputs", nargs="*", help="training images (omit for synthetic patches)")
    p.add_argument("-o", "--output", required=True, help="subspace file")
    p.add_argument("--dim", type=int, help="subspace dimension")
    p.add_argument("--patch-side", type=int, default=32, dest="patch_side")
    p.add_argument("--stride", type=int, default=5)
    p.add_argument("--synthetic", type=int, default=200, help="synthetic patch count")
    p.add_argument("--apply", help="segment this image with the learned subspace")
    p.add_argument("--mask", help="mask output for --apply")
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("masked", parents=[common], help="masked two-component decomposition")
    p.add_argument("input", help="1D signal (.txt) or image")
    p.add_argument("-o", "--output", required=True, help="output prefix (1D) or mask image (2D)")
    p.set_defaults(func=cmd_masked)

    p = sub.add_parser("mrpca", parents=[common], help="masked low-rank plus sparse decomposition")
    p.add_argument("input", help="matrix (.npy or CSV), rows = pixels, columns = frames")
    p.add_argument("-o", "--output", required=True, help="output prefix")
    p.set_defaults(func=cmd_mrpca)

    p = sub.add_parser("motionseg", parents=[common], help="moving-object mask from an optical-flow field")
    p.add_argument("input", help=".flo or CSV (row,col,u,v) flow file")
    p.add_argument("-o", "--output", required=True, help="mask image")
    p.add_argument("--baseline", action="store_true", help="least-squares fit plus error threshold")
    p.add_argument("--diagnostics", help="write the JSON report here")
    p.set_defaults(func=cmd_motionseg)

    p = sub.add_parser("bench", parents=[common, pipe], help="score methods on a corpus")
    p.add_argument("--corpus", default="synth", help="'synth' or a manifest file")
    p.add_argument("--methods", default="ransac,sd", help=f"comma list from {','.join(METHODS)}")
    p.add_argument("--count", type=int, default=4, help="synthetic corpus size")
    p.add_argument("-o", "--output", help="result table (default stdout)")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        if args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        return args.func(args)
    except UsageError as exc:
        print(f"subseg: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ParameterError as exc:
        print(f"subseg: invalid parameter: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DegeneracyError, FileNotFoundError) as exc:
        print(f"subseg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"subseg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TypeError) as exc:
        print(f"subseg: invalid value: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SubsegError as exc:
        print(f"subseg: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
