"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line (shown even
under output capture) and then asserts the same condition.
"""

import json
import os
import time

import numpy as np
import pytest

from subseg.bases import (lsf_rmse_curve, make_dct1d, make_dct2d, make_hadamard, make_polynomial2d,
                          make_sinusoid1d)
from subseg.cli import EXIT_OK, main
from subseg.evaluate import load_manifest, run_benchmark, score_mask
from subseg.imageio import (save_image, save_matrix, save_signal, synth_background,
                            synth_sheet, synth_text_block, synth_two_region_block)
from subseg.maskeddecomp import InitScheme, MdConfig, md_solve
from subseg.maskedrpca import mr_solve, synth_overlaid_lowrank
from subseg.motionseg import (lsq_threshold_segment, mask_iou, motion_masked_segment, predict_flow,
                              synth_motion_scene, write_flow)
from subseg.operators import block_soft_threshold, soft_threshold, svt
from subseg.pipeline import PipelineConfig, segment_block
from subseg.robustfit import RansacConfig, ransac_segment
from subseg.sparsedecomp import SdConfig, sd_objective, sd_solve
from subseg.subspacelearn import SlConfig, sl_train

from masked_data import bases as masked_bases, overlaid_signal
from oracles import block_soft_grid, l1_fit_lp, soft_threshold_grid, svt_cutting_plane
from subspace_data import projector_error, training_set


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
    return emit


def test_criterion_01_bases(report):
    # the timer covers generation and reconstruction; the dense Gram checks are verification
    rng = np.random.default_rng(0)
    worst_orth, worst_rec, elapsed = 0.0, 0.0, 0.0
    for n in (4, 8, 16, 64):
        kk = min(n * n, 10)
        start = time.perf_counter()
        sets = [make_dct2d(n, kk), make_polynomial2d(n, kk), make_hadamard(n * n, kk),
                make_dct1d(n, min(n, 10)), make_sinusoid1d(n, min(n - 1, 10)), make_dct2d(n, n * n)]
        full = sets[-1]
        f = rng.uniform(0, 255, n * n)
        rec = full.synthesize(full.coefficients(f))
        elapsed += time.perf_counter() - start
        worst_orth = max([worst_orth] + [b.orthonormality_error() for b in sets])
        worst_rec = max(worst_rec, float(np.sqrt(np.mean((rec - f) ** 2))))
    ok = worst_orth < 1e-10 and worst_rec < 1e-8 and elapsed < 1.0
    report(1, ok, f"max|PtP-I|={worst_orth:.2e} full-DCT rmse={worst_rec:.2e} time={elapsed:.2f}s")
    assert ok


def test_criterion_02_prox_oracles(report):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = {"soft": 0.0, "block": 0.0, "svt": 0.0}
    for _ in range(100):
        x = rng.normal(scale=2, size=6)
        t = rng.uniform(0, 2)
        worst["soft"] = max(worst["soft"], np.abs(soft_threshold(x, t) - soft_threshold_grid(x, t)).max())
        worst["block"] = max(worst["block"], np.abs(block_soft_threshold(x, t) - block_soft_grid(x, t)).max())
        m = rng.normal(size=(2, 2))
        tm = rng.uniform(0, 1)
        worst["svt"] = max(worst["svt"], np.abs(svt(m, tm) - svt_cutting_plane(m, tm)).max())
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-3 and elapsed < 10
    report(2, ok, " ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f" time={elapsed:.1f}s")
    assert ok


def test_criterion_03_lsf_monotone(report):
    rng = np.random.default_rng(3)
    basis = make_dct2d(16, 20)
    violations = 0
    for i in range(50):
        bg = synth_background(16, f"smooth-dct({2 + i % 8})", rng, level=rng.uniform(60, 190))
        bg += rng.normal(scale=2, size=bg.shape)
        curve = lsf_rmse_curve(bg, basis)
        violations += int(np.sum(np.diff(curve) > 0))
    report(3, violations == 0, f"increases in RMSE(K), K=1..20 over 50 blocks: {violations}")
    assert violations == 0


def test_criterion_04_ransac(report):
    basis = make_dct2d(64, 10)
    scores = []
    repeat_ok = True
    for seed in range(100):
        rng = np.random.default_rng(seed)
        kind = ("constant", "smooth-dct(6)")[seed % 2]
        dens = 0.1 + 0.2 * rng.uniform()
        gap = 50 + 50 * rng.uniform()
        blk, truth = synth_text_block(64, kind, dens, gap, seed=seed)
        cfg = RansacConfig(num_bases=10, inlier_threshold=10, max_iters=200, rng_seed=seed)
        r = ransac_segment(blk, basis, cfg)
        scores.append(score_mask(r.foreground, truth.values.ravel(order="F"))[2])
        if seed < 10:
            repeat_ok &= np.array_equal(ransac_segment(blk, basis, cfg).foreground, r.foreground)
    ok = np.mean(scores) >= 0.95 and repeat_ok
    report(4, ok, f"mean F1={np.mean(scores):.4f} over 100 instances, repeatable={repeat_ok}")
    assert ok


@pytest.mark.skipif(not os.environ.get("SUBSEG_DATASET"), reason="set SUBSEG_DATASET to a corpus manifest")
def test_criterion_04_ransac_on_reference_corpus(report):
    corpus = load_manifest(os.environ["SUBSEG_DATASET"])
    f1 = run_benchmark(corpus, ["ransac"]).averages()["ransac"]["f1"]
    ok = 0.85 <= f1 <= 0.95
    report(4, ok, f"reference corpus RANSAC F1={f1:.3f} over {len(corpus)} images")
    assert ok


def _max_rel_change_reached(trace, limit):
    rel = [abs(a - b) / abs(a) for a, b in zip(trace, trace[1:]) if a]
    return bool(rel) and min(rel[:limit]) < 1e-4


def test_criterion_05_sparse_decomposition(report):
    rng = np.random.default_rng(5)
    b8 = make_dct2d(8, 4)
    cfg8 = SdConfig(b8)
    d = cfg8.diffop.stacked.toarray()
    gaps = []
    for _ in range(20):
        f = rng.uniform(0, 255, 64)
        ours = sd_objective(sd_solve(f, cfg8).alpha[0], f, cfg8)
        best, _ = l1_fit_lp(f, b8.columns, d, cfg8.lambda1, cfg8.lambda2)
        gaps.append((ours - best) / best)

    b64 = make_dct2d(64, 10)
    settle = []
    for seed, kind in enumerate(("constant", "smooth-dct(6)", "texture") * 3):
        blk, _ = synth_text_block(64, kind, 0.15, 100, seed=seed)
        settle.append(_max_rel_change_reached(sd_solve(blk, SdConfig(b64)).loss_trace, 50))

    sd_prec, ra_prec = [], []
    for seed in range(10):
        blk, truth = synth_text_block(64, "texture", 0.15, 100, seed=100 + seed)
        t = truth.values.ravel(order="F")
        sd_prec.append(score_mask(sd_solve(blk, SdConfig(b64)).mask, t)[0])
        ra_prec.append(score_mask(ransac_segment(blk, b64, RansacConfig(rng_seed=seed)).foreground, t)[0])
    ok = max(gaps) < 5e-3 and all(settle) and np.mean(sd_prec) >= np.mean(ra_prec)
    report(5, ok, f"worst LP gap={max(gaps):.3%} settled={sum(settle)}/{len(settle)} "
                  f"precision SD={np.mean(sd_prec):.3f} RANSAC={np.mean(ra_prec):.3f}")
    assert ok


def test_criterion_06_pipeline(report):
    on, off, covered = [], [], True
    for seed in range(20):
        blk, truth = synth_two_region_block(seed=seed)
        tree = segment_block(blk, PipelineConfig())
        count = np.zeros((64, 64), dtype=int)
        for leaf in tree.leaves():
            r, c = leaf.origin
            count[r:r + leaf.side, c:c + leaf.side] += 1
        covered &= bool(np.all(count == 1))
        on.append(score_mask(tree.full_mask(), truth.values)[2])
        off.append(score_mask(segment_block(blk, PipelineConfig(min_block=64)).full_mask(), truth.values)[2])
    ok = covered and np.mean(on) >= 0.9 and np.mean(off) < 0.7
    report(6, ok, f"cover exact={covered} F1 recursion={np.mean(on):.3f} flat={np.mean(off):.3f}")
    assert ok


def _steps_non_increasing(steps, slack=1e-9):
    # alpha -> s -> raw basis inside an iteration, and re-expressed basis -> next alpha
    chain = []
    for i, (stage, loss) in enumerate(steps):
        if stage == "basis":
            continue
        if stage == "alpha" and i > 0:
            chain.append(("basis", steps[i - 1][1]))
        chain.append((stage, loss))
    bad = [(a, b) for (sa, a), (sb, b) in zip(chain, chain[1:])
           if not (sa == "basis_raw" and sb == "basis") and b > a + slack * max(abs(a), 1.0)]
    return not bad


def test_criterion_07_subspace_learning(report):
    cfg = SlConfig(subspace_dim=5, lambda1=0.5, outer_iters=300, tol=1e-12, s_rule="shrink_then_clamp")
    x, t = training_set()
    clean = sl_train(x, cfg, record_steps=True)
    xo, _ = training_set(outliers=True)
    dirty = sl_train(xo, cfg, record_steps=True)
    u, _, _ = np.linalg.svd(xo, full_matrices=False)
    e_clean = projector_error(clean.basis.columns, t)
    e_dirty = projector_error(dirty.basis.columns, t)
    e_pca = projector_error(u[:, :5], t)
    mono = _steps_non_increasing(clean.step_trace) and _steps_non_increasing(dirty.step_trace)
    ok = e_clean < 1e-3 and e_dirty < 1e-2 and e_pca >= 5 * e_dirty and mono
    report(7, ok, f"projector error clean={e_clean:.2e} outliers={e_dirty:.2e} PCA={e_pca:.3f} "
                  f"monotone={mono}")
    assert ok


def test_criterion_08_masked_decomposition(report):
    p1, p2 = masked_bases()
    base = dict(lambda1=0.3, lambda2=10.0, max_iters=20)
    exact, rmse_ok, settled, agree = 0, 0, 0, 0
    for seed in range(100):
        x, w, c1, c2 = overlaid_signal(seed)
        res = md_solve(x, MdConfig(p1, p2, init="lsf_error", **base))
        hit = np.array_equal(res.w_binary.astype(bool), w)
        exact += hit
        # each component is only observed where it is selected
        rmse = max(np.sqrt(np.mean((res.c1 - c1)[~w] ** 2)), np.sqrt(np.mean((res.c2 - c2)[w] ** 2)))
        rmse_ok += hit and rmse < 1e-3
        lt = res.loss_trace
        rel = [abs(a - b) / abs(a) for a, b in zip(lt, lt[1:]) if a]
        settled += bool(rel) and min(rel[:10]) < 1e-6
        if seed < 20:
            masks = [md_solve(x, MdConfig(p1, p2, init=s, seed=seed, **base)).w_binary
                     for s in InitScheme]
            agree += min(np.mean(a == b) for i, a in enumerate(masks) for b in masks[i + 1:]) >= 0.9
    ok = exact >= 95 and rmse_ok >= 95 and settled == 100 and agree == 20
    report(8, ok, f"exact masks={exact}/100 rmse<1e-3={rmse_ok}/100 "
                  f"loss change<1e-6 in 10 iters={settled}/100 five inits agree>=90%={agree}/20")
    assert ok


def test_criterion_09_masked_rpca(report):
    x, l_true, _, w_true = synth_overlaid_lowrank(rows=40, cols=30, rank=2, density=0.05, seed=0)
    res = mr_solve(x)
    f1 = score_mask(res.W_binary, w_true)[2]
    l_err = np.linalg.norm(res.L - l_true) / np.linalg.norm(l_true)
    in_box = bool(res.W_continuous.min() >= 0 and res.W_continuous.max() <= 1)
    feas = res.diagnostics["feasibility"] / np.linalg.norm(x)
    ok = f1 >= 0.9 and l_err <= 0.05 and in_box and feas <= 1e-2
    report(9, ok, f"support F1={f1:.3f} L error={l_err:.2%} box={in_box} feasibility={feas:.1e}")
    assert ok


def test_criterion_10_motion(report):
    ious, wins, worst_a = [], True, 0.0
    for frac in (0.10, 0.15, 0.20):
        for seed in range(3):
            flow, mask, _ = synth_motion_scene(outlier_fraction=frac, seed=seed, noise=0.1,
                                               relative_motion=6)
            iou = mask_iou(motion_masked_segment(flow).w_binary, mask)
            ious.append(iou)
            if frac >= 0.15:
                wins &= iou > mask_iou(lsq_threshold_segment(flow, 1.0)[1], mask)
    for seed in range(3):
        _, _, a = synth_motion_scene(outlier_fraction=0.0, seed=seed)
        got = motion_masked_segment(predict_flow(a, (48, 64))).a
        worst_a = max(worst_a, float(np.abs(got - a).max() / np.abs(a).max()))
    ok = min(ious) >= 0.9 and worst_a <= 1e-4 and wins
    report(10, ok, f"min IoU={min(ious):.3f} a error={worst_a:.1e} beats baseline={wins}")
    assert ok


def _cli_inputs(d):
    img, _ = synth_sheet(64, 128, seed=1)
    save_image(img, d / "page.pgm")
    save_signal(overlaid_signal(0)[0], d / "sig.txt")
    save_matrix(synth_overlaid_lowrank(20, 12, seed=0)[0], d / "x.csv")
    write_flow(d / "f.flo", synth_motion_scene((24, 32), 0.15, seed=0, noise=0.1, relative_motion=6)[0])


def _cli_runs(d, out):
    return {
        "segment": ["segment", str(d / "page.pgm"), "-o", str(out / "seg.pbm"),
                    "--diagnostics", str(out / "seg.json")],
        "sd": ["sd", str(d / "page.pgm"), "-o", str(out / "sd.pbm")],
        "ransac": ["ransac", str(d / "page.pgm"), "-o", str(out / "ransac.pbm")],
        "learn": ["learn", "-o", str(out / "sub.npz"), "--synthetic", "40", "--dim", "4",
                  "--patch-side", "8", "--set", "outer_iters=5", "--apply", str(d / "page.pgm"),
                  "--mask", str(out / "learn.pbm")],
        "masked": ["masked", str(d / "sig.txt"), "-o", str(out / "sig")],
        "masked-2d": ["masked", str(d / "page.pgm"), "-o", str(out / "masked.pbm")],
        "mrpca": ["mrpca", str(d / "x.csv"), "-o", str(out / "lr")],
        "motionseg": ["motionseg", str(d / "f.flo"), "-o", str(out / "motion.pbm"),
                      "--diagnostics", str(out / "motion.json")],
        "bench": ["bench", "--corpus", "synth", "--count", "2", "--methods", "ransac,sd,lsf",
                  "-o", str(out / "bench.csv")],
    }


def test_criterion_11_cli_determinism(tmp_path, capsys, report):
    _cli_inputs(tmp_path)
    outputs = {}
    for run in ("a", "b"):
        out = tmp_path / run
        out.mkdir()
        for name, argv in _cli_runs(tmp_path, out).items():
            code = main(argv + ["--seed", "7", "--json", "--jobs", "2"])
            stdout = capsys.readouterr().out
            assert code == EXIT_OK, name
            files = {p.name: p.read_bytes() for p in sorted(out.iterdir())}
            outputs.setdefault(name, []).append((stdout, files))
    differing = [name for name, (first, second) in outputs.items() if first != second]
    report(11, not differing, f"{len(outputs)} commands, differing outputs: {differing or 'none'}")
    assert not differing
    assert json.loads(outputs["motionseg"][0][0])["method"] == "masked"
