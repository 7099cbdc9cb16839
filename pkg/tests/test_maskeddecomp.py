import numpy as np
import pytest
from hypothesis import given, strategies as st

from subseg.bases import make_dct2d, make_hadamard
from subseg.errors import ParameterError
from subseg.evaluate import score_mask
from subseg.imageio import synth_text_block
from subseg.maskeddecomp import BinarizeMode, InitScheme, MdConfig, md_initialize, md_objective, md_solve

from masked_data import bases, overlaid_signal


def _cfg1d(**kw):
    p1, p2 = bases()
    base = dict(lambda1=0.3, lambda2=10.0, max_iters=20, init="lsf_error")
    base.update(kw)
    return MdConfig(p1, p2, **base)


def test_config_validation():
    p1, p2 = bases()
    cfg = MdConfig(p1, p2)
    assert (cfg.lambda1, cfg.lambda2, cfg.max_iters, cfg.k1, cfg.k2) == (10.0, 0.2, 10, 10, 10)
    with pytest.raises(ParameterError):
        MdConfig(p1, p2, k1=11)
    with pytest.raises(ParameterError):
        MdConfig(p1, p2, binarize_threshold=1.0)
    with pytest.raises(ParameterError):
        MdConfig(p1, make_hadamard(128, 4))


def test_first_component_only_signal():
    p1, _ = bases()
    x = p1.synthesize(np.random.default_rng(0).normal(scale=30, size=10))
    res = md_solve(x, _cfg1d(init="zeros"))
    assert not res.w_binary.any()
    assert np.sqrt(np.mean((res.c1 - x) ** 2)) < 1e-6


def test_overlaid_signal_support_mostly_recovered():
    agree, f1 = [], []
    for seed in range(10):
        x, w, _, _ = overlaid_signal(seed)
        res = md_solve(x, _cfg1d())
        agree.append(np.mean(res.w_binary.astype(bool) == w))
        f1.append(score_mask(res.w_binary, w)[2])
    assert np.mean(agree) >= 0.9
    assert np.mean(f1) >= 0.8


def test_text_over_texture_block():
    b1, b2 = make_dct2d(64, 40), make_hadamard(4096, 8)
    cfg = MdConfig(b1, b2, init="lsf_error")
    for seed in range(3):
        blk, m = synth_text_block(64, "texture", 0.15, 80, seed=seed)
        res = md_solve(blk, cfg)
        assert score_mask(res.w_binary, m.values.ravel(order="F"))[2] >= 0.9


def test_objective_zero_at_exact_first_component():
    p1, _ = bases()
    a1 = np.random.default_rng(1).normal(size=10)
    cfg = _cfg1d()
    assert md_objective(p1.synthesize(a1), a1, np.zeros(10), np.zeros(256), cfg) == pytest.approx(0, abs=1e-18)


@given(st.integers(0, 2**31 - 1))
def test_objective_two_path(seed):
    rng = np.random.default_rng(seed)
    p1, p2 = bases()
    cfg = _cfg1d()
    x = rng.normal(size=256)
    a1, a2 = rng.normal(size=10), rng.normal(size=10)
    w = rng.uniform(size=256)
    c1, c2 = p1.columns @ a1, p2.columns @ a2
    direct = sum(0.5 * (x[i] - (1 - w[i]) * c1[i] - w[i] * c2[i]) ** 2 for i in range(256))
    direct += 0.3 * np.abs(w).sum() + 10 * sum(abs(w[i + 1] - w[i]) for i in range(255))
    assert md_objective(x, a1, a2, w, cfg) == pytest.approx(direct, rel=1e-10)


def test_mask_notations_agree():
    rng = np.random.default_rng(2)
    _, p2 = bases()
    w, a2 = rng.uniform(size=256), rng.normal(size=10)
    c2 = p2.columns @ a2
    np.testing.assert_allclose(np.diag(w) @ c2, np.diag(c2) @ w, atol=1e-12)


def test_initializations():
    cfg = _cfg1d(seed=3)
    x, _, _, _ = overlaid_signal(3)
    np.testing.assert_array_equal(md_initialize(x, cfg, InitScheme.ZEROS), 0)
    np.testing.assert_array_equal(md_initialize(x, cfg, "half"), 0.5)
    for scheme in ("gaussian", "uniform", "lsf_error"):
        w = md_initialize(x, cfg, scheme)
        assert np.all((w >= 0) & (w <= 1))
        np.testing.assert_array_equal(w, md_initialize(x, cfg, scheme))
    assert set(np.unique(md_initialize(x, cfg, "lsf_error"))) <= {0.0, 1.0}


@pytest.mark.parametrize("init", [s.value for s in InitScheme])
def test_box_caps_and_reproducibility(init):
    x, _, _, _ = overlaid_signal(4)
    cfg = _cfg1d(init=init, k1=6, k2=4)
    a = md_solve(x, cfg)
    b = md_solve(x, cfg)
    assert np.all((a.w_continuous >= 0) & (a.w_continuous <= 1))
    assert np.count_nonzero(a.alpha1) <= 6 and np.count_nonzero(a.alpha2) <= 4
    np.testing.assert_array_equal(a.w_continuous, b.w_continuous)
    np.testing.assert_array_equal(a.alpha1, b.alpha1)
    assert a.loss_trace == b.loss_trace


def test_binarize_at_end_not_worse_than_each_iteration():
    # regression check on the corpus mean for image blocks, not per instance
    b1, b2 = make_dct2d(64, 40), make_hadamard(4096, 8)
    at_end, each = [], []
    for seed in range(6):
        blk, m = synth_text_block(64, "texture", 0.3, 30, seed=seed, noise_sigma=4)
        truth = m.values.ravel(order="F")
        at_end.append(score_mask(md_solve(blk, MdConfig(b1, b2, init="lsf_error")).w_binary, truth)[2])
        cfg = MdConfig(b1, b2, init="lsf_error", binarize_mode=BinarizeMode.EACH_ITERATION)
        each.append(score_mask(md_solve(blk, cfg).w_binary, truth)[2])
    assert np.mean(at_end) >= np.mean(each)


def test_reconstruction_uses_binary_mask():
    x, _, _, _ = overlaid_signal(5)
    res = md_solve(x, _cfg1d())
    wb = res.w_binary.astype(float)
    np.testing.assert_allclose(res.reconstruction, (1 - wb) * res.c1 + wb * res.c2)
