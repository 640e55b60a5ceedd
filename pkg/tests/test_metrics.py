import itertools
import warnings

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from layerdecomp.errors import ContractError, CorrespondenceError
from layerdecomp.imaging import LayerStack
from layerdecomp.metrics import (IllConditionedCovariance, alpha_soft_iou, dtw_align, evaluate_stack, f1,
                                 frechet_distance, frechet_stats, mask_iou, psnr, rgb_l1, ssim, unified_score)
from layerdecomp.synth import SynthConfig, synth_stack

RNG = np.random.default_rng(7)


# psnr


def test_psnr_examples():
    a = RNG.uniform(size=(8, 8, 3))
    assert psnr(a, a) == 99.0
    assert psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.5)) == pytest.approx(6.020599913, abs=1e-9)


def test_psnr_matches_naive_per_pixel_oracle():
    a, b = RNG.uniform(size=(9, 7, 3)), RNG.uniform(size=(9, 7, 3))
    total = 0.0
    for i, j, c in itertools.product(range(9), range(7), range(3)):
        total += (a[i, j, c] - b[i, j, c]) ** 2
    assert psnr(a, b) == pytest.approx(10 * np.log10(1 / (total / a.size)), abs=1e-9)


# ssim


def ssim_direct(x, y, top, left, g):
    """SSIM at one window evaluated straight from the weighted-moment definition."""
    w = np.outer(g, g)
    px, py = x[top:top + 11, left:left + 11], y[top:top + 11, left:left + 11]
    mx, my = (w * px).sum(), (w * py).sum()
    vx, vy = (w * (px - mx) ** 2).sum(), (w * (py - my) ** 2).sum()
    cxy = (w * (px - mx) * (py - my)).sum()
    c1, c2 = 0.01**2, 0.03**2
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))


def test_ssim_examples():
    a = RNG.uniform(size=(16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    binary = (RNG.uniform(size=(16, 16, 3)) > 0.5).astype(float)
    assert ssim(binary, 1 - binary) < 0
    with pytest.raises(ContractError):
        ssim(np.zeros((10, 10, 3)), np.zeros((10, 10, 3)))


def test_ssim_matches_direct_windowed_formula():
    from layerdecomp.metrics import gaussian_window
    g = gaussian_window()
    x = RNG.uniform(size=(14, 13))
    for y in (np.clip(x + 0.1, 0, 1), RNG.uniform(size=(14, 13))):
        vals = [ssim_direct(x, y, i, j, g) for i in range(4) for j in range(3)]
        assert ssim(x, y) == pytest.approx(np.mean(vals), abs=1e-9)


def test_ssim_agrees_with_scikit_image():
    skm = pytest.importorskip("skimage.metrics")
    a = RNG.uniform(size=(32, 32, 3))
    b = np.clip(a + RNG.normal(0, 0.1, a.shape), 0, 1)
    ref = skm.structural_similarity(a, b, channel_axis=-1, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-9)


# layer metrics


def rgba(rgb, a, shape=(4, 4)):
    img = np.zeros((*shape, 4))
    img[..., :3] = rgb
    img[..., 3] = a
    return img


def test_rgb_l1_examples():
    x = RNG.uniform(size=(4, 4, 4))
    assert rgb_l1(x, x) == 0.0
    assert rgb_l1(rgba((1, 0, 0), 0.0), rgba((0, 1, 1), 0.0)) == 0.0
    assert rgb_l1(rgba((0, 0, 0), 1.0), rgba((1, 1, 1), 1.0)) == 1.0


def test_iou_and_f1_examples():
    a = RNG.uniform(size=(6, 6))
    assert alpha_soft_iou(a, a) == mask_iou(a, a) == f1(a, a) == 1.0
    left, right = np.zeros((4, 4)), np.zeros((4, 4))
    left[:, :2], right[:, 2:] = 1, 1
    assert alpha_soft_iou(left, right) == mask_iou(left, right) == f1(left, right) == 0.0
    assert alpha_soft_iou(np.full((3, 3), 0.25), np.full((3, 3), 0.75)) == pytest.approx(1 / 3)
    empty = np.zeros((3, 3))
    assert alpha_soft_iou(empty, empty) == mask_iou(empty, empty) == f1(empty, empty) == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_metric_ranges_on_random_alphas(seed):
    rng = np.random.default_rng(seed)
    p, g = rng.uniform(size=(5, 5)) ** 2, rng.uniform(size=(5, 5))
    for v in (alpha_soft_iou(p, g), mask_iou(p, g), f1(p, g)):
        assert 0.0 <= v <= 1.0


def test_unified_score_reproduces_reported_rows():
    assert abs(unified_score(0.0474, 0.7771) - 0.1352) <= 5e-5
    assert abs(unified_score(0.0653, 0.7055) - 0.1799) <= 5e-5
    assert unified_score(0.0, 1.0) == 0.0
    with pytest.raises(ContractError):
        unified_score(1.2, 0.5)


# frechet


def closed_form_frechet(mu_a, cov_a, mu_b, cov_b):
    root = scipy.linalg.sqrtm(cov_a @ cov_b)
    return float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a + cov_b - 2 * np.real(root)))


def test_frechet_identical_set_is_zero():
    x = RNG.standard_normal((200, 6))
    assert abs(frechet_distance(x, x)) <= 1e-8


def test_frechet_matches_closed_form_for_gaussians():
    for dim in (1, 3, 8):
        ma, mb = RNG.standard_normal(dim), RNG.standard_normal(dim)
        la, lb = RNG.standard_normal((dim, dim)), RNG.standard_normal((dim, dim))
        ca, cb = la @ la.T + 0.1 * np.eye(dim), lb @ lb.T + 0.1 * np.eye(dim)
        value, reg = frechet_stats(ma, ca, mb, cb)
        assert reg == 0.0
        assert value == pytest.approx(closed_form_frechet(ma, ca, mb, cb), abs=1e-6)


def test_frechet_of_constant_sets_is_regularized_mean_shift():
    a, b = np.zeros((10, 1)), np.ones((10, 1))
    with pytest.warns(IllConditionedCovariance):
        value, reg = frechet_distance(a, b, return_regularization=True)
    assert reg > 0
    assert value == pytest.approx(1.0, abs=1e-6)


def test_frechet_contract_errors():
    with pytest.raises(ContractError):
        frechet_distance(np.zeros((1, 3)), np.zeros((5, 3)))
    with pytest.raises(ContractError):
        frechet_distance(np.zeros((4, 3)), np.zeros((5, 2)))


# dtw


def monotone_paths(n, m):
    """Every path from (0,0) to (n-1,m-1) using (1,0), (0,1), (1,1) steps."""
    def walk(i, j):
        if (i, j) == (n - 1, m - 1):
            yield [(i, j)]
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di < n and j + dj < m:
                for rest in walk(i + di, j + dj):
                    yield [(i, j)] + rest
    return list(walk(0, 0))


def test_dtw_identical_lists_align_diagonally():
    layers = [RNG.uniform(size=(4, 4, 4)) for _ in range(3)]
    al = dtw_align(layers, layers)
    assert al.path == [(0, 0), (1, 1), (2, 2)] and al.total_cost == 0.0


def test_dtw_single_prediction_expands():
    layers = [RNG.uniform(size=(4, 4, 4)) for _ in range(3)]
    assert dtw_align(layers[:1], layers).path == [(0, 0), (0, 1), (0, 2)]


@pytest.mark.parametrize("seed", range(10))
def test_dtw_cost_equals_exhaustive_minimum(seed):
    c = np.random.default_rng(seed).uniform(size=(3, 4))
    al = dtw_align(list(range(3)), list(range(4)), cost=lambda p, g: c[p, g])
    best = min(sum(c[i, j] for i, j in path) for path in monotone_paths(3, 4))
    assert al.total_cost == pytest.approx(best, abs=1e-12)
    assert sum(c[i, j] for i, j in al.path) == pytest.approx(al.total_cost, abs=1e-12)
    assert al.path in monotone_paths(3, 4)


# stack evaluation


def test_identity_stack_scores_perfectly():
    s = synth_stack(3, SynthConfig(n_layers=3))
    r = evaluate_stack(s, s)
    assert r.reconstruction["psnr"] == 99.0
    assert r.reconstruction["ssim"] == pytest.approx(1.0)
    assert r.unified_score == 0.0
    for m in r.per_layer:
        assert m.psnr == 99.0 and m.alpha_soft_iou == m.mask_iou == m.f1 == 1.0
    d = r.to_dict()
    assert set(d) >= {"per_layer", "reconstruction", "unified_score", "frechet"}


def test_missing_layer_requires_dtw():
    gt = synth_stack(5, SynthConfig(n_layers=3))
    pred = LayerStack(gt.composite, gt.background, gt.foregrounds[:1], gt.global_prompt)
    with pytest.raises(CorrespondenceError):
        evaluate_stack(pred, gt)
    r = evaluate_stack(pred, gt, dtw=True)
    assert r.alignment[0] == [0, 0] and r.alignment[-1] == [1, 2]
    assert len(r.per_layer) == len(r.alignment)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_report_ranges_on_fuzzed_predictions(seed):
    gt = synth_stack(seed, SynthConfig(n_layers=3))
    rng = np.random.default_rng(seed)
    pred = synth_stack(seed, SynthConfig(n_layers=3))
    for layer in pred.layers:
        layer.rgba = np.clip(layer.rgba + rng.normal(0, 0.3, layer.rgba.shape), 0, 1)
    r = evaluate_stack(pred, gt)
    assert 0 <= r.unified_score <= 1
    for m in r.per_layer:
        assert -1 <= m.ssim <= 1 and 0 <= m.rgb_l1 <= 1
        assert all(0 <= v <= 1 for v in (m.alpha_soft_iou, m.mask_iou, m.f1))
