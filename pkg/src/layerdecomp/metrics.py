"""Decomposition benchmark: layer-, mask- and reconstruction-level metrics.

RGBA layers are flattened onto neutral gray before any RGB metric.  The
Fréchet distance here uses a pluggable embedding (default: 8x8 average
pooled luminance, "pixel64"); its values are not comparable with
Inception-based FID.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, CorrespondenceError
from .imaging import LayerStack, over_composite, rgba_to_rgb

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
MASK_THRESHOLD = 0.5
FRECHET_EPS = 1e-6


class IllConditionedCovariance(UserWarning):
    pass


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ContractError(f"{what}: shapes differ, {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak SNR in dB for unit-range images, capped at ``PSNR_CAP``."""
    _same_shape(a, b, "psnr")
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    x = sliding_window_view(x, k, axis=0) @ g
    return sliding_window_view(x, k, axis=1) @ g


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over channels."""
    _same_shape(a, b, "ssim")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ContractError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    g = gaussian_window()
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    scores = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        scores.append(smap.mean())
    return float(np.clip(np.mean(scores), -1.0, 1.0))


def rgb_l1(pred: np.ndarray, gt: np.ndarray) -> float:
    _same_shape(pred, gt, "rgb_l1")
    return float(np.mean(np.abs(rgba_to_rgb(pred) - rgba_to_rgb(gt))))


def alpha_soft_iou(pred_alpha: np.ndarray, gt_alpha: np.ndarray) -> float:
    _same_shape(pred_alpha, gt_alpha, "alpha_soft_iou")
    union = float(np.maximum(pred_alpha, gt_alpha).sum())
    if union == 0.0:
        return 1.0
    return float(np.minimum(pred_alpha, gt_alpha).sum()) / union


def mask_iou(pred_alpha: np.ndarray, gt_alpha: np.ndarray, threshold: float = MASK_THRESHOLD) -> float:
    _same_shape(pred_alpha, gt_alpha, "mask_iou")
    p, g = pred_alpha > threshold, gt_alpha > threshold
    union = int((p | g).sum())
    return 1.0 if union == 0 else int((p & g).sum()) / union


def f1(pred_alpha: np.ndarray, gt_alpha: np.ndarray, threshold: float = MASK_THRESHOLD) -> float:
    _same_shape(pred_alpha, gt_alpha, "f1")
    p, g = pred_alpha > threshold, gt_alpha > threshold
    denom = int(p.sum()) + int(g.sum())
    return 1.0 if denom == 0 else 2 * int((p & g).sum()) / denom


def unified_score(rgb_l1_value: float, soft_iou: float) -> float:
    """(RGB L1 + (1 - soft IoU)) / 2; lower is better."""
    for name, v in (("rgb_l1", rgb_l1_value), ("alpha_soft_iou", soft_iou)):
        if not 0.0 <= v <= 1.0:
            raise ContractError(f"{name} must lie in [0, 1], got {v}")
    return (rgb_l1_value + (1.0 - soft_iou)) / 2.0


# Fréchet distance


def pixel64(rgb: np.ndarray) -> np.ndarray:
    """8x8 average-pooled luminance of an RGB image, flattened to 64 values."""
    h, w = rgb.shape[:2]
    if h % 8 or w % 8:
        raise ContractError(f"pixel64 needs dims divisible by 8, got {h}x{w}")
    gray = rgb[..., :3] @ np.array([0.299, 0.587, 0.114])
    return gray.reshape(8, h // 8, 8, w // 8).mean(axis=(1, 3)).ravel()


def _sym_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _ill_conditioned(cov: np.ndarray) -> bool:
    w = np.linalg.eigvalsh(cov)
    return w.min() <= 1e-12 * max(1.0, w.max())


def frechet_stats(mu_a, cov_a, mu_b, cov_b, eps: float = FRECHET_EPS) -> tuple:
    """Distance between two Gaussians; returns ``(value, regularization_used)``."""
    cov_a = np.atleast_2d(cov_a).astype(np.float64)
    cov_b = np.atleast_2d(cov_b).astype(np.float64)
    reg = 0.0
    if _ill_conditioned(cov_a) or _ill_conditioned(cov_b):
        warnings.warn(f"singular or ill-conditioned covariance; adding {eps} * I", IllConditionedCovariance,
                      stacklevel=3)
        reg = eps
        eye = np.eye(cov_a.shape[0])
        cov_a = cov_a + reg * eye
        cov_b = cov_b + reg * eye
    root_a = _sym_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    inner = (inner + inner.T) / 2
    tr_sqrt = float(np.sqrt(np.clip(np.linalg.eigvalsh(inner), 0.0, None)).sum())
    diff = np.atleast_1d(mu_a) - np.atleast_1d(mu_b)
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return value, reg


def frechet_distance(set_a: np.ndarray, set_b: np.ndarray, eps: float = FRECHET_EPS,
                     return_regularization: bool = False):
    """Fréchet distance between two embedding sets of shape (n, dim)."""
    a = np.asarray(set_a, dtype=np.float64)
    b = np.asarray(set_b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if len(a) < 2 or len(b) < 2:
        raise ContractError("frechet_distance needs at least 2 samples per set")
    if a.shape[1] != b.shape[1]:
        raise ContractError(f"embedding dims differ: {a.shape[1]} vs {b.shape[1]}")
    value, reg = frechet_stats(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False), eps)
    return (value, reg) if return_regularization else value


# alignment


@dataclass
class Alignment:
    path: list            # monotone (pred_index, gt_index) pairs
    total_cost: float
    cost: np.ndarray


def dtw_align(pred_layers: list, gt_layers: list, cost=None) -> Alignment:
    """Minimum-cost monotone alignment with (1,0), (0,1), (1,1) steps.

    ``cost(p, g)`` defaults to the Unified Score of the pair of RGBA layers.
    """
    if not pred_layers or not gt_layers:
        raise ContractError("dtw_align needs two nonempty layer lists")
    cost = cost or layer_pair_cost
    n, m = len(pred_layers), len(gt_layers)
    c = np.array([[cost(p, g) for g in gt_layers] for p in pred_layers], dtype=np.float64)
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = c[i - 1, j - 1] + min(acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
    i, j = n, m
    path = [(i - 1, j - 1)]
    while (i, j) != (1, 1):
        # prefer the diagonal on ties
        moves = [(acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1)]
        _, i, j = min(moves, key=lambda mv: mv[0])
        path.append((i - 1, j - 1))
    return Alignment(path[::-1], float(acc[n, m]), c)


def layer_pair_cost(pred_rgba: np.ndarray, gt_rgba: np.ndarray) -> float:
    return unified_score(rgb_l1(pred_rgba, gt_rgba), alpha_soft_iou(pred_rgba[..., 3], gt_rgba[..., 3]))


# reports


@dataclass
class LayerMetrics:
    psnr: float
    ssim: float
    rgb_l1: float
    alpha_soft_iou: float
    mask_iou: float
    f1: float


@dataclass
class MetricReport:
    per_layer: list
    reconstruction: dict
    unified_score: float
    mean: dict
    alignment: list | None = None
    frechet: dict | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_layer"] = [asdict(m) if isinstance(m, LayerMetrics) else m for m in self.per_layer]
        return d


def layer_metrics(pred_rgba: np.ndarray, gt_rgba: np.ndarray, threshold: float = MASK_THRESHOLD) -> LayerMetrics:
    p_rgb, g_rgb = rgba_to_rgb(pred_rgba), rgba_to_rgb(gt_rgba)
    pa, ga = pred_rgba[..., 3], gt_rgba[..., 3]
    return LayerMetrics(psnr(p_rgb, g_rgb), ssim(p_rgb, g_rgb), rgb_l1(pred_rgba, gt_rgba),
                        alpha_soft_iou(pa, ga), mask_iou(pa, ga, threshold), f1(pa, ga, threshold))


def evaluate_stack(pred: LayerStack, gt: LayerStack, dtw: bool = False,
                   threshold: float = MASK_THRESHOLD) -> MetricReport:
    """Score a predicted stack against ground truth.

    Layers are matched by position (background first); with ``dtw`` an
    order-aware alignment is computed first and every aligned pair is scored.
    """
    p_layers = [l.rgba for l in pred.layers]
    g_layers = [l.rgba for l in gt.layers]
    if dtw:
        alignment = dtw_align(p_layers, g_layers)
        pairs = alignment.path
    else:
        if len(p_layers) != len(g_layers):
            raise CorrespondenceError(
                f"predicted stack has {len(p_layers)} layers, ground truth has {len(g_layers)}; enable DTW alignment")
        alignment = None
        pairs = [(k, k) for k in range(len(p_layers))]
    per_layer = [layer_metrics(p_layers[i], g_layers[j], threshold) for i, j in pairs]
    mean = {k: float(np.mean([getattr(m, k) for m in per_layer])) for k in LayerMetrics.__dataclass_fields__}
    recon = over_composite(pred)
    reconstruction = {"psnr": psnr(recon, gt.composite), "ssim": ssim(recon, gt.composite)}
    return MetricReport(
        per_layer=per_layer,
        reconstruction=reconstruction,
        unified_score=unified_score(mean["rgb_l1"], mean["alpha_soft_iou"]),
        mean=mean,
        alignment=None if alignment is None else [list(p) for p in pairs],
        config={"dtw": dtw, "threshold": threshold, "gray": 0.5, "psnr_cap": PSNR_CAP},
    )


def corpus_frechet(pred_stacks: list, gt_stacks: list, embed=pixel64, name: str = "pixel64") -> dict:
    """Corpus-level Fréchet distance over the gray-flattened layers of every stack."""
    pa = np.array([embed(rgba_to_rgb(l.rgba)) for s in pred_stacks for l in s.layers])
    ga = np.array([embed(rgba_to_rgb(l.rgba)) for s in gt_stacks for l in s.layers])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IllConditionedCovariance)
        value, reg = frechet_distance(pa, ga, return_regularization=True)
    return {"value": value, "embedding_name": name, "regularization": reg, "n_pred": len(pa), "n_gt": len(ga)}
