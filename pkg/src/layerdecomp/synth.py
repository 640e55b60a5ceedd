"""Deterministic synthetic layered images (stand-in for a real layered dataset)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .imaging import BBox, Layer, LayerStack, quantize, tight_bbox
from .vocab import COLORS

ALPHA_LEVELS = (0.6, 0.7, 0.8, 0.9, 1.0)
_SUPERSAMPLE = 4


@dataclass(frozen=True)
class SynthConfig:
    frame_size: int = 64
    n_layers: int = 3
    shape_palette: tuple = ("circle", "rectangle", "triangle", "ring")
    alpha_modes: tuple = ("opaque", "uniform")
    min_extent: float = 0.25
    max_extent: float = 0.55


def _subpixel_grid(size: int) -> tuple:
    s = _SUPERSAMPLE
    coords = (np.arange(size * s) + 0.5) / s
    return np.meshgrid(coords, coords)  # x, y


def _coverage(inside: np.ndarray, size: int) -> np.ndarray:
    s = _SUPERSAMPLE
    return inside.reshape(size, s, size, s).mean(axis=(1, 3))


def _shape_mask(kind: str, rng: np.random.Generator, size: int, cfg: SynthConfig) -> np.ndarray:
    extent = rng.uniform(cfg.min_extent, cfg.max_extent) * size
    cx = rng.uniform(extent / 2 + 1, size - extent / 2 - 1)
    cy = rng.uniform(extent / 2 + 1, size - extent / 2 - 1)
    x, y = _subpixel_grid(size)
    if kind == "circle":
        inside = (x - cx) ** 2 + (y - cy) ** 2 <= (extent / 2) ** 2
    elif kind == "ring":
        r2 = (x - cx) ** 2 + (y - cy) ** 2
        outer = extent / 2
        inside = (r2 <= outer**2) & (r2 >= (outer * rng.uniform(0.45, 0.65)) ** 2)
    elif kind == "rectangle":
        aspect = rng.uniform(0.6, 1.0)
        hw, hh = (extent / 2, extent / 2 * aspect) if rng.random() < 0.5 else (extent / 2 * aspect, extent / 2)
        inside = (np.abs(x - cx) <= hw) & (np.abs(y - cy) <= hh)
    elif kind == "triangle":
        angles = rng.uniform(0, 2 * np.pi) + np.array([0.0, 2.0944, 4.1888]) + rng.uniform(-0.3, 0.3, 3)
        vx = cx + extent / 2 * np.cos(angles)
        vy = cy + extent / 2 * np.sin(angles)
        signs = []
        for i in range(3):
            j = (i + 1) % 3
            signs.append((vx[j] - vx[i]) * (y - vy[i]) - (vy[j] - vy[i]) * (x - vx[i]))
        inside = ((signs[0] >= 0) & (signs[1] >= 0) & (signs[2] >= 0)) | (
            (signs[0] <= 0) & (signs[1] <= 0) & (signs[2] <= 0))
    else:
        raise ConfigError(f"unknown shape {kind!r}")
    return _coverage(inside, size)


def _background(rng: np.random.Generator, size: int, names: list) -> tuple:
    if rng.random() < 0.5:
        c = names[rng.integers(len(names))]
        rgb = np.broadcast_to(np.array(COLORS[c]), (size, size, 3)).copy()
        return rgb, [c, "background"]
    i, j = rng.choice(len(names), size=2, replace=False)
    c0, c1 = names[i], names[j]
    angle = rng.uniform(0, 2 * np.pi)
    coords = (np.arange(size) + 0.5) / size - 0.5
    x, y = np.meshgrid(coords, coords)
    proj = x * np.cos(angle) + y * np.sin(angle)
    ramp = ((proj - proj.min()) / (proj.max() - proj.min()))[..., None]
    rgb = np.array(COLORS[c0]) * (1 - ramp) + np.array(COLORS[c1]) * ramp
    return rgb, [c0, c1, "gradient"]


def synth_stack(seed, config: SynthConfig = SynthConfig()) -> LayerStack:
    """Generate one layered image deterministically from ``seed`` (int or int sequence)."""
    if not config.shape_palette:
        raise ConfigError("shape_palette is empty")
    if not config.alpha_modes:
        raise ConfigError("alpha_modes is empty")
    if config.n_layers < 1:
        raise ConfigError(f"n_layers must be >= 1, got {config.n_layers}")
    if config.frame_size < 32:
        raise ConfigError(f"frame_size must be >= 32, got {config.frame_size}")
    size = config.frame_size
    rng = np.random.default_rng(seed)
    names = list(COLORS)

    bg_rgb, bg_prompt = _background(rng, size, names)
    bg_rgba = quantize(np.concatenate([bg_rgb, np.ones((size, size, 1))], axis=-1))
    background = Layer(bg_rgba, BBox.full(size, size), bg_prompt)
    painted = bg_rgba[..., :3].copy()

    bg_mean = bg_rgb.reshape(-1, 3).mean(axis=0)
    foregrounds = []
    for _ in range(config.n_layers - 1):
        kind = config.shape_palette[rng.integers(len(config.shape_palette))]
        # pick a color that stands out from the background
        order = rng.permutation(len(names))
        color = next((names[k] for k in order
                      if names[k] not in bg_prompt and np.abs(np.array(COLORS[names[k]]) - bg_mean).sum() > 0.45),
                     names[order[0]])
        mode = config.alpha_modes[rng.integers(len(config.alpha_modes))]
        level = 1.0 if mode == "opaque" else ALPHA_LEVELS[rng.integers(len(ALPHA_LEVELS))]
        alpha = quantize(_shape_mask(kind, rng, size, config) * level)
        rgb = np.where(alpha[..., None] > 0, np.array(COLORS[color]), 0.0)
        rgba = quantize(np.concatenate([rgb, alpha[..., None]], axis=-1))
        box = tight_bbox(rgba[..., 3])
        if box is None:  # pragma: no cover - extents keep shapes well inside the frame
            continue
        foregrounds.append(Layer(rgba, box, [color, kind]))
        a = rgba[..., 3:4]
        painted = painted + a * (rgba[..., :3] - painted)

    global_prompt = [w for layer in [background, *foregrounds] for w in layer.prompt]
    return LayerStack(np.clip(painted, 0.0, 1.0), background, foregrounds, global_prompt)
