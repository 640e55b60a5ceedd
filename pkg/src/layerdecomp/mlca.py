"""Multi-layer conditional adapter.

The condition image is patchified (the stand-in encoder), projected to the
model width, cropped by every segment box and flattened so the guidance
sequence lines up token-for-token with the layer sequence.  Fusion is a
plain sum with the hidden states.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import AlignmentError, ConfigError
from .model import ModelParams
from .tensor import Tensor
from .tokens import TokenSequence, patchify


@dataclass
class GuidanceSequence:
    tokens: Tensor          # (L, d_model)
    source_boxes: list


def condition_patches(image: np.ndarray, patch_size: int) -> np.ndarray:
    """RGB image -> (grid_h * grid_w, 3 * p * p) raw condition patches."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ConfigError(f"condition image must be HxWx3, got {image.shape}")
    return patchify(image, patch_size)


def encode_condition(params: ModelParams, image: np.ndarray) -> Tensor:
    """Project the patchified condition image to a (grid_h, grid_w, d_model) grid."""
    cfg = params.config
    if image.shape[:2] != (cfg.frame, cfg.frame):
        raise ConfigError(f"condition image is {image.shape[:2]}, model frame is {cfg.frame}x{cfg.frame}")
    z = T.linear(Tensor(condition_patches(image, cfg.patch_size)), params["mlca.w"], params["mlca.b"])
    return T.reshape(z, (cfg.grid, cfg.grid, cfg.d_model))


def build_guidance(z_grid: Tensor, boxes: list, patch_size: int) -> GuidanceSequence:
    """Crop the grid by each snapped pixel box and concatenate the flattened crops."""
    d = z_grid.shape[-1]
    parts = []
    for box in boxes:
        if box.x_l % patch_size or box.y_l % patch_size or box.x_r % patch_size or box.y_r % patch_size:
            raise AlignmentError(f"box {box.as_list()} is not snapped to the {patch_size}px grid")
        crop = z_grid[box.y_l // patch_size:box.y_r // patch_size, box.x_l // patch_size:box.x_r // patch_size]
        parts.append(T.reshape(crop, (crop.shape[0] * crop.shape[1], d)))
    return GuidanceSequence(T.concat(parts, axis=0), list(boxes))


def guidance_for(params: ModelParams, image: np.ndarray, seq: TokenSequence) -> GuidanceSequence:
    g = build_guidance(encode_condition(params, image), [s.bbox for s in seq.segments], seq.patch_size)
    if g.tokens.shape[0] != len(seq):
        raise AlignmentError(f"guidance has {g.tokens.shape[0]} tokens, sequence has {len(seq)}")
    return g


def fuse(h: Tensor, g: GuidanceSequence) -> Tensor:
    if h.shape != g.tokens.shape:
        raise AlignmentError(f"hidden states {h.shape} and guidance {g.tokens.shape} differ")
    return h + g.tokens


def guidance_batch(params: ModelParams, cond_patches: np.ndarray, positions: np.ndarray) -> Tensor:
    """Batched guidance (B, L, d_model) gathered at each token's (h, w) grid cell.

    ``cond_patches`` is (B, grid*grid, 3*p*p); ``positions`` is (B, L, 3).
    Equivalent to ``build_guidance`` over the segment boxes.
    """
    cfg = params.config
    bsz, n, _ = positions.shape
    z = T.linear(Tensor(cond_patches), params["mlca.w"], params["mlca.b"])  # (B, G, d)
    cells = cfg.grid * cfg.grid
    idx = np.arange(bsz)[:, None] * cells + positions[..., 1] * cfg.grid + positions[..., 2]
    flat = T.reshape(z, (bsz * cells, cfg.d_model))
    return T.take_rows(flat, idx)
