"""Pixel-space patch tokens and the multi-layer token sequence.

Segment order is fixed: composite (layer index 0, full frame), background
(index 1, full frame), then foregrounds bottom-to-top (index i + 2, cropped
to their snapped boxes).  Token (h, w) positions are absolute patch-grid
coordinates, so crops keep their place in the frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ConfigError, ContractError
from .imaging import BBox, Layer, LayerStack

CHANNELS = 4
COMPOSITE_LAYER = 0
BACKGROUND_LAYER = 1


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    grid_h: int
    grid_w: int
    channels: int = CHANNELS

    @property
    def token_dim(self) -> int:
        return self.channels * self.patch_size**2

    @classmethod
    def for_frame(cls, frame: tuple, patch_size: int, channels: int = CHANNELS) -> "PatchGrid":
        h, w = frame
        if h % patch_size or w % patch_size:
            raise ConfigError(f"frame {h}x{w} is not divisible by patch size {patch_size}")
        return cls(patch_size, h // patch_size, w // patch_size, channels)


@dataclass(frozen=True)
class Segment:
    layer_id: int
    start: int
    length: int
    bbox: BBox  # snapped, in pixels


@dataclass
class TokenSequence:
    tokens: np.ndarray        # (L, token_dim)
    positions: np.ndarray     # (L, 3) integer (l, h, w)
    segments: list
    patch_size: int

    def __len__(self) -> int:
        return len(self.tokens)

    def with_tokens(self, tokens: np.ndarray) -> "TokenSequence":
        return TokenSequence(np.asarray(tokens), self.positions, self.segments, self.patch_size)


def snap_bbox(box: BBox, patch_size: int) -> BBox:
    """Grow ``box`` outward to patch boundaries."""
    p = patch_size
    return BBox(box.x_l // p * p, box.y_l // p * p, -(-box.x_r // p) * p, -(-box.y_r // p) * p)


def patchify(img: np.ndarray, patch_size: int) -> np.ndarray:
    """(H, W, C) -> (H/p * W/p, p*p*C), patches row-major, pixels (py, px, c) inside."""
    h, w, c = img.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} is not divisible by patch size {p}")
    return img.reshape(h // p, p, w // p, p, c).transpose(0, 2, 1, 3, 4).reshape((h // p) * (w // p), p * p * c)


def unpatchify(tokens: np.ndarray, grid_h: int, grid_w: int, patch_size: int) -> np.ndarray:
    p = patch_size
    c = tokens.shape[-1] // (p * p)
    if tokens.shape != (grid_h * grid_w, p * p * c):
        raise ContractError(f"cannot unpatchify {tokens.shape} into a {grid_h}x{grid_w} grid of {p}px patches")
    return tokens.reshape(grid_h, grid_w, p, p, c).transpose(0, 2, 1, 3, 4).reshape(grid_h * p, grid_w * p, c)


def _segment_positions(layer_id: int, box: BBox, p: int) -> np.ndarray:
    hs = np.arange(box.y_l // p, box.y_r // p)
    ws = np.arange(box.x_l // p, box.x_r // p)
    hh, ww = np.meshgrid(hs, ws, indexing="ij")
    return np.stack([np.full(hh.size, layer_id), hh.ravel(), ww.ravel()], axis=1)


def build_layout(frame: tuple, boxes: list, patch_size: int, max_layers: int | None = None) -> tuple:
    """Segments and positions for a composite + background + ``boxes`` request.

    ``boxes`` are the user (foreground) boxes only; they are validated and
    snapped here.
    """
    h, w = frame
    PatchGrid.for_frame(frame, patch_size)
    n_layers = len(boxes) + 1
    if max_layers is not None and n_layers > max_layers:
        raise CapacityError(f"{n_layers} layers exceed the configured maximum of {max_layers}")
    full = BBox.full(h, w)
    snapped = [full, full] + [snap_bbox(b.validate(h, w), patch_size) for b in boxes]
    segments, positions, start = [], [], 0
    for layer_id, box in enumerate(snapped):
        pos = _segment_positions(layer_id, box, patch_size)
        segments.append(Segment(layer_id, start, len(pos), box))
        positions.append(pos)
        start += len(pos)
    return segments, np.concatenate(positions).astype(np.int64)


def _crop_tokens(img: np.ndarray, box: BBox, p: int) -> np.ndarray:
    return patchify(img[box.y_l:box.y_r, box.x_l:box.x_r], p)


def assemble_sequence(stack: LayerStack, patch_size: int, max_layers: int | None = None) -> TokenSequence:
    """Patchify composite, background and cropped foregrounds into one sequence."""
    segments, positions = build_layout(stack.frame, [l.bbox for l in stack.foregrounds], patch_size, max_layers)
    h, w = stack.frame
    comp_rgba = np.concatenate([stack.composite, np.ones((h, w, 1))], axis=-1)
    sources = [comp_rgba, stack.background.rgba] + [l.rgba for l in stack.foregrounds]
    tokens = np.concatenate([_crop_tokens(img, seg.bbox, patch_size) for img, seg in zip(sources, segments)])
    return TokenSequence(tokens, positions, segments, patch_size)


def scatter_to_layers(seq: TokenSequence, frame: tuple, prompts: list | None = None) -> LayerStack:
    """Decode a token sequence into a stack; layers are transparent outside their box."""
    p = seq.patch_size
    h, w = frame
    segs = seq.segments
    if len(segs) < 2 or segs[0].layer_id != COMPOSITE_LAYER or segs[1].layer_id != BACKGROUND_LAYER:
        raise ContractError("sequence must start with composite and background segments")
    if sum(s.length for s in segs) != len(seq.tokens):
        raise ContractError(f"segment lengths sum to {sum(s.length for s in segs)}, sequence has {len(seq.tokens)}")
    images = []
    for seg in segs:
        box = seg.bbox
        gh, gw = box.height // p, box.width // p
        if gh * gw != seg.length or box.x_r > w or box.y_r > h:
            raise ContractError(f"segment {seg.layer_id} box {box.as_list()} inconsistent with length {seg.length}")
        crop = np.clip(unpatchify(seq.tokens[seg.start:seg.start + seg.length], gh, gw, p), 0.0, 1.0)
        canvas = np.zeros((h, w, crop.shape[-1]))
        canvas[box.y_l:box.y_r, box.x_l:box.x_r] = crop
        images.append(canvas)
    prompts = prompts or [[] for _ in segs[1:]]
    background = Layer(images[1], BBox.full(h, w), list(prompts[0]))
    foregrounds = [Layer(img, seg.bbox, list(pr)) for img, seg, pr in zip(images[2:], segs[2:], prompts[1:])]
    return LayerStack(images[0][..., :3], background, foregrounds, [w_ for pr in prompts for w_ in pr])

