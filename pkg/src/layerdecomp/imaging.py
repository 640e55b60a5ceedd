"""RGBA layers, bounding boxes, layer stacks and compositing.

Images are float64 numpy arrays in [0, 1] with shape (H, W, C): C=4 for
straight-alpha RGBA layers, C=3 for composites.  Foreground layers are
stored full-frame; pixels outside their bbox are fully transparent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

GRAY = 0.5


@dataclass(frozen=True)
class BBox:
    x_l: int
    y_l: int
    x_r: int
    y_r: int

    def validate(self, height: int, width: int) -> "BBox":
        if not (0 <= self.x_l < self.x_r <= width and 0 <= self.y_l < self.y_r <= height):
            raise ValidationError(f"bbox {self.as_list()} invalid for frame {height}x{width}")
        return self

    def as_list(self) -> list:
        return [self.x_l, self.y_l, self.x_r, self.y_r]

    @property
    def width(self) -> int:
        return self.x_r - self.x_l

    @property
    def height(self) -> int:
        return self.y_r - self.y_l

    def contains(self, other: "BBox") -> bool:
        return (self.x_l <= other.x_l and self.y_l <= other.y_l
                and self.x_r >= other.x_r and self.y_r >= other.y_r)

    @classmethod
    def full(cls, height: int, width: int) -> "BBox":
        return cls(0, 0, width, height)

    @classmethod
    def from_list(cls, values) -> "BBox":
        if len(values) != 4:
            raise ValidationError(f"bbox needs 4 integers, got {values!r}")
        try:
            return cls(*(int(v) for v in values))
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"bbox needs 4 integers, got {values!r}") from exc


@dataclass
class Layer:
    rgba: np.ndarray
    bbox: BBox
    prompt: list = field(default_factory=list)


@dataclass
class LayerStack:
    """Composite image plus background and bottom-to-top foreground layers."""

    composite: np.ndarray
    background: Layer
    foregrounds: list
    global_prompt: list = field(default_factory=list)

    @property
    def frame(self) -> tuple:
        return self.composite.shape[:2]

    @property
    def layers(self) -> list:
        return [self.background, *self.foregrounds]

    @property
    def boxes(self) -> list:
        return [layer.bbox for layer in self.layers]

    def validate(self, check_alpha_extent: bool = True) -> "LayerStack":
        h, w = self.frame
        if self.composite.shape != (h, w, 3):
            raise ValidationError(f"composite must be HxWx3, got {self.composite.shape}")
        if self.background.bbox != BBox.full(h, w):
            raise ValidationError(f"background bbox must be (0,0,{w},{h}), got {self.background.bbox.as_list()}")
        for k, layer in enumerate(self.layers):
            check_rgba(layer.rgba, (h, w))
            layer.bbox.validate(h, w)
            if check_alpha_extent and k > 0:
                outside = layer.rgba[..., 3].copy()
                b = layer.bbox
                outside[b.y_l:b.y_r, b.x_l:b.x_r] = 0
                if np.any(outside > 0):
                    raise ValidationError(f"layer {k} has nonzero alpha outside bbox {b.as_list()}")
        return self


def check_rgba(img: np.ndarray, frame: tuple | None = None) -> np.ndarray:
    if img.ndim != 3 or img.shape[2] != 4:
        raise ValidationError(f"RGBA image must be HxWx4, got {img.shape}")
    if frame is not None and img.shape[:2] != tuple(frame):
        raise ValidationError(f"layer frame {img.shape[:2]} differs from {tuple(frame)}")
    if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
        raise ValidationError("RGBA channels must lie in [0, 1]")
    return img


def rgba_to_rgb(img: np.ndarray, gray: float = GRAY) -> np.ndarray:
    """Composite a straight-alpha RGBA image over a flat neutral gray."""
    alpha = img[..., 3:4]
    return img[..., :3] * alpha + gray * (1.0 - alpha)


def over(dst_rgb: np.ndarray, layer_rgba: np.ndarray) -> np.ndarray:
    alpha = layer_rgba[..., 3:4]
    return layer_rgba[..., :3] * alpha + dst_rgb * (1.0 - alpha)


def over_composite(stack: LayerStack) -> np.ndarray:
    """Flatten background then foregrounds (bottom to top) onto opaque black."""
    h, w = stack.frame
    for layer in stack.layers:
        check_rgba(layer.rgba, (h, w))
        layer.bbox.validate(h, w)
    out = over(np.zeros((h, w, 3)), stack.background.rgba)
    for layer in stack.foregrounds:
        out = over(out, layer.rgba)
    return np.clip(out, 0.0, 1.0)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid, returning floats."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def tight_bbox(alpha: np.ndarray) -> BBox | None:
    """Smallest box holding every pixel with alpha > 0 (None if empty)."""
    ys, xs = np.nonzero(alpha > 0)
    if len(ys) == 0:
        return None
    return BBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def place(crop: np.ndarray, bbox: BBox, frame: tuple) -> np.ndarray:
    """Paste an RGBA crop into a transparent full-frame canvas at ``bbox``."""
    canvas = np.zeros((*frame, 4))
    canvas[bbox.y_l:bbox.y_r, bbox.x_l:bbox.x_r] = crop
    return canvas
