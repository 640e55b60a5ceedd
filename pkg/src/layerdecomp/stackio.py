"""PNG + JSON manifest storage for layer stacks."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import StackLoadError, ValidationError
from .imaging import BBox, Layer, LayerStack, to_uint8

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"


def write_png(path, img: np.ndarray) -> None:
    mode = {3: "RGB", 4: "RGBA"}[img.shape[2]]
    # fixed encoder settings keep the bytes reproducible
    Image.fromarray(to_uint8(img), mode=mode).save(path, format="PNG", optimize=False, compress_level=6)


def read_png(path, channels: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert({3: "RGB", 4: "RGBA"}[channels])
            return np.asarray(im, dtype=np.float64) / 255.0
    except FileNotFoundError as exc:
        raise StackLoadError(f"missing image file {path}") from exc
    except OSError as exc:
        raise StackLoadError(f"unreadable image file {path}: {exc}") from exc


def save_stack(stack: LayerStack, directory) -> Path:
    """Write PNGs and a manifest into ``directory``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_png(directory / "composite.png", stack.composite)
    write_png(directory / "background.png", stack.background.rgba)
    layers = []
    for k, layer in enumerate(stack.foregrounds):
        name = f"layer_{k}.png"
        write_png(directory / name, layer.rgba)
        layers.append({"path": name, "bbox": layer.bbox.as_list(), "prompt": list(layer.prompt)})
    manifest = {
        "format_version": MANIFEST_VERSION,
        "frame": list(stack.frame),
        "composite": "composite.png",
        "background": "background.png",
        "background_prompt": list(stack.background.prompt),
        "layers": layers,
        "global_prompt": list(stack.global_prompt),
    }
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_stack(manifest_path) -> LayerStack:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError as exc:
        raise StackLoadError(f"missing manifest {manifest_path}") from exc
    except json.JSONDecodeError as exc:
        raise StackLoadError(f"malformed manifest {manifest_path}: {exc}") from exc
    try:
        root = manifest_path.parent
        h, w = (int(v) for v in manifest["frame"])
        composite = read_png(root / manifest["composite"], 3)
        bg = read_png(root / manifest["background"], 4)
        background = Layer(bg, BBox.full(h, w), list(manifest.get("background_prompt", [])))
        foregrounds = []
        for k, entry in enumerate(manifest["layers"]):
            box = BBox.from_list(entry["bbox"])
            try:
                box.validate(h, w)
            except ValidationError as exc:
                raise ValidationError(f"{manifest_path}: layer {k}: {exc}") from None
            foregrounds.append(Layer(read_png(root / entry["path"], 4), box, list(entry.get("prompt", []))))
        stack = LayerStack(composite, background, foregrounds, list(manifest.get("global_prompt", [])))
    except (KeyError, TypeError) as exc:
        raise StackLoadError(f"malformed manifest {manifest_path}: missing or bad field {exc}") from exc
    if composite.shape[:2] != (h, w):
        raise ValidationError(f"{manifest_path}: composite is {composite.shape[:2]}, manifest frame is {(h, w)}")
    return stack.validate()
