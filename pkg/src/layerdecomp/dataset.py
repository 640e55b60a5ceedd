"""Dataset directories: one sub-directory per stack plus an index.json."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import StackLoadError
from .stackio import MANIFEST_NAME, load_stack, save_stack
from .synth import SynthConfig, synth_stack

INDEX_NAME = "index.json"


def stack_seed(seed: int, index: int) -> list:
    return [seed, index]


def generate_dataset(out, count: int, seed: int, frame: int = 64, max_layers: int = 3) -> Path:
    """Write ``count`` synthetic stacks with 1..max_layers layers each."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        n_layers = int(np.random.default_rng([seed, i, 1]).integers(1, max_layers + 1))
        stack = synth_stack(stack_seed(seed, i), SynthConfig(frame_size=frame, n_layers=n_layers))
        name = f"stack_{i:05d}"
        save_stack(stack, out / name)
        entries.append(f"{name}/{MANIFEST_NAME}")
    index = {"format_version": 1, "count": count, "seed": seed, "frame": frame, "max_layers": max_layers,
             "stacks": entries}
    path = out / INDEX_NAME
    path.write_text(json.dumps(index, indent=2) + "\n")
    return path


def list_manifests(root) -> list:
    """Relative manifest paths of a dataset (index.json order, else sorted scan)."""
    root = Path(root)
    index = root / INDEX_NAME
    if index.exists():
        try:
            return list(json.loads(index.read_text())["stacks"])
        except (json.JSONDecodeError, KeyError) as exc:
            raise StackLoadError(f"malformed dataset index {index}") from exc
    if (root / MANIFEST_NAME).exists():
        return [MANIFEST_NAME]
    found = sorted(p.relative_to(root).as_posix() for p in root.glob(f"*/{MANIFEST_NAME}"))
    if not found:
        raise StackLoadError(f"no stacks found under {root}")
    return found


def load_dataset(root) -> list:
    root = Path(root)
    return [load_stack(root / rel) for rel in list_manifests(root)]


def write_index(root, entries: list, **extra) -> Path:
    path = Path(root) / INDEX_NAME
    path.write_text(json.dumps({"format_version": 1, "count": len(entries), **extra, "stacks": entries},
                               indent=2) + "\n")
    return path
