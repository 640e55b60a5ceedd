"""Training loop: Adam on the flow-matching loss, resumable checkpoints, CSV log.

Every step draws its randomness from ``default_rng([seed, step])`` so a run
resumed from a checkpoint replays the same batches, timesteps and noise as
an uninterrupted run.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError
from .flow import Draw, collate, draw, fm_loss, make_example
from .model import ModelConfig, ModelParams, init_params
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "loss", "wall_ms")


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    loss_weights: dict = field(default_factory=lambda: {"layers": 1.0, "composite": 1.0})
    t_sampling: str = "uniform"
    text_drop: float = 0.1
    warmup: int = 100
    min_lr_ratio: float = 0.05
    grad_clip: float = 1.0
    dtype: str = "float32"
    use_mlca: bool = True

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.t_sampling != "uniform":
            raise ConfigError(f"only uniform t sampling is supported, got {self.t_sampling!r}")
        if min(self.loss_weights.values()) < 0:
            raise ConfigError(f"loss weights must be >= 0, got {self.loss_weights}")
        if not 0.0 <= self.text_drop <= 1.0:
            raise ConfigError(f"text_drop must lie in [0, 1], got {self.text_drop}")

    def lr_at(self, step: int) -> float:
        """Linear warmup, then cosine decay to ``min_lr_ratio * lr``."""
        if step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        span = max(1, self.steps - self.warmup)
        frac = min(1.0, (step - self.warmup) / span)
        return self.lr * (self.min_lr_ratio + (1 - self.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))


@dataclass
class TrainState:
    params: ModelParams
    adam: AdamState
    step: int = 0


def clip_grads(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values() if g is not None))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k, g in grads.items():
            if g is not None:
                grads[k] = g * scale
    return norm


def train_step(state: TrainState, examples: list, cfg: TrainConfig) -> float:
    rng = np.random.default_rng([cfg.seed, state.step])
    if cfg.batch_size >= len(examples):
        chosen = list(range(len(examples)))
    else:
        chosen = sorted(rng.choice(len(examples), cfg.batch_size, replace=False).tolist())
    batch = collate([examples[i] for i in chosen])
    d: Draw = draw(rng, batch, cfg.text_drop)
    params = state.params
    params.zero_grad()
    loss = fm_loss(params, batch, d, cfg.loss_weights, cfg.use_mlca)
    value = loss.item()
    if not math.isfinite(value):
        T.current_tape().clear()
        raise NumericError(f"non-finite loss at step {state.step}")
    T.backward(loss)
    grads = params.grads()
    clip_grads(grads, cfg.grad_clip)
    adam_step(params.tensors, grads, state.adam, cfg.lr_at(state.step))
    state.step += 1
    return value


def save_state(path, state: TrainState, train_cfg: TrainConfig, extra_meta: dict | None = None) -> Path:
    extra = {}
    for name in state.params.tensors:
        if name in state.adam.m:
            extra[f"adam.m/{name}"] = state.adam.m[name]
            extra[f"adam.v/{name}"] = state.adam.v[name]
    meta = {"train_config": asdict(train_cfg), "step": state.step, "adam_step": state.adam.step,
            **(extra_meta or {})}
    return state.params.save(path, meta, extra)


def load_state(path) -> tuple:
    params, meta, extra = ModelParams.load(path)
    adam = AdamState(step=int(meta.get("adam_step", 0)))
    for key, arr in extra.items():
        kind, name = key.split("/", 1)
        (adam.m if kind == "adam.m" else adam.v)[name] = arr
    return TrainState(params, adam, int(meta.get("step", 0))), meta


def train(stacks: list, model_cfg: ModelConfig, train_cfg: TrainConfig, out: Path | None = None,
          log_path: Path | None = None, resume: Path | None = None, steps: int | None = None,
          init_seed: int | None = None, progress_every: int = 0) -> TrainState:
    """Train (or resume) on in-memory stacks; returns the final state.

    ``steps`` is the number of additional steps to run in this call
    (default: up to ``train_cfg.steps`` total).
    """
    dtype = np.dtype(train_cfg.dtype).type
    with T.default_dtype(dtype):
        if resume is not None:
            state, _ = load_state(resume)
            model_cfg = state.params.config
        else:
            seed = train_cfg.seed if init_seed is None else init_seed
            state = TrainState(init_params(model_cfg, seed), AdamState())
        examples = [make_example(s, model_cfg.patch_size, model_cfg.max_layers) for s in stacks]
        end = train_cfg.steps if steps is None else state.step + steps
        writer = None
        fh = None
        if log_path is not None:
            log_path = Path(log_path)
            fresh = not log_path.exists() or log_path.stat().st_size == 0
            fh = open(log_path, "a", newline="")
            writer = csv.writer(fh, lineterminator="\n")
            if fresh:
                writer.writerow(LOG_HEADER)
        try:
            while state.step < end:
                t0 = time.perf_counter()
                step = state.step
                loss = train_step(state, examples, train_cfg)
                wall_ms = (time.perf_counter() - t0) * 1000.0
                if writer is not None:
                    writer.writerow((step, repr(loss), f"{wall_ms:.1f}"))
                if progress_every and (step % progress_every == 0 or state.step == end):
                    log.info("step %d loss %.5f (%.0f ms)", step, loss, wall_ms)
        finally:
            if fh is not None:
                fh.close()
        if out is not None:
            save_state(out, state, train_cfg)
    return state


def read_loss_log(path) -> list:
    """(step, loss) pairs from a training log."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["step"]), float(r["loss"])) for r in rows]
