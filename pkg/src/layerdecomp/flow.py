"""Flow-matching objective, dual-condition guidance and the Euler sampler.

Convention: x0 is data, x1 is unit Gaussian noise, x_t = (1 - t) x0 + t x1
and the network regresses the velocity x1 - x0.  Sampling therefore runs
from t = 1 down to t = 0.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericError, ParameterError, ShapeError
from .imaging import BBox, LayerStack
from .mlca import condition_patches, guidance_batch
from .model import ModelInput, ModelParams, forward_batch
from .tensor import Tensor
from .tokens import COMPOSITE_LAYER, TokenSequence, assemble_sequence, build_layout, scatter_to_layers
from .vocab import encode


def to_model_space(tokens: np.ndarray) -> np.ndarray:
    """Pixel tokens in [0, 1] -> data in [-1, 1]."""
    return tokens * 2.0 - 1.0


def from_model_space(x: np.ndarray) -> np.ndarray:
    return (x + 1.0) * 0.5


def interpolate(x0, x1, t: float):
    """(1 - t) x0 + t x1 for arrays or tensors of equal shape."""
    if not 0.0 <= float(t) <= 1.0:
        raise ParameterError(f"t must lie in [0, 1], got {t}")
    if np.shape(x0) != np.shape(x1):
        raise ShapeError(f"interpolate shapes differ: {np.shape(x0)} vs {np.shape(x1)}")
    if isinstance(x0, Tensor) or isinstance(x1, Tensor):
        return T.as_tensor(x0) * (1.0 - t) + T.as_tensor(x1) * t
    if t == 0.0:
        return np.array(x0, copy=True)
    if t == 1.0:
        return np.array(x1, copy=True)
    return (1.0 - t) * np.asarray(x0) + t * np.asarray(x1)


@dataclass
class SampleConfig:
    n_steps: int = 20
    cfg_scale: float = 2.0
    seed: int = 0
    uncond_image: bool = True  # keep MLCA in the text-free branch

    def __post_init__(self):
        if self.n_steps < 1:
            raise ParameterError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.cfg_scale < 0:
            raise ParameterError(f"cfg_scale must be >= 0, got {self.cfg_scale}")


@dataclass
class Example:
    """One training stack, preprocessed."""

    seq: TokenSequence
    cond: np.ndarray          # (grid*grid, 3*p*p) condition patches
    text: list                # prompt token ids


def make_example(stack: LayerStack, patch_size: int, max_layers: int | None = None) -> Example:
    seq = assemble_sequence(stack, patch_size, max_layers)
    return Example(seq, condition_patches(stack.composite, patch_size), encode(stack.global_prompt))


@dataclass
class Batch:
    x0: np.ndarray            # (B, L, P) data in model space
    positions: np.ndarray     # (B, L, 3)
    valid: np.ndarray         # (B, L)
    layer_ids: np.ndarray     # (B, L), -1 on padding
    cond: np.ndarray          # (B, G, 3*p*p)
    text: list

    @property
    def size(self) -> int:
        return self.x0.shape[0]


def collate(examples: list) -> Batch:
    if not examples:
        raise ContractError("empty batch")
    n = max(len(e.seq) for e in examples)
    P = examples[0].seq.tokens.shape[1]
    B = len(examples)
    x0 = np.zeros((B, n, P))
    positions = np.zeros((B, n, 3), dtype=np.int64)
    valid = np.zeros((B, n), dtype=bool)
    layer_ids = np.full((B, n), -1, dtype=np.int64)
    for b, e in enumerate(examples):
        k = len(e.seq)
        x0[b, :k] = to_model_space(e.seq.tokens)
        positions[b, :k] = e.seq.positions
        valid[b, :k] = True
        layer_ids[b, :k] = e.seq.positions[:, 0]
    cond = np.stack([e.cond for e in examples])
    return Batch(x0, positions, valid, layer_ids, cond, [list(e.text) for e in examples])


@dataclass
class Draw:
    """The random quantities of one loss evaluation."""

    t: np.ndarray        # (B,)
    noise: np.ndarray    # (B, L, P)
    drop_text: np.ndarray  # (B,) bool


def draw(rng: np.random.Generator, batch: Batch, text_drop: float = 0.1) -> Draw:
    B = batch.size
    t = rng.uniform(0.0, 1.0, B)
    noise = rng.standard_normal(batch.x0.shape)
    drop = rng.uniform(0.0, 1.0, B) < text_drop
    return Draw(t, noise, drop)


def loss_weights(batch: Batch, layers: float = 1.0, composite: float = 1.0) -> np.ndarray:
    if layers < 0 or composite < 0:
        raise ParameterError("loss weights must be >= 0")
    w = np.where(batch.layer_ids == COMPOSITE_LAYER, composite, layers)
    return np.where(batch.valid, w, 0.0)


def weighted_mse(pred: Tensor, target: np.ndarray, weights: np.ndarray) -> Tensor:
    """sum_i w_i |pred_i - target_i|^2 / (token_dim * sum_i w_i) over tokens i."""
    total = float(weights.sum())
    if total <= 0:
        raise ContractError("loss weights are all zero")
    diff = pred - target
    sq = T.sum_(diff * diff, axis=-1)
    return T.sum_(sq * weights) * (1.0 / (total * pred.shape[-1]))


def fm_loss(params: ModelParams, batch: Batch, d: Draw, weights: dict | None = None,
            use_mlca: bool = True) -> Tensor:
    """Flow-matching loss of one batch under fixed random draws."""
    weights = weights or {}
    t = np.asarray(d.t, dtype=np.float64)
    xt = (1.0 - t)[:, None, None] * batch.x0 + t[:, None, None] * d.noise
    target = d.noise - batch.x0
    text = [[] if drop else ids for ids, drop in zip(batch.text, d.drop_text)]
    inp = ModelInput(xt, batch.positions, batch.valid, t, text)
    g = guidance_batch(params, batch.cond, batch.positions) if use_mlca else None
    pred = forward_batch(params, inp, g)
    w = loss_weights(batch, weights.get("layers", 1.0), weights.get("composite", 1.0))
    return weighted_mse(pred, target.astype(pred.data.dtype), w)


def cfg_velocity(params: ModelParams, inp: ModelInput, guidance: Tensor | None, s: float,
                 uncond_image: bool = True, counter: Counter | None = None) -> np.ndarray:
    """v_uncond + s (v_cond - v_uncond), where the unconditional branch drops only text.

    For s == 1 only the conditional branch is evaluated, for s == 0 only the
    unconditional one.  ``counter`` (if given) counts branch evaluations.
    """
    if s < 0:
        raise ParameterError(f"guidance scale must be >= 0, got {s}")
    need_cond = s != 0.0
    need_uncond = s != 1.0
    B = inp.batch
    xs, pos, valid, ts, texts, gs = [], [], [], [], [], []
    if need_cond:
        xs.append(inp.x), pos.append(inp.positions), valid.append(inp.valid), ts.append(inp.t)
        texts += list(inp.text)
        gs.append(guidance)
    if need_uncond:
        xs.append(inp.x), pos.append(inp.positions), valid.append(inp.valid), ts.append(inp.t)
        texts += [[] for _ in range(B)]
        gs.append(guidance if uncond_image else None)
    if counter is not None:
        counter["cond"] += int(need_cond)
        counter["uncond"] += int(need_uncond)
    if guidance is not None and any(g is None for g in gs):
        # a zero guidance is identical to skipping the adapter
        gs = [g if g is not None else Tensor(np.zeros(guidance.shape)) for g in gs]
    joint = ModelInput(np.concatenate(xs), np.concatenate(pos), np.concatenate(valid), np.concatenate(ts), texts)
    g = None if guidance is None else T.concat(gs, axis=0)
    with T.no_grad():
        v = forward_batch(params, joint, g).data
    if not (need_cond and need_uncond):
        return v
    v_cond, v_uncond = v[:B], v[B:]
    return v_uncond + s * (v_cond - v_uncond)


@dataclass
class DecomposeRequest:
    image: np.ndarray             # (H, W, 3) in [0, 1]
    boxes: list                   # foreground BBoxes, bottom-to-top
    prompt: list = field(default_factory=list)


@dataclass
class SampleResult:
    stack: LayerStack
    tokens: np.ndarray            # final tokens in pixel space (unclamped)
    sequence: TokenSequence


def sample_many(params: ModelParams, requests: list, cfg: SampleConfig = SampleConfig(),
                use_mlca: bool = True, counter: Counter | None = None) -> list:
    """Euler-integrate dx/dt = v from t=1 to t=0 for every request jointly."""
    mcfg = params.config
    frame = (mcfg.frame, mcfg.frame)
    dtype = params["patch_in.w"].data.dtype.type
    layouts, noises, conds, texts = [], [], [], []
    for k, req in enumerate(requests):
        if req.image.shape != (*frame, 3):
            raise ShapeError(f"request {k}: image is {req.image.shape}, model expects {(*frame, 3)}")
        segments, positions = build_layout(frame, list(req.boxes), mcfg.patch_size, mcfg.max_layers)
        layouts.append((segments, positions))
        rng = np.random.default_rng([cfg.seed, k])
        noises.append(rng.standard_normal((len(positions), mcfg.token_dim)))
        conds.append(condition_patches(req.image, mcfg.patch_size))
        texts.append(encode(req.prompt))
    n = max(len(p) for _, p in layouts)
    B = len(requests)
    x = np.zeros((B, n, mcfg.token_dim))
    positions = np.zeros((B, n, 3), dtype=np.int64)
    valid = np.zeros((B, n), dtype=bool)
    for b, ((_, pos), noise) in enumerate(zip(layouts, noises)):
        x[b, :len(pos)] = noise
        positions[b, :len(pos)] = pos
        valid[b, :len(pos)] = True

    with T.default_dtype(dtype), T.no_grad():
        guidance = guidance_batch(params, np.stack(conds), positions) if use_mlca else None
        dt = 1.0 / cfg.n_steps
        for step in range(cfg.n_steps):
            t = 1.0 - step * dt
            inp = ModelInput(x, positions, valid, np.full(B, t), texts)
            v = cfg_velocity(params, inp, guidance, cfg.cfg_scale, cfg.uncond_image, counter)
            if not np.all(np.isfinite(v)):
                raise NumericError(f"non-finite velocity at sampler step {step}")
            x = x - dt * v.astype(np.float64)

    results = []
    for b, ((segments, pos), req) in enumerate(zip(layouts, requests)):
        tokens = from_model_space(x[b, :len(pos)])
        seq = TokenSequence(tokens, pos, segments, mcfg.patch_size)
        stack = scatter_to_layers(seq, frame)
        stack.global_prompt = list(req.prompt)
        results.append(SampleResult(stack, tokens, seq))
    return results


def sample(params: ModelParams, request: DecomposeRequest, cfg: SampleConfig = SampleConfig(),
           use_mlca: bool = True) -> LayerStack:
    return sample_many(params, [request], cfg, use_mlca)[0].stack


def request_from_stack(stack: LayerStack) -> DecomposeRequest:
    return DecomposeRequest(stack.composite, [l.bbox for l in stack.foregrounds], list(stack.global_prompt))

