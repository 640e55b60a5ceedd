"""Toy two-stream (text / image) diffusion transformer predicting velocities.

Both streams share one joint attention per block but keep separate QKV,
projection and MLP weights.  Timestep conditioning enters through adaLN
shift/scale/gate vectors.  The image stream receives the MLCA guidance
right after the input projection.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CapacityError, ConfigError, ParameterError, ShapeError, VocabularyError
from .rope import RopeConfig, attend, key_mask_bias, rope_angles
from .tensor import Tensor
from .tokens import CHANNELS, TokenSequence

NORM_EPS = 1e-6
TEXT_LAYER = -1


@dataclass
class ModelConfig:
    d_model: int = 128
    n_heads: int = 4
    n_blocks: int = 4
    patch_size: int = 8
    frame: int = 64
    max_layers: int = 6
    vocab: int = 32
    max_text_tokens: int = 16
    mlp_ratio: int = 4
    mlca_every_block: bool = False
    axis_split: tuple | None = None

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.frame % self.patch_size:
            raise ConfigError(f"frame {self.frame} is not divisible by patch_size {self.patch_size}")
        if self.axis_split is not None:
            self.axis_split = tuple(self.axis_split)
        self.rope  # validates the split

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def rope(self) -> RopeConfig:
        if self.axis_split is None:
            return RopeConfig.default(self.d_head)
        return RopeConfig(self.d_head, self.axis_split)

    @property
    def grid(self) -> int:
        return self.frame // self.patch_size

    @property
    def token_dim(self) -> int:
        return CHANNELS * self.patch_size**2

    @property
    def cond_dim(self) -> int:
        return 3 * self.patch_size**2

    @property
    def max_tokens(self) -> int:
        return (self.max_layers + 1) * self.grid**2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["axis_split"] = list(self.rope.axis_split)
        return d


def _block_shapes(cfg: ModelConfig, last: bool) -> dict:
    d, hidden = cfg.d_model, cfg.d_model * cfg.mlp_ratio
    shapes = {}
    for stream in ("img", "txt"):
        txt_pre_only = stream == "txt" and last
        shapes[f"{stream}.mod.w"] = (d, (2 if txt_pre_only else 6) * d)
        shapes[f"{stream}.mod.b"] = ((2 if txt_pre_only else 6) * d,)
        shapes[f"{stream}.norm1"] = (d,)
        shapes[f"{stream}.qkv.w"] = (d, 3 * d)
        shapes[f"{stream}.qkv.b"] = (3 * d,)
        if txt_pre_only:
            continue
        shapes[f"{stream}.proj.w"] = (d, d)
        shapes[f"{stream}.proj.b"] = (d,)
        shapes[f"{stream}.norm2"] = (d,)
        shapes[f"{stream}.mlp.w1"] = (d, hidden)
        shapes[f"{stream}.mlp.b1"] = (hidden,)
        shapes[f"{stream}.mlp.w2"] = (hidden, d)
        shapes[f"{stream}.mlp.b2"] = (d,)
    return shapes


def param_shapes(cfg: ModelConfig) -> dict:
    d, P = cfg.d_model, cfg.token_dim
    shapes = {
        "text_embed": (cfg.vocab, d),
        "text_pos": (cfg.max_text_tokens, d),
        "null_text_embed": (d,),
        "time.w1": (d, d),
        "time.b1": (d,),
        "time.w2": (d, d),
        "time.b2": (d,),
        "patch_in.w": (P, d),
        "patch_in.b": (d,),
        "mlca.w": (cfg.cond_dim, d),
        "mlca.b": (d,),
    }
    for i in range(cfg.n_blocks):
        for k, s in _block_shapes(cfg, i == cfg.n_blocks - 1).items():
            shapes[f"blocks.{i}.{k}"] = s
    shapes.update({
        "final.mod.w": (d, 2 * d),
        "final.mod.b": (2 * d,),
        "final.norm": (d,),
        "patch_out.w": (d, P),
        "patch_out.b": (P,),
        "skip.w": (d, P),
        "skip.b": (P,),
    })
    return shapes


def _init_value(name: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf in ("norm1", "norm2", "norm"):
        return np.ones(shape)
    if name.endswith(".b") or leaf.startswith("b"):
        return np.zeros(shape)
    if name == "text_embed" or name == "null_text_embed":
        return rng.normal(0.0, 1.0, shape)
    if name == "text_pos":
        return rng.normal(0.0, 0.1, shape)
    if ".mod." in name or name.startswith("skip."):
        return rng.normal(0.0, 0.02, shape)
    scale = 1.0 / math.sqrt(shape[0])
    if leaf == "w2" and "mlp" in name or ".proj." in name or name.startswith("patch_out"):
        scale *= 0.5
    return rng.normal(0.0, scale, shape)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def arrays(self) -> dict:
        return {k: v.data for k, v in self.tensors.items()}

    def zero_grad(self) -> None:
        for p in self.tensors.values():
            p.grad = None

    def grads(self) -> dict:
        return {k: v.grad for k, v in self.tensors.items()}

    def save(self, path, meta: dict | None = None, extra: dict | None = None):
        arrays = dict(self.arrays())
        arrays.update(extra or {})
        return save_checkpoint(path, arrays, {"model_config": self.config.to_dict(), **(meta or {})})

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict, dtype=None) -> "ModelParams":
        expected = param_shapes(config)
        tensors = {}
        for name, shape in expected.items():
            if name not in arrays:
                raise ConfigError(f"checkpoint lacks parameter {name}")
            if tuple(arrays[name].shape) != tuple(shape):
                raise ShapeError(f"parameter {name} has shape {arrays[name].shape}, expected {shape}")
            tensors[name] = Tensor(arrays[name], requires_grad=True, dtype=dtype or arrays[name].dtype, name=name)
        return cls(config, tensors)

    @classmethod
    def load(cls, path, dtype=None) -> tuple:
        """Return ``(params, meta, extra_arrays)`` from a checkpoint file."""
        arrays, meta = load_checkpoint(path)
        config = ModelConfig(**meta["model_config"])
        params = cls.from_arrays(config, arrays, dtype)
        extra = {k: v for k, v in arrays.items() if k not in params.tensors}
        return params, meta, extra


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    tensors = {name: Tensor(_init_value(name, shape, rng), requires_grad=True, name=name)
               for name, shape in param_shapes(cfg).items()}
    return ModelParams(cfg, tensors)


# text


def embed_text(params: ModelParams, ids) -> Tensor:
    """Token ids -> (T, d_model); an empty prompt is the single null embedding."""
    cfg = params.config
    ids = np.asarray(list(ids), dtype=np.int64)
    if len(ids) == 0:
        return T.reshape(params["null_text_embed"], (1, cfg.d_model))
    if len(ids) > cfg.max_text_tokens:
        raise CapacityError(f"prompt has {len(ids)} tokens, limit is {cfg.max_text_tokens}")
    if ids.min() < 0 or ids.max() >= cfg.vocab:
        raise VocabularyError(f"token id out of range [0, {cfg.vocab}): {ids.tolist()}")
    return T.take_rows(params["text_embed"], ids) + params["text_pos"][: len(ids)]


def text_positions(n: int) -> np.ndarray:
    return np.stack([np.full(n, TEXT_LAYER), np.zeros(n, dtype=np.int64), np.arange(n)], axis=1)


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * 1000.0 * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


# batched forward


@dataclass
class ModelInput:
    """Padded batch: image tokens, positions and text for one forward pass."""

    x: np.ndarray            # (B, L, token_dim) noisy tokens
    positions: np.ndarray    # (B, L, 3)
    valid: np.ndarray        # (B, L) bool
    t: np.ndarray            # (B,)
    text: list               # B lists of token ids; [] selects the null embedding

    @property
    def batch(self) -> int:
        return self.x.shape[0]


def _text_batch(params: ModelParams, text: list) -> tuple:
    embeds = [embed_text(params, ids) for ids in text]
    n = max(e.shape[0] for e in embeds)
    d = params.config.d_model
    rows, valid, pos = [], np.zeros((len(embeds), n), dtype=bool), np.zeros((len(embeds), n, 3), dtype=np.int64)
    for b, e in enumerate(embeds):
        k = e.shape[0]
        if k < n:
            e = T.concat([e, Tensor(np.zeros((n - k, d), dtype=e.data.dtype))], axis=0)
        rows.append(T.reshape(e, (1, n, d)))
        valid[b, :k] = True
        pos[b, :k] = text_positions(k)
    return T.concat(rows, axis=0), valid, pos


def _modulate(x: Tensor, gain: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return T.rms_norm(x, gain, NORM_EPS) * (scale + 1.0) + shift


def _chunks(m: Tensor, n: int, d: int) -> list:
    return [m[:, :, i * d:(i + 1) * d] for i in range(n)]


def _qkv(x: Tensor, w: Tensor, b: Tensor, heads: int) -> list:
    bsz, n, d = x.shape
    qkv = T.reshape(T.linear(x, w, b), (bsz, n, 3, heads, d // heads))
    qkv = T.transpose(qkv, (2, 0, 3, 1, 4))
    return [qkv[i] for i in range(3)]


def _mlp(x: Tensor, p: dict, prefix: str) -> Tensor:
    h = T.gelu(T.linear(x, p[prefix + "mlp.w1"], p[prefix + "mlp.b1"]))
    return T.linear(h, p[prefix + "mlp.w2"], p[prefix + "mlp.b2"])


def _block(p: dict, i: int, cfg: ModelConfig, img: Tensor, txt: Tensor, vec_act: Tensor,
           cos: np.ndarray, sin: np.ndarray, bias: np.ndarray) -> tuple:
    d, heads = cfg.d_model, cfg.n_heads
    pre = f"blocks.{i}."
    last = i == cfg.n_blocks - 1
    bsz = img.shape[0]
    mi = T.reshape(T.linear(vec_act, p[pre + "img.mod.w"], p[pre + "img.mod.b"]), (bsz, 1, 6 * d))
    mt_n = 2 if last else 6
    mt = T.reshape(T.linear(vec_act, p[pre + "txt.mod.w"], p[pre + "txt.mod.b"]), (bsz, 1, mt_n * d))
    i_shift1, i_scale1, i_gate1, i_shift2, i_scale2, i_gate2 = _chunks(mi, 6, d)
    t_mods = _chunks(mt, mt_n, d)

    qi, ki, vi = _qkv(_modulate(img, p[pre + "img.norm1"], i_shift1, i_scale1),
                      p[pre + "img.qkv.w"], p[pre + "img.qkv.b"], heads)
    qt, kt, vt = _qkv(_modulate(txt, p[pre + "txt.norm1"], t_mods[0], t_mods[1]),
                      p[pre + "txt.qkv.w"], p[pre + "txt.qkv.b"], heads)
    n_txt = txt.shape[1]
    q = T.concat([qt, qi], axis=2)
    k = T.concat([kt, ki], axis=2)
    v = T.concat([vt, vi], axis=2)
    out = attend(q, k, v, cos, sin, bias)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (bsz, out.shape[2], d))

    img = img + i_gate1 * T.linear(out[:, n_txt:], p[pre + "img.proj.w"], p[pre + "img.proj.b"])
    img = img + i_gate2 * _mlp(_modulate(img, p[pre + "img.norm2"], i_shift2, i_scale2), p, pre + "img.")
    if not last:
        _, _, t_gate1, t_shift2, t_scale2, t_gate2 = t_mods
        txt = txt + t_gate1 * T.linear(out[:, :n_txt], p[pre + "txt.proj.w"], p[pre + "txt.proj.b"])
        txt = txt + t_gate2 * _mlp(_modulate(txt, p[pre + "txt.norm2"], t_shift2, t_scale2), p, pre + "txt.")
    return img, txt


def forward_batch(params: ModelParams, inp: ModelInput, guidance: Tensor | None) -> Tensor:
    """Velocity prediction (B, L, token_dim) for a padded batch.

    ``guidance`` is the (B, L, d_model) MLCA token sequence or None.
    """
    cfg = params.config
    p = params.tensors
    bsz, n, tok_dim = inp.x.shape
    if tok_dim != cfg.token_dim:
        raise ShapeError(f"token dim {tok_dim} does not match model token dim {cfg.token_dim}")
    if n > cfg.max_tokens:
        raise CapacityError(f"sequence of {n} tokens exceeds the configured maximum of {cfg.max_tokens}")
    t = np.asarray(inp.t, dtype=np.float64).reshape(-1)
    if t.shape != (bsz,):
        raise ShapeError(f"need one timestep per batch item, got {t.shape}")
    if np.any(t < 0) or np.any(t > 1) or not np.all(np.isfinite(t)):
        raise ParameterError(f"timesteps must lie in [0, 1], got {t}")
    if guidance is not None and guidance.shape != (bsz, n, cfg.d_model):
        raise ShapeError(f"guidance shape {guidance.shape} does not match ({bsz}, {n}, {cfg.d_model})")

    dtype = T.get_default_dtype()
    x = Tensor(inp.x, dtype=dtype)
    temb = Tensor(timestep_embedding(t, cfg.d_model), dtype=dtype)
    vec = T.linear(T.silu(T.linear(temb, p["time.w1"], p["time.b1"])), p["time.w2"], p["time.b2"])
    vec_act = T.silu(vec)

    txt, txt_valid, txt_pos = _text_batch(params, inp.text)
    img = T.linear(x, p["patch_in.w"], p["patch_in.b"])
    if guidance is not None:
        img = img + guidance

    positions = np.concatenate([txt_pos, np.asarray(inp.positions)], axis=1)
    ang = rope_angles(positions, cfg.rope)[:, None]  # (B, 1, Ltot, d_head/2)
    cos, sin = np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)
    keys = np.concatenate([txt_valid, np.asarray(inp.valid, dtype=bool)], axis=1)
    bias = key_mask_bias(keys, keys.shape[1], dtype)[:, None, None, :]

    for i in range(cfg.n_blocks):
        if i > 0 and cfg.mlca_every_block and guidance is not None:
            img = img + guidance
        img, txt = _block(p, i, cfg, img, txt, vec_act, cos, sin, bias)

    m = T.reshape(T.linear(vec_act, p["final.mod.w"], p["final.mod.b"]), (bsz, 1, 2 * cfg.d_model))
    shift, scale = _chunks(m, 2, cfg.d_model)
    h = _modulate(img, p["final.norm"], shift, scale)
    out = T.linear(h, p["patch_out.w"], p["patch_out.b"])
    gate = T.reshape(T.linear(vec_act, p["skip.w"], p["skip.b"]), (bsz, 1, tok_dim))
    return out + gate * x


def forward(params: ModelParams, noisy_seq: TokenSequence, t: float, text_ids, guidance: Tensor | None = None) -> Tensor:
    """Single-sequence velocity (L, token_dim); ``guidance`` is (L, d_model) or None."""
    n = len(noisy_seq)
    inp = ModelInput(noisy_seq.tokens[None], noisy_seq.positions[None], np.ones((1, n), dtype=bool),
                     np.array([t], dtype=np.float64), [list(text_ids)])
    g = None if guidance is None else T.reshape(guidance, (1, n, params.config.d_model))
    return T.reshape(forward_batch(params, inp, g), (n, params.config.token_dim))
