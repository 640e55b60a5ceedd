"""Layer-aware rotary position embedding over (layer, height, width) indices.

The head channels are split into three contiguous slices, one per axis.
Inside a slice, channel pairs (2j, 2j+1) are treated as one complex number
and rotated by ``position * theta_j`` with ``theta_j = base ** (-2j / d_axis)``.
The score between a query at p_n and a key at p_m is then

    sum over axes c, pairs j of Re[q_cj * conj(k_cj) * exp(i (p_n - p_m)_c theta_cj)]

i.e. a function of the relative position only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor


def _even(x: float) -> int:
    return 2 * int(np.floor(x / 2 + 0.5))


@dataclass(frozen=True)
class RopeConfig:
    d_head: int
    axis_split: tuple
    freq_base: tuple = (100.0, 10000.0, 10000.0)

    def __post_init__(self):
        if len(self.axis_split) != 3 or sum(self.axis_split) != self.d_head:
            raise ConfigError(f"axis_split {self.axis_split} must have 3 parts summing to d_head={self.d_head}")
        if any(d < 2 or d % 2 for d in self.axis_split):
            raise ConfigError(f"every axis slice must be even and >= 2, got {self.axis_split}")
        if len(self.freq_base) != 3 or min(self.freq_base) <= 0:
            raise ConfigError(f"freq_base needs 3 positive entries, got {self.freq_base}")

    @classmethod
    def default(cls, d_head: int) -> "RopeConfig":
        d_l = max(2, _even(d_head / 4))
        d_h = max(2, _even(3 * d_head / 8))
        return cls(d_head, (d_l, d_h, d_head - d_l - d_h))

    def frequencies(self) -> list:
        """Per-axis arrays of pair frequencies theta_j."""
        return [base ** (-2.0 * np.arange(d // 2) / d) for d, base in zip(self.axis_split, self.freq_base)]


def rope_angles(positions: np.ndarray, cfg: RopeConfig) -> np.ndarray:
    """(..., 3) integer positions -> (..., d_head/2) rotation angles."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape[-1] != 3:
        raise ShapeError(f"positions must end in 3 (l, h, w), got {positions.shape}")
    parts = [positions[..., c:c + 1] * theta for c, theta in enumerate(cfg.frequencies())]
    return np.concatenate(parts, axis=-1)


def rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate channel pairs of ``x`` (last axis) by precomputed cos/sin tables.

    ``cos``/``sin`` have the last axis d/2 and broadcast against x[..., ::2].
    """
    x = T.as_tensor(x)
    dt = x.data.dtype
    cos = cos.astype(dt, copy=False)
    sin = sin.astype(dt, copy=False)
    a, b = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty(np.broadcast_shapes(x.shape, (*cos.shape[:-1], x.shape[-1])), dtype=dt)
    out[..., 0::2] = a * cos - b * sin
    out[..., 1::2] = a * sin + b * cos

    def bw(g):
        ga, gb = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ga * cos + gb * sin
        gx[..., 1::2] = gb * cos - ga * sin
        return (T._unbroadcast(gx, x.shape),)

    return T._make(out, (x,), bw)


def apply_rope(x: Tensor, positions: np.ndarray, cfg: RopeConfig) -> Tensor:
    """Rotate x of shape (L, heads, d_head) by the per-token positions (L, 3)."""
    x = T.as_tensor(x)
    if x.shape[-1] != cfg.d_head:
        raise ConfigError(f"tensor head dim {x.shape[-1]} does not match RopeConfig.d_head={cfg.d_head}")
    positions = np.asarray(positions)
    if positions.shape != (x.shape[0], 3):
        raise ShapeError(f"positions shape {positions.shape} does not match {x.shape[0]} tokens")
    ang = rope_angles(positions, cfg)[:, None, :]
    return rotate(x, np.cos(ang), np.sin(ang))


def key_mask_bias(mask: np.ndarray | None, n_keys: int, dtype) -> np.ndarray | None:
    """Boolean key-validity mask (..., Lk) -> additive bias with -inf on invalid keys."""
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-1] != n_keys:
        raise ContractError(f"mask covers {mask.shape[-1]} keys, sequence has {n_keys}")
    return np.where(mask, 0.0, -np.inf).astype(dtype)


def attend(q: Tensor, k: Tensor, v: Tensor, cos: np.ndarray, sin: np.ndarray,
           bias: np.ndarray | None = None, return_weights: bool = False):
    """Batched rotary attention on (..., heads, L, d_head) operands."""
    d_head = q.shape[-1]
    q = rotate(q, cos, sin)
    k = rotate(k, cos, sin)
    scores = T.matmul(q, T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    scores = scores * (1.0 / np.sqrt(d_head))
    if bias is not None:
        scores = scores + bias
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, v)
    return (out, weights) if return_weights else out


def attention(q, k, v, positions: np.ndarray, cfg: RopeConfig, mask: np.ndarray | None = None,
              return_weights: bool = False):
    """softmax(rope(Q) rope(K)^T / sqrt(d) + mask) V for (L, heads, d_head) inputs.

    ``mask`` is a boolean key-validity vector of length L (True = attend).
    """
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if not (q.shape == k.shape == v.shape) or q.ndim != 3:
        raise ShapeError(f"q, k, v must share an (L, heads, d_head) shape, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[-1] != cfg.d_head:
        raise ConfigError(f"head dim {q.shape[-1]} does not match RopeConfig.d_head={cfg.d_head}")
    n = q.shape[0]
    positions = np.asarray(positions)
    if positions.shape != (n, 3):
        raise ShapeError(f"positions shape {positions.shape} does not match {n} tokens")
    if mask is not None and np.shape(mask) != (n,):
        raise ContractError(f"mask shape {np.shape(mask)} does not match sequence length {n}")
    ang = rope_angles(positions, cfg)
    heads_first = (1, 0, 2)
    res = attend(T.transpose(q, heads_first), T.transpose(k, heads_first), T.transpose(v, heads_first),
                 np.cos(ang), np.sin(ang), key_mask_bias(mask, n, q.data.dtype), return_weights=True)
    out = T.transpose(res[0], heads_first)
    return (out, res[1]) if return_weights else out
