"""
Scaled dot-product, multi-head and relative-position self-attention.
"""
import math
from threading import Lock
from typing import Optional

import numpy as np

from conformer_r.errors import DimensionError
from conformer_r.logging_utils import get_logger
from conformer_r.metrics import get_metrics
from conformer_r.models import AttentionConfig
from conformer_r.nn import Linear, Module, parameter
from conformer_r.tensor import RngState, Tensor, as_tensor, dropout, softmax

MASK_BIAS = -1e30

logger = get_logger()


def sinusoid_rows(positions: np.ndarray, d_model: int) -> np.ndarray:
    """p[pos, 2i] = sin(pos / 10000^(2i/d)), p[pos, 2i+1] = cos(pos / 10000^(2i/d))."""
    positions = np.asarray(positions, dtype=np.float64)[:, None]
    dims = np.arange(0, d_model, 2, dtype=np.float64)
    angles = positions / np.power(10000.0, dims / d_model)
    table = np.zeros((positions.shape[0], d_model))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return table


class AbsPositionTable:
    """Absolute sinusoidal encodings p_0..p_{n-1}, grown on demand."""

    def __init__(self, d_model: int, initial: int = 64):
        self.d_model = d_model
        self.table = sinusoid_rows(np.arange(initial), d_model)
        self._lock = Lock()

    def rows(self, length: int) -> np.ndarray:
        with self._lock:
            if length > self.table.shape[0]:
                self.table = sinusoid_rows(np.arange(max(length, 2 * self.table.shape[0])), self.d_model)
            return self.table[:length]


class RelPositionTable:
    """Relative encodings r_k for k in [-(span-1), span-1]; row j holds k = j - (span-1)."""

    def __init__(self, d_model: int, span: int = 64):
        self.d_model = d_model
        self._lock = Lock()
        self._build(span)

    def _build(self, span: int) -> None:
        self.span = span
        self.table = sinusoid_rows(np.arange(-(span - 1), span), self.d_model)

    def rows(self, length: int) -> np.ndarray:
        """[2T-1 x d] rows for offsets -(T-1)..T-1."""
        with self._lock:
            if length > self.span:
                logger.debug("Growing relative position table", extra={"frames": length})
                self._build(max(length, 2 * self.span))
            centre = self.span - 1
            return self.table[centre - (length - 1):centre + length]


def causal_mask(length: int) -> np.ndarray:
    """mask[i, j] is True (allowed) iff j <= i."""
    if length < 1:
        raise DimensionError(f"causal mask needs length >= 1, got {length}")
    return np.tril(np.ones((length, length), dtype=bool))


def masked_softmax(scores: Tensor, d_k: int, mask: Optional[np.ndarray] = None) -> Tensor:
    """softmax(scores / sqrt(d_k) + bias) over the key axis; masked keys get a -1e30 bias."""
    scaled = scores * (1.0 / math.sqrt(d_k))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != scores.shape[-2:]:
            raise DimensionError(f"mask shape {mask.shape} does not match scores {scores.shape}")
        dead = int((~mask.any(axis=-1)).sum()) * int(np.prod(scores.shape[:-2], dtype=np.int64))
        if dead:
            # Every key masked: the constant bias cancels and the row comes out uniform.
            get_metrics().inc_masked_rows(dead)
            logger.warning("Attention row has every key masked", extra={"result": f"rows={dead}"})
        scaled = scaled + np.where(mask, 0.0, MASK_BIAS)
    return softmax(scaled, axis=-1)


def scaled_dot_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: Optional[np.ndarray] = None,
    dropout_p: float = 0.0,
    rng: Optional[RngState] = None,
    train: bool = False,
) -> Tensor:
    """softmax(Q K^T / sqrt(d_k) + mask_bias) V; leading axes (heads) broadcast."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention operands disagree: Q {q.shape}, K {k.shape}, V {v.shape}")
    scores = q @ _swap_last(k)
    weights = masked_softmax(scores, q.shape[-1], mask)
    weights = dropout(weights, dropout_p, rng, train)
    return weights @ v


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return x.transpose(*axes)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[T x d] -> [h x T x d/h]."""
    steps, width = x.shape
    return x.reshape(steps, n_heads, width // n_heads).transpose(1, 0, 2)


def merge_heads(x: Tensor) -> Tensor:
    """[h x T x d_k] -> [T x h*d_k]."""
    heads, steps, d_k = x.shape
    return x.transpose(1, 0, 2).reshape(steps, heads * d_k)


class AttentionParams(Module):
    """W^Q, W^K, W^V and W^o of one multi-head attention layer."""

    def __init__(self, rng: np.random.Generator, d_model: int, n_heads: int, dropout_p: float = 0.0):
        if d_model % n_heads:
            raise DimensionError(f"d_model {d_model} is not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.dropout_p = dropout_p
        self.w_q = Linear(rng, d_model, d_model)
        self.w_k = Linear(rng, d_model, d_model)
        self.w_v = Linear(rng, d_model, d_model)
        self.w_o = Linear(rng, d_model, d_model)

    @classmethod
    def from_config(cls, rng: np.random.Generator, cfg: AttentionConfig) -> "AttentionParams":
        return cls(rng, cfg.d_model, cfg.n_heads, cfg.dropout_p)


def multi_head_attention(
    x_q: Tensor,
    x_kv: Tensor,
    params: AttentionParams,
    mask: Optional[np.ndarray] = None,
    dropout_p: float = 0.0,
    rng: Optional[RngState] = None,
    train: bool = False,
) -> Tensor:
    """Concat(head_1..head_h) W^o with per-head scaled dot-product attention."""
    width = params.w_q.weight.shape[0]
    if x_q.shape[-1] != width or x_kv.shape[-1] != width:
        raise DimensionError(f"attention inputs {x_q.shape}, {x_kv.shape} must have width {width}")
    h = params.n_heads
    q = split_heads(params.w_q(x_q), h)
    k = split_heads(params.w_k(x_kv), h)
    v = split_heads(params.w_v(x_kv), h)
    heads = scaled_dot_attention(q, k, v, mask, dropout_p, rng, train)
    return params.w_o(merge_heads(heads))


class RelPosParams(Module):
    """Relative-position self-attention: content and position keys, biases u and v."""

    def __init__(self, rng: np.random.Generator, d_model: int, n_heads: int, dropout_p: float = 0.0):
        if d_model % n_heads:
            raise DimensionError(f"d_model {d_model} is not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.dropout_p = dropout_p
        self.w_q = Linear(rng, d_model, d_model)
        self.w_ke = Linear(rng, d_model, d_model)
        self.w_kr = Linear(rng, d_model, d_model, bias=False)
        self.w_v = Linear(rng, d_model, d_model)
        self.w_o = Linear(rng, d_model, d_model)
        self.u = parameter(np.zeros(d_model))
        self.v = parameter(np.zeros(d_model))
        self.table = RelPositionTable(d_model)

    @classmethod
    def from_config(cls, rng: np.random.Generator, cfg: AttentionConfig) -> "RelPosParams":
        return cls(rng, cfg.d_model, cfg.n_heads, cfg.dropout_p)

    @property
    def d_k(self) -> int:
        return self.u.shape[0] // self.n_heads


def rel_attention_scores(e: Tensor, params: RelPosParams, r_rows: Optional[np.ndarray] = None) -> Tensor:
    """
    Unscaled relative-position scores [h x T x T].

    A[i, l] = q_i k_l + q_i R_{i-l} + u k_l + v R_{i-l}, with q = e W^Q,
    k = e W^{K,E} and R = r W^{K,r}. The positional term is evaluated
    against all 2T-1 offsets and gathered per (i, l).
    """
    steps = e.shape[0]
    h, d_k = params.n_heads, params.d_k
    if r_rows is None:
        r_rows = params.table.rows(steps)
    if r_rows.shape[0] != 2 * steps - 1:
        raise DimensionError(f"need {2 * steps - 1} relative rows for T={steps}, got {r_rows.shape[0]}")
    q = split_heads(params.w_q(e), h)
    k = split_heads(params.w_ke(e), h)
    r = split_heads(params.w_kr(Tensor(r_rows)), h)
    u = params.u.reshape(h, 1, d_k)
    v = params.v.reshape(h, 1, d_k)
    content = (q + u) @ _swap_last(k)
    by_offset = (q + v) @ _swap_last(r)
    rows = np.arange(steps)[:, None]
    offsets = rows - np.arange(steps)[None, :] + (steps - 1)
    position = by_offset[:, rows, offsets]
    return content + position


def rel_self_attention(
    x: Tensor,
    params: RelPosParams,
    mask: Optional[np.ndarray] = None,
    dropout_p: float = 0.0,
    rng: Optional[RngState] = None,
    train: bool = False,
) -> Tensor:
    """Multi-head self-attention scored with rel_attention_scores."""
    weights = masked_softmax(rel_attention_scores(x, params), params.d_k, mask)
    weights = dropout(weights, dropout_p, rng, train)
    v = split_heads(params.w_v(x), params.n_heads)
    return params.w_o(merge_heads(weights @ v))
