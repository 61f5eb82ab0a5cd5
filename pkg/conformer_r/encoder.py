"""
Conformer encoder: convolutional subsampling and a stack of macaron blocks.
"""
from typing import List, Optional, Tuple

import numpy as np

from conformer_r.attention import RelPosParams, rel_self_attention
from conformer_r.errors import DimensionError
from conformer_r.models import FEATURE_DIMS, ConformerConfig
from conformer_r.nn import BatchNorm, LayerNorm, Linear, Module, parameter, xavier
from conformer_r.tensor import (
    RngState,
    Tensor,
    as_tensor,
    conv1d_depthwise,
    conv2d,
    dropout,
    sigmoid,
    swish,
)

SUBSAMPLE_KERNEL = 3
SUBSAMPLE_STRIDE = 2


def _conv_out(length: int) -> int:
    return (length - SUBSAMPLE_KERNEL) // SUBSAMPLE_STRIDE + 1


def subsampled_length(frames: int) -> int:
    """T' after two 3x3 stride-2 convolutions; 0 when too short."""
    if frames < SUBSAMPLE_KERNEL:
        return 0
    first = _conv_out(frames)
    return _conv_out(first) if first >= SUBSAMPLE_KERNEL else 0


def min_input_frames() -> int:
    frames = SUBSAMPLE_KERNEL
    while subsampled_length(frames) < 1:
        frames += 1
    return frames


class ConvSubsampleParams(Module):
    def __init__(self, rng: np.random.Generator, channels: int, d_model: int):
        fan1, fan2 = SUBSAMPLE_KERNEL ** 2, channels * SUBSAMPLE_KERNEL ** 2
        shape1 = (channels, 1, SUBSAMPLE_KERNEL, SUBSAMPLE_KERNEL)
        shape2 = (channels, channels, SUBSAMPLE_KERNEL, SUBSAMPLE_KERNEL)
        self.conv1 = parameter(xavier(rng, fan1, channels * fan1, shape1))
        self.bias1 = parameter(np.zeros(channels))
        self.conv2 = parameter(xavier(rng, fan2, fan2, shape2))
        self.bias2 = parameter(np.zeros(channels))
        width = _conv_out(_conv_out(FEATURE_DIMS))
        self.proj = Linear(rng, channels * width, d_model)


def conv_subsample(features: Tensor, params: ConvSubsampleParams) -> Tuple[Tensor, int]:
    """[T x 80] -> ([T' x d_model], T') through conv-swish-conv-swish-linear."""
    features = as_tensor(features)
    frames = features.shape[0]
    if features.ndim != 2 or features.shape[1] != FEATURE_DIMS:
        raise DimensionError(f"encoder input must be [frames x {FEATURE_DIMS}], got {features.shape}")
    reduced = subsampled_length(frames)
    if reduced < 1:
        raise DimensionError(
            f"{frames} frames is too short for subsampling; at least {min_input_frames()} needed"
        )
    channels = params.bias1.shape[0]
    x = features.reshape(1, frames, FEATURE_DIMS)
    x = swish(conv2d(x, params.conv1, SUBSAMPLE_STRIDE) + params.bias1.reshape(channels, 1, 1))
    x = swish(conv2d(x, params.conv2, SUBSAMPLE_STRIDE) + params.bias2.reshape(channels, 1, 1))
    _, steps, width = x.shape
    x = x.transpose(1, 0, 2).reshape(steps, channels * width)
    return params.proj(x), steps


class FeedForwardParams(Module):
    def __init__(self, rng: np.random.Generator, d_model: int, expansion: int):
        self.norm = LayerNorm(d_model)
        self.w1 = Linear(rng, d_model, d_model * expansion)
        self.w2 = Linear(rng, d_model * expansion, d_model)


def feed_forward_module(
    x: Tensor, params: FeedForwardParams, dropout_p: float, train: bool, rng: Optional[RngState]
) -> Tensor:
    """layer_norm -> linear -> swish -> dropout -> linear -> dropout (residual added by caller)."""
    h = swish(params.w1(params.norm(x)))
    h = dropout(h, dropout_p, rng, train)
    return dropout(params.w2(h), dropout_p, rng, train)


class ConvModuleParams(Module):
    """Pointwise-in (w, b), gate (v, c), depthwise kernel, batch norm, pointwise-out."""

    def __init__(self, rng: np.random.Generator, d_model: int, kernel: int):
        if kernel % 2 == 0:
            raise DimensionError(f"depthwise kernel size must be odd, got {kernel}")
        self.norm = LayerNorm(d_model)
        self.pw_in = Linear(rng, d_model, d_model)
        self.gate = Linear(rng, d_model, d_model)
        self.dw = parameter(xavier(rng, kernel, kernel, (kernel, d_model)))
        self.bn = BatchNorm(d_model)
        self.pw_out = Linear(rng, d_model, d_model)


def glu_gate(x: Tensor, params: ConvModuleParams) -> Tensor:
    """(x*w + b) * sigmoid(x*v + c), elementwise."""
    return params.pw_in(x) * sigmoid(params.gate(x))


def convolution_module(
    x: Tensor, params: ConvModuleParams, dropout_p: float, train: bool, rng: Optional[RngState]
) -> Tensor:
    """layer_norm -> GLU -> depthwise conv -> batch_norm -> swish -> pointwise -> dropout."""
    h = glu_gate(params.norm(x), params)
    h = conv1d_depthwise(h, params.dw)
    h = swish(params.bn(h, train))
    return dropout(params.pw_out(h), dropout_p, rng, train)


class ConformerBlockParams(Module):
    def __init__(self, rng: np.random.Generator, cfg: ConformerConfig):
        self.ff1 = FeedForwardParams(rng, cfg.d_model, cfg.ff_expansion)
        self.mhsa_norm = LayerNorm(cfg.d_model)
        self.mhsa = RelPosParams.from_config(rng, cfg.attention())
        self.conv = ConvModuleParams(rng, cfg.d_model, cfg.depthwise_kernel)
        self.ff2 = FeedForwardParams(rng, cfg.d_model, cfg.ff_expansion)
        self.final_norm = LayerNorm(cfg.d_model)


def conformer_block(
    x: Tensor, params: ConformerBlockParams, cfg: ConformerConfig, train: bool, rng: Optional[RngState]
) -> Tensor:
    """x + FFN/2, + RelMHSA, + Conv, + FFN/2, then LayerNorm."""
    p = cfg.dropout_p
    x = x + 0.5 * feed_forward_module(x, params.ff1, p, train, rng)
    attended = rel_self_attention(
        params.mhsa_norm(x), params.mhsa, dropout_p=params.mhsa.dropout_p, rng=rng, train=train
    )
    x = x + dropout(attended, p, rng, train)
    x = x + convolution_module(x, params.conv, p, train, rng)
    x = x + 0.5 * feed_forward_module(x, params.ff2, p, train, rng)
    return params.final_norm(x)


class EncoderParams(Module):
    def __init__(self, rng: np.random.Generator, cfg: ConformerConfig):
        self.cfg = cfg
        self.subsample = ConvSubsampleParams(rng, cfg.channels, cfg.d_model)
        self.blocks: List[ConformerBlockParams] = [ConformerBlockParams(rng, cfg) for _ in range(cfg.n_blocks)]


def encoder_forward(
    features: Tensor, params: EncoderParams, train: bool, rng: Optional[RngState] = None
) -> Tuple[Tensor, int]:
    """Subsample then run every Conformer block; returns ([T' x d_model], T')."""
    x, steps = conv_subsample(features, params.subsample)
    for block in params.blocks:
        x = conformer_block(x, block, params.cfg, train, rng)
    return x, steps
