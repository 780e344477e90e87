"""Local correction branch.

A 3x3 stem expands the image to C channels, two independent stacks of
pixel-wise enhancement blocks (PEM) refine features at full resolution, and
two heads emit the per-pixel correction maps: a nonnegative gain (ReLU) and
a bounded offset (tanh), so the branch computes img * gain + offset.

Initialization realizes the exact identity map: the gain head starts as
constant 1, the offset head as constant 0, every normalization as identity,
and layer scales at 1e-2.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, conv2d, gelu, matmul, relu, reshape, tanh

LAYER_SCALE_INIT = 1e-2


@dataclass
class Conv2d:
    """Convolution weights plus its fixed geometry."""

    weight: Tensor  # (out, in/groups, k, k)
    bias: Tensor  # (out,)
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(
            x,
            self.weight,
            self.bias,
            stride=self.stride,
            padding=self.padding,
            groups=self.groups,
        )


def kaiming_conv(rng, out_ch, in_ch_per_group, k, dtype, stride=1, padding=0, groups=1):
    """Fan-in scaled uniform init, zero bias."""
    fan_in = in_ch_per_group * k * k
    bound = math.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(out_ch, in_ch_per_group, k, k))
    return Conv2d(
        weight=Tensor(w, requires_grad=True, dtype=dtype),
        bias=Tensor(np.zeros(out_ch), requires_grad=True, dtype=dtype),
        stride=stride,
        padding=padding,
        groups=groups,
    )


@dataclass
class LightNormParams:
    """Statistics-free normalization: per-channel affine, then channel mixing.

    No mean/variance is computed, so the op is resolution-independent and is
    the identity map at initialization (scale 1, bias 0, mix = I).
    """

    scale: Tensor  # (C,)
    bias: Tensor  # (C,)
    mix: Tensor  # (C, C)

    @classmethod
    def identity(cls, channels: int, dtype=np.float32) -> "LightNormParams":
        return cls(
            scale=Tensor(np.ones(channels), requires_grad=True, dtype=dtype),
            bias=Tensor(np.zeros(channels), requires_grad=True, dtype=dtype),
            mix=Tensor(np.eye(channels), requires_grad=True, dtype=dtype),
        )


def light_norm(x: Tensor, p: LightNormParams) -> Tensor:
    """Per pixel: mix @ (scale * x_channels + bias).

    Folded as one 1x1 convolution with weight mix @ diag(scale) and bias
    mix @ bias, which is the same map in a single pass over the pixels.
    """
    c = p.scale.shape[0]
    if x.ndim != 4 or x.shape[1] != c:
        raise ShapeError(f"light_norm expects (N, {c}, H, W), got {x.shape}")
    weight = reshape(p.mix * reshape(p.scale, (1, c)), (c, c, 1, 1))
    bias = reshape(matmul(p.mix, reshape(p.bias, (c, 1))), (c,))
    return conv2d(x, weight, bias)


@dataclass
class LayerScaleParams:
    """Small per-channel multipliers on the two residual sub-blocks."""

    k_spatial: Tensor  # (C,)
    k_channel: Tensor  # (C,)

    @classmethod
    def default(cls, channels: int, dtype=np.float32) -> "LayerScaleParams":
        return cls(
            k_spatial=Tensor(
                np.full(channels, LAYER_SCALE_INIT), requires_grad=True, dtype=dtype
            ),
            k_channel=Tensor(
                np.full(channels, LAYER_SCALE_INIT), requires_grad=True, dtype=dtype
            ),
        )


@dataclass
class PemParams:
    """One pixel-wise enhancement block (channel-preserving, width C)."""

    pos_dw: Conv2d  # 3x3 depthwise positional encoding
    norm1: LightNormParams
    pw1: Conv2d  # 1x1 C->C
    dw: Conv2d  # 3x3 depthwise
    pw2: Conv2d  # 1x1 C->C
    norm2: LightNormParams
    mix1: Conv2d  # 1x1 C->C
    mix2: Conv2d  # 1x1 C->C
    scale: LayerScaleParams


def pem_init(channels: int, rng, dtype=np.float32) -> PemParams:
    dw_kw = dict(padding=1, groups=channels)
    return PemParams(
        pos_dw=kaiming_conv(rng, channels, 1, 3, dtype, **dw_kw),
        norm1=LightNormParams.identity(channels, dtype),
        pw1=kaiming_conv(rng, channels, channels, 1, dtype),
        dw=kaiming_conv(rng, channels, 1, 3, dtype, **dw_kw),
        pw2=kaiming_conv(rng, channels, channels, 1, dtype),
        norm2=LightNormParams.identity(channels, dtype),
        mix1=kaiming_conv(rng, channels, channels, 1, dtype),
        mix2=kaiming_conv(rng, channels, channels, 1, dtype),
        scale=LayerScaleParams.default(channels, dtype),
    )


def pem_forward(x: Tensor, p: PemParams) -> Tensor:
    """Positional encoding, spatial sub-block, channel sub-block, all residual."""
    c = x.shape[1]
    u = x + p.pos_dw(x)
    spatial = p.pw2(gelu(p.dw(gelu(p.pw1(light_norm(u, p.norm1))))))
    v = u + reshape(p.scale.k_spatial, (1, c, 1, 1)) * spatial
    channel = p.mix2(gelu(p.mix1(light_norm(v, p.norm2))))
    return v + reshape(p.scale.k_channel, (1, c, 1, 1)) * channel


@dataclass
class LocalMaps:
    """Per-pixel correction maps: gain >= 0 (ReLU), offset in (-1, 1) (tanh)."""

    gain: Tensor
    offset: Tensor


@dataclass
class LocalBranchParams:
    stem: Conv2d  # 3x3, 3 -> C
    gain_blocks: list[PemParams] = field(default_factory=list)
    offset_blocks: list[PemParams] = field(default_factory=list)
    gain_head: Conv2d = None  # 3x3, C -> 3, + ReLU
    offset_head: Conv2d = None  # 3x3, C -> 3, + tanh
    channels: int = 16
    blocks: int = 3


def local_branch_init(
    channels: int = 16, blocks: int = 3, rng=None, dtype=np.float32
) -> LocalBranchParams:
    """Random stem/blocks; heads pinned so the branch is the identity map."""
    if channels < 1 or blocks < 1:
        raise ValueError(f"need channels >= 1 and blocks >= 1, got {channels}, {blocks}")
    if rng is None:
        rng = np.random.default_rng(0)
    gain_head = Conv2d(
        weight=Tensor(np.zeros((3, channels, 3, 3)), requires_grad=True, dtype=dtype),
        bias=Tensor(np.ones(3), requires_grad=True, dtype=dtype),
        padding=1,
    )
    offset_head = Conv2d(
        weight=Tensor(np.zeros((3, channels, 3, 3)), requires_grad=True, dtype=dtype),
        bias=Tensor(np.zeros(3), requires_grad=True, dtype=dtype),
        padding=1,
    )
    return LocalBranchParams(
        stem=kaiming_conv(rng, channels, 3, 3, dtype, padding=1),
        gain_blocks=[pem_init(channels, rng, dtype) for _ in range(blocks)],
        offset_blocks=[pem_init(channels, rng, dtype) for _ in range(blocks)],
        gain_head=gain_head,
        offset_head=offset_head,
        channels=channels,
        blocks=blocks,
    )


def local_branch_forward(img: Tensor, p: LocalBranchParams) -> LocalMaps:
    """Full-resolution correction maps for an image in [0, 1]."""
    stem_out = p.stem(img)
    feat_gain = stem_out
    for blk in p.gain_blocks:
        feat_gain = pem_forward(feat_gain, blk)
    feat_gain = feat_gain + stem_out  # stack-level skip
    feat_offset = stem_out
    for blk in p.offset_blocks:
        feat_offset = pem_forward(feat_offset, blk)
    feat_offset = feat_offset + stem_out
    return LocalMaps(
        gain=relu(p.gain_head(feat_gain)),
        offset=tanh(p.offset_head(feat_offset)),
    )
