"""IS, CGMFE, WCAD and DFA blocks plus the CBAM-style attention branches."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .. import tensor as T
from ..tensor import Tensor
from .gates import GateSet, gated_product
from .module import Conv2d, DepthwiseConv2d, GroupNorm, Module, Pointwise

DEFAULT_EXPANSION = 4


class ISBlock(Module):
    """Information-summary block: PWC → DWC3×3 → PWC as an inverted bottleneck.

    Group-norm + GELU follow the first PWC and the DWC unless ``linear``
    is set, in which case the block is the bare composition of the three
    convolutions.
    """

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, expansion: int = DEFAULT_EXPANSION, linear: bool = False):
        if expansion < 1:
            raise ValueError("expansion must be a positive integer")
        self.cin, self.cout, self.expansion, self.linear = cin, cout, expansion, linear
        self.hidden = expansion * cin
        if expansion >= 2 and self.hidden <= max(cin, cout):
            raise ValueError(
                f"IS hidden width {self.hidden} must exceed max(in={cin}, out={cout}) for an inverted bottleneck"
            )
        self.pwc_in = Pointwise(cin, self.hidden, rng)
        self.norm1 = GroupNorm(self.hidden, affine=False)
        self.dwc = DepthwiseConv2d(self.hidden, 3, rng)
        self.norm2 = GroupNorm(self.hidden, affine=False)
        self.pwc_out = Pointwise(self.hidden, cout, rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.cin:
            raise ValueError(f"IS block expects {self.cin} channels, got shape {x.shape}")
        h = self.pwc_in(x)
        if not self.linear:
            h = T.gelu(self.norm1(h))
        h = self.dwc(h)
        if not self.linear:
            h = T.gelu(self.norm2(h))
        return self.pwc_out(h)

    def param_count(self) -> int:
        return self.pwc_in.param_count() + self.dwc.param_count() + self.pwc_out.param_count()

    def flops(self, h: int, w: int) -> int:
        return self.pwc_in.flops(h, w) + self.dwc.flops(h, w) + self.pwc_out.flops(h, w)


def is_forward(block: ISBlock, x: Tensor) -> Tensor:
    return block(x)


class CGMFEBlock(Module):
    """Four resolution-preserving branches fused through coupling gates.

    Branch order is fixed: 3×3 max-pool, then depthwise 3×3, 5×5, 7×7.
    """

    KERNELS = (3, 5, 7)

    def __init__(self, cin: int, cout: int, rng, expansion: int = DEFAULT_EXPANSION, gates_open: bool = False, linear_is: bool = False):
        self.cin, self.cout = cin, cout
        self.dw = [DepthwiseConv2d(cin, k, rng) for k in self.KERNELS]
        self.gates = GateSet(4, forced_open=gates_open)
        self.fuse = ISBlock(4 * cin, cout, rng, expansion, linear_is)

    def branches(self, x: Tensor) -> list[Tensor]:
        if x.ndim != 4 or x.shape[1] != self.cin:
            raise ValueError(f"CGMFE expects {self.cin} channels, got shape {x.shape}")
        return [T.maxpool2d(x, 3, 1, 1)] + [conv(x) for conv in self.dw]

    def couple(self, maps: Sequence[Tensor]) -> list[Tensor]:
        return [gated_product(maps, self.gates, i) for i in range(4)]

    def forward(self, x: Tensor) -> Tensor:
        return self.fuse(T.concat_channels(self.couple(self.branches(x))))

    def param_count(self) -> int:
        return sum(c.param_count() for c in self.dw) + self.gates.param_count() + self.fuse.param_count()

    def flops(self, h: int, w: int) -> int:
        return sum(c.flops(h, w) for c in self.dw) + self.fuse.flops(h, w)


def cgmfe_forward(block: CGMFEBlock, x: Tensor) -> Tensor:
    return block(x)


def window_cross_attention(q: Tensor, k: Tensor, v: Tensor, window: int, heads: int) -> Tensor:
    """Multi-head attention restricted to non-overlapping ``window × window`` tiles.

    Inputs are zero-padded on the bottom/right to a multiple of the window
    and the result is cropped back.
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise ValueError(f"window attention: q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if window < 1:
        raise ValueError(f"window size must be positive, got {window}")
    n, c, h, w = q.shape
    if heads < 1 or c % heads:
        raise ValueError(f"window attention: {c} channels not divisible by {heads} heads")
    d = c // heads
    ph, pw = (-h) % window, (-w) % window
    nh, nw = (h + ph) // window, (w + pw) // window

    def to_windows(t: Tensor) -> Tensor:
        t = T.pad2d(t, ph, pw)
        t = T.reshape(t, (n, heads, d, nh, window, nw, window))
        t = T.permute(t, (0, 3, 5, 1, 4, 6, 2))
        return T.reshape(t, (n * nh * nw, heads, window * window, d))

    qw, kw, vw = to_windows(q), to_windows(k), to_windows(v)
    scores = T.scale(T.matmul_batched(qw, T.permute(kw, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    out = T.matmul_batched(T.softmax_lastdim(scores), vw)
    out = T.reshape(out, (n, nh, nw, heads, window, window, d))
    out = T.permute(out, (0, 3, 6, 1, 4, 2, 5))
    out = T.reshape(out, (n, c, nh * window, nw * window))
    return T.crop2d(out, h, w)


def attention_flops(h: int, w: int, dim: int, heads: int, window: int) -> int:
    nwin = math.ceil(h / window) * math.ceil(w / window)
    tokens = window * window
    d = dim // heads
    per_head = 2 * (2 * tokens * tokens * d) + 3 * tokens * tokens
    return nwin * heads * per_head


class WCADBlock(Module):
    """Window cross-attention: queries from shallow features, keys/values from deeper ones."""

    def __init__(self, c_shallow: int, c_deep: int, cout: int, rng, dim: int = 32, heads: int = 4, window: int = 4, expansion: int = DEFAULT_EXPANSION, linear_is: bool = False):
        if dim % heads:
            raise ValueError(f"attention dim {dim} not divisible by {heads} heads")
        self.c_shallow, self.c_deep, self.cout = c_shallow, c_deep, cout
        self.dim, self.heads, self.window = dim, heads, window
        self.deep_proj = Pointwise(c_deep, c_shallow, rng)
        self.w_q = Pointwise(c_shallow, dim, rng)
        self.w_k = Pointwise(c_shallow, dim, rng)
        self.w_v = Pointwise(c_shallow, dim, rng)
        self.ffn = ISBlock(dim, cout, rng, expansion, linear_is)

    def forward(self, shallow: Tensor, deep: Tensor) -> Tensor:
        sh, sw = shallow.shape[2:]
        dh, dw = deep.shape[2:]
        if (2 * dh, 2 * dw) != (sh, sw):
            raise ValueError(
                f"WCAD: deep features {dh}x{dw} must be exactly half the shallow size {sh}x{sw}"
            )
        ctx = self.deep_proj(T.bilinear_upsample(deep, 2))
        q = self.w_q(shallow)
        attn = window_cross_attention(q, self.w_k(ctx), self.w_v(ctx), self.window, self.heads)
        return self.ffn(T.add(attn, q))

    def param_count(self) -> int:
        return sum(m.param_count() for m in (self.deep_proj, self.w_q, self.w_k, self.w_v, self.ffn))

    def flops(self, h: int, w: int) -> int:
        return (
            self.deep_proj.flops(h, w)
            + sum(m.flops(h, w) for m in (self.w_q, self.w_k, self.w_v))
            + attention_flops(h, w, self.dim, self.heads, self.window)
            + self.ffn.flops(h, w)
        )


def wcad_forward(block: WCADBlock, shallow: Tensor, deep: Tensor) -> Tensor:
    return block(shallow, deep)


class ChannelAttention(Module):
    """Shared bottleneck MLP over avg- and max-pooled channel descriptors."""

    def __init__(self, channels: int, rng, reduction: int = 8):
        if channels % reduction or channels // reduction < 1:
            raise ValueError(f"channel attention: {channels} channels not divisible by reduction {reduction}")
        self.channels, self.reduction = channels, reduction
        self.fc1 = Pointwise(channels, channels // reduction, rng)
        self.fc2 = Pointwise(channels // reduction, channels, rng)

    def attention_map(self, x: Tensor) -> Tensor:
        avg = self.fc2(T.gelu(self.fc1(T.global_avg_pool(x))))
        mx = self.fc2(T.gelu(self.fc1(T.global_max_pool(x))))
        return T.sigmoid(T.add(avg, mx))

    def forward(self, x: Tensor) -> Tensor:
        return T.broadcast_mul(x, self.attention_map(x))

    def param_count(self) -> int:
        return self.fc1.param_count() + self.fc2.param_count()

    def flops(self, h: int, w: int) -> int:
        return 2 * (self.fc1.flops(1, 1) + self.fc2.flops(1, 1))


class SpatialAttention(Module):
    """7×7 convolution over the channel-mean and channel-max maps."""

    def __init__(self, rng, kernel: int = 7):
        self.conv = Conv2d(2, 1, kernel, rng)

    def attention_map(self, x: Tensor) -> Tensor:
        stats = T.concat_channels([T.mean(x, (1,)), T.amax(x, (1,))])
        return T.sigmoid(self.conv(stats))

    def forward(self, x: Tensor) -> Tensor:
        return T.broadcast_mul(x, self.attention_map(x))

    def param_count(self) -> int:
        return self.conv.param_count()

    def flops(self, h: int, w: int) -> int:
        return self.conv.flops(h, w)


def channel_attention(block: ChannelAttention, x: Tensor) -> Tensor:
    return block(x)


def spatial_attention(block: SpatialAttention, x: Tensor) -> Tensor:
    return block(x)


class DFABlock(Module):
    """Decoder feature aggregation over a growing list of deeper features.

    The aggregated map is split three ways into channel-attention, 3×3
    convolution and spatial-attention branches, which are coupled through
    gates, added back to themselves and summarised by an IS block.
    """

    def __init__(self, in_channels: Sequence[int], branch_channels: int, cout: int, rng, expansion: int = DEFAULT_EXPANSION, reduction: int = 8, gates_open: bool = False, linear_is: bool = False):
        if len(in_channels) < 2:
            raise ValueError("DFA aggregates at least two feature maps")
        self.in_channels = tuple(in_channels)
        self.cb, self.cout = branch_channels, cout
        self.aggregate = Pointwise(sum(in_channels), 3 * branch_channels, rng)
        self.chatt = ChannelAttention(branch_channels, rng, reduction)
        self.conv = Conv2d(branch_channels, branch_channels, 3, rng)
        self.spatt = SpatialAttention(rng)
        self.gates = GateSet(3, forced_open=gates_open)
        self.fuse = ISBlock(3 * branch_channels, cout, rng, expansion, linear_is)

    def branch_outputs(self, feats: Sequence[Tensor]) -> list[Tensor]:
        if len(feats) != len(self.in_channels):
            raise ValueError(f"DFA expects {len(self.in_channels)} inputs, got {len(feats)}")
        size = feats[0].shape[2:]
        for idx, f in enumerate(feats):
            if f.shape[2:] != size:
                raise ValueError(f"DFA input {idx + 1} is {f.shape[2:]}, expected spatial size {size}")
        d1, d2, d3 = T.split_channels(self.aggregate(T.concat_channels(list(feats))), 3)
        return [self.chatt(d1), self.conv(d2), self.spatt(d3)]

    def forward(self, feats: Sequence[Tensor]) -> Tensor:
        outs = self.branch_outputs(feats)
        fused = [T.add(gated_product(outs, self.gates, m), outs[m]) for m in range(3)]
        return self.fuse(T.concat_channels(fused))

    def param_count(self) -> int:
        return (
            self.aggregate.param_count()
            + self.chatt.param_count()
            + self.conv.param_count()
            + self.spatt.param_count()
            + self.gates.param_count()
            + self.fuse.param_count()
        )

    def flops(self, h: int, w: int) -> int:
        return (
            self.aggregate.flops(h, w)
            + self.chatt.flops(h, w)
            + self.conv.flops(h, w)
            + self.spatt.flops(h, w)
            + self.fuse.flops(h, w)
        )


def dfa_forward(block: DFABlock, deep_feats: Sequence[Tensor]) -> Tensor:
    return block(deep_feats)
