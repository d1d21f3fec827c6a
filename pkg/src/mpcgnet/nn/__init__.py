from .module import Conv2d, DepthwiseConv2d, GroupNorm, Module, Pointwise, norm_groups
from .gates import GateSet, gate_values, gated_product
from .blocks import (
    CGMFEBlock,
    ChannelAttention,
    DFABlock,
    ISBlock,
    SpatialAttention,
    WCADBlock,
    attention_flops,
    cgmfe_forward,
    channel_attention,
    dfa_forward,
    is_forward,
    spatial_attention,
    wcad_forward,
    window_cross_attention,
)
