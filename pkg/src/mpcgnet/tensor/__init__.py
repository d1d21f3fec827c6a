from .tensor import (
    NonFiniteError,
    Tape,
    Tensor,
    backward,
    get_default_dtype,
    ones,
    precision,
    tensor,
    zeros,
)
from .ops import (
    add,
    add_scalar,
    amax,
    bce_with_logits,
    bilinear_upsample,
    broadcast_mul,
    concat_channels,
    conv2d,
    crop2d,
    depthwise_conv2d,
    div,
    gelu,
    global_avg_pool,
    global_max_pool,
    group_norm,
    matmul_batched,
    maxpool2d,
    mean,
    mean_all,
    mul,
    pad2d,
    permute,
    pointwise_conv,
    power_select,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_channels,
    softmax_lastdim,
    split_channels,
    sum_all,
)
from .gradcheck import finite_diff_check
