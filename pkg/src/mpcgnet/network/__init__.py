from .model import (
    INPUT_DIVISOR,
    STRIDES,
    CGMFEBypass,
    DFABypass,
    EncoderSpec,
    Interaction,
    MPCGNet,
    NetConfig,
    StageFeatures,
    ToyEncoder,
    WCADBypass,
    combine_interaction,
    count_flops,
    count_params,
    count_params_walk,
    encoder_interaction,
)
from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    read_config_sidecar,
    read_tensors,
    save_checkpoint,
    write_tensors,
)
