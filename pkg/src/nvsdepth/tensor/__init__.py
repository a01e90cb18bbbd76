from .adam import AdamState, adam_step
from .checkpoint import load_checkpoint, save_checkpoint
from .core import Tape, Tensor, active_tape, backward, check_finite
from .ops import (
    add,
    concat_channels,
    conv2d,
    l1_mean,
    leaky_relu,
    relu,
    scale_shift,
    sigmoid,
    slice_channels,
    upsample_nearest2x,
    weighted_sum,
)

__all__ = [
    "AdamState", "Tape", "Tensor", "active_tape", "adam_step", "add", "backward",
    "check_finite", "concat_channels", "conv2d", "l1_mean", "leaky_relu",
    "load_checkpoint", "relu", "save_checkpoint", "scale_shift", "sigmoid",
    "slice_channels", "upsample_nearest2x", "weighted_sum",
]
