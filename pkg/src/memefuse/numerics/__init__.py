"""Minimal deterministic tensor engine: float64 arrays, reverse-mode tape, Adam."""

from .checkpoint import (config_hash, load_checkpoint, restore_params,
                         save_checkpoint)
from .optim import AdamState, LrSchedule, adam_step
from .rng import (STREAM_AUGMENT, STREAM_BATCH, STREAM_DROPOUT, STREAM_PARAMS,
                  STREAM_SAMPLER, STREAM_SPLIT, STREAM_WORLD, RngBank, RngState)
from .tensor import (GradTable, Tape, Tensor, add, as_tensor, clip,
                     concatenate, cross_entropy_logits, dropout,
                     embedding_lookup, gelu, layer_norm, log, masked_fill,
                     matmul, mul, relu, reshape, scale, slice_axis, softmax,
                     stack, sub, tmean, transpose, tsum)

__all__ = [
    "AdamState", "GradTable", "LrSchedule", "RngBank", "RngState", "Tape",
    "Tensor", "STREAM_AUGMENT", "STREAM_BATCH", "STREAM_DROPOUT",
    "STREAM_PARAMS", "STREAM_SAMPLER", "STREAM_SPLIT", "STREAM_WORLD",
    "adam_step", "add", "as_tensor", "clip", "concatenate", "config_hash",
    "cross_entropy_logits", "dropout", "embedding_lookup", "gelu",
    "layer_norm", "load_checkpoint", "log", "masked_fill", "matmul", "mul",
    "relu", "reshape", "restore_params", "save_checkpoint", "scale",
    "slice_axis", "softmax", "stack", "sub", "tmean", "transpose", "tsum",
]
