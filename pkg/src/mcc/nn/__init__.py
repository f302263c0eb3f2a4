from mcc.nn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from mcc.nn.functional import (
    NonFiniteError,
    bce_with_logits,
    context_attention,
    gelu,
    layer_norm,
    linear,
    masked_attention,
    softmax,
    softmax_cross_entropy,
)
from mcc.nn.gradcheck import GradCheckResult, grad_check
from mcc.nn.optim import AdamState, adam_step, cosine_lr

__all__ = [
    "AdamState",
    "CheckpointError",
    "GradCheckResult",
    "NonFiniteError",
    "adam_step",
    "bce_with_logits",
    "context_attention",
    "cosine_lr",
    "gelu",
    "grad_check",
    "layer_norm",
    "linear",
    "load_checkpoint",
    "masked_attention",
    "save_checkpoint",
    "softmax",
    "softmax_cross_entropy",
]
