"""Small reverse-mode autodiff engine over numpy arrays."""

from . import ops
from .checkpoint import CheckpointError, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from .gradcheck import check_gradients, numeric_grad, relative_error
from .nn import LayerNorm, Linear, MLP, Module, MultiHeadAttention, Parameter, TransformerBlock
from .ops import OPS, forward_op
from .optim import OptimizerState, adamw_step, step_lr
from .tensor import (
    ContractError,
    NumericalError,
    ShapeError,
    Tensor,
    get_default_dtype,
    no_grad,
    precision,
    set_default_dtype,
)

__all__ = [
    "OPS",
    "CheckpointError",
    "ContractError",
    "LayerNorm",
    "Linear",
    "MLP",
    "Module",
    "MultiHeadAttention",
    "NumericalError",
    "OptimizerState",
    "Parameter",
    "ShapeError",
    "Tensor",
    "TransformerBlock",
    "adamw_step",
    "check_gradients",
    "decode_checkpoint",
    "encode_checkpoint",
    "forward_op",
    "get_default_dtype",
    "load_checkpoint",
    "no_grad",
    "numeric_grad",
    "ops",
    "precision",
    "relative_error",
    "save_checkpoint",
    "set_default_dtype",
    "step_lr",
]
