from .check import gradcheck, numeric_grad
from .nn import (conv2d, conv_params, dwt2, gelu, idwt2, layer_norm, linear, mse_loss, softmax, swin_block,
                 swin_params, window_attention)
from .optim import OptimizerState, adamw_step, zero_grads
from .tensor import Tape, TapeError, Tensor, active_tape, add, backward, concat, linear_map, matmul, mul, pad, \
    reshape, roll, sub, transpose

__all__ = [
    "Tape", "TapeError", "Tensor", "active_tape", "add", "backward", "concat", "linear_map", "matmul", "mul", "pad",
    "reshape", "roll", "sub", "transpose",
    "conv2d", "conv_params", "dwt2", "gelu", "idwt2", "layer_norm", "linear", "mse_loss", "softmax", "swin_block",
    "swin_params", "window_attention",
    "OptimizerState", "adamw_step", "zero_grads", "gradcheck", "numeric_grad",
]
