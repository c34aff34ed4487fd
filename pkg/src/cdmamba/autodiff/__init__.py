"""Minimal dense-tensor engine with reverse-mode autodiff."""

from .tensor import (
    Tensor,
    absolute,
    add,
    add_channel_bias,
    as_tensor,
    backward,
    concat,
    debug_guard_enabled,
    div,
    exp,
    leaky_relu,
    load_tsr,
    log,
    make_node,
    matmul,
    mul,
    no_grad,
    permute,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    save_tsr,
    scale,
    set_debug_guard,
    sigmoid,
    silu,
    softmax,
    softplus,
    split,
    sub,
)
from .functional import (
    bilinear_resize,
    conv1d_depthwise,
    conv2d,
    conv2d_depthwise,
    image_to_tokens,
    layer_norm,
    tokens_to_image,
)
from .gradcheck import grad_check

__all__ = [
    "Tensor",
    "absolute",
    "add",
    "add_channel_bias",
    "as_tensor",
    "backward",
    "bilinear_resize",
    "concat",
    "conv1d_depthwise",
    "conv2d",
    "conv2d_depthwise",
    "debug_guard_enabled",
    "div",
    "exp",
    "grad_check",
    "image_to_tokens",
    "layer_norm",
    "leaky_relu",
    "load_tsr",
    "log",
    "make_node",
    "matmul",
    "mul",
    "no_grad",
    "permute",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "reshape",
    "save_tsr",
    "scale",
    "set_debug_guard",
    "sigmoid",
    "silu",
    "softmax",
    "softplus",
    "split",
    "sub",
    "tokens_to_image",
]
