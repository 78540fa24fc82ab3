from .tensor import (
    DimensionError, DomainError, NonFiniteError, TapeError, Tensor,
    add, backward, clamp, concat, contract, conv2d, conv_transpose2d, custom_op,
    default_dtype, div, elementwise, exp, getitem, linear, log, log_softmax, maximum,
    mean, mul, no_grad, parameter, precision, reshape, rsqrt, scale, sigmoid, silu,
    softmax, softplus, square, stack, stop_gradient, straight_through, sub, sum_,
    tanh, transpose, value_and_grad,
)
from .optim import OptimizerState, agc_clip, laprop_step
