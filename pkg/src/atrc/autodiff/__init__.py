from . import functional
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradcheckReport, NonFiniteError, gradcheck
from .nn import BatchNorm2d, Conv2d, ConvBNAct, Module, Parameter
from .optim import AdamState, SGDState, adam_step, poly_lr, sgd_step
from .tensor import (
    ShapeError,
    Tensor,
    absolute,
    add,
    clamp_min,
    concat,
    div,
    einsum,
    exp,
    getitem,
    log,
    log_softmax,
    make_op,
    matmul,
    mean,
    mul,
    no_grad,
    pad_spatial,
    permute,
    relu,
    reshape,
    sigmoid,
    softmax,
    softplus,
    sqrt,
    stack,
    stop_gradient,
    sub,
    tensor,
    transpose,
    tsum,
    zeros,
)

softmax_axis = softmax

__all__ = [name for name in dir() if not name.startswith("_")]
