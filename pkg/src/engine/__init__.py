# Tensor engine
from .tensor import (
    Graph,
    Tensor,
    apply_op,
    as_tensor,
    backward,
    is_grad_enabled,
    no_grad,
)
from .ops import (
    broadcast_add,
    broadcast_to,
    clamp_min,
    concat,
    conv2d,
    conv3d,
    interp3d,
    log,
    relu,
    resize3d,
    softmax,
)
from .optim import AdamState, adam_step
