from .functional import (
    Trace,
    backward,
    cross_entropy,
    forward,
    gm_loss,
    input_gradient,
    logits,
    per_sample_cross_entropy,
    second_order_input_grad_backward,
    softmax,
)
from .optim import SGD, Adam, MultiStep, OptimizerState, optimizer_step, scaled_milestones
from .units import (
    Conv2d,
    EngineError,
    Flatten,
    Linear,
    MaxPool2x2,
    Params,
    ReLU,
    ShapeError,
    UnitSpec,
    clone_params,
    infer_shapes,
    init_params,
    params_equal,
    validate_units,
)

__all__ = [
    "Trace", "backward", "cross_entropy", "forward", "gm_loss", "input_gradient", "logits",
    "per_sample_cross_entropy", "second_order_input_grad_backward", "softmax",
    "SGD", "Adam", "MultiStep", "OptimizerState", "optimizer_step", "scaled_milestones",
    "Conv2d", "EngineError", "Flatten", "Linear", "MaxPool2x2", "Params", "ReLU", "ShapeError",
    "UnitSpec", "clone_params", "infer_shapes", "init_params", "params_equal", "validate_units",
]
