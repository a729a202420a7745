from .gradcheck import grad_check
from .kernels import BACKEND
from .layers import (
    Conv2D,
    Dense,
    Flatten,
    Layer,
    LayerSpec,
    ParamGroup,
    ReLU,
    Sequential,
    ShapeMismatch,
    Softmax,
    build_layer,
    softmax,
)
from .losses import cross_entropy, mse_loss
from .optim import SGD, Adam, make_optimizer, sgd_step

__all__ = [
    "BACKEND", "Adam", "Conv2D", "Dense", "Flatten", "Layer", "LayerSpec", "ParamGroup",
    "ReLU", "SGD", "Sequential", "ShapeMismatch", "Softmax", "build_layer", "cross_entropy",
    "grad_check", "make_optimizer", "mse_loss", "sgd_step", "softmax",
]
