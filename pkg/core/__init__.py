# Tensor-core: autodiff, operaciones, parámetros y optimizador
from .tensor import GradTape, Tensor, active_tape, backward
from .params import ModelParams
from .optim import SgdState, sgd_step

__all__ = [
    "Tensor",
    "GradTape",
    "active_tape",
    "backward",
    "ModelParams",
    "SgdState",
    "sgd_step",
]
