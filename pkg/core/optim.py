"""
SGD con momentum de Nesterov y weight decay L2 sumado al gradiente.

Por parámetro:
    g = grad + weight_decay · p
    v = momentum · v + g
    g = g + momentum · v        (solo con nesterov)
    p = p − lr · g
"""
import logging
from typing import Dict, Iterable, Optional

import numpy as np

from common.error_handlers import OptimizerError
from core.params import ModelParams

logger = logging.getLogger(__name__)


class SgdState:
    """
    Hiperparámetros del optimizador y un buffer de velocidad por parámetro.

    Atributos:
        learning_rate (float): tasa de aprendizaje actual (el trainer la ajusta por época).
        momentum (float): coeficiente μ.
        weight_decay (float): coeficiente L2.
        nesterov (bool): usar la corrección de Nesterov.
        velocities (Dict[str, np.ndarray]): se crean en cero en el primer paso.
    """

    def __init__(self, learning_rate: float, momentum: float = 0.0, weight_decay: float = 0.0, nesterov: bool = False):
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.nesterov = bool(nesterov)
        self.velocities: Dict[str, np.ndarray] = {}

    def reset(self) -> None:
        self.velocities = {}

    def __repr__(self) -> str:
        return (f"SgdState(lr={self.learning_rate}, momentum={self.momentum}, "
                f"weight_decay={self.weight_decay}, nesterov={self.nesterov}, buffers={len(self.velocities)})")


def sgd_step(params: ModelParams, state: SgdState, names: Optional[Iterable[str]] = None) -> None:
    """
    Aplica un paso de SGD sobre los parámetros indicados (todos por defecto).

    Los gradientes no se tocan; el llamador los reinicia.

    Lanza:
        OptimizerError: si algún parámetro a actualizar no tiene gradiente.
    """
    selected = list(params.names() if names is None else names)
    missing = [name for name in selected if params[name].grad is None]
    if missing:
        raise OptimizerError(f"parámetros sin gradiente: {', '.join(missing)}")

    for name in selected:
        tensor = params[name]
        grad = tensor.grad + state.weight_decay * tensor.data
        velocity = state.velocities.get(name)
        if velocity is None:
            velocity = np.zeros_like(tensor.data)
        velocity = state.momentum * velocity + grad
        state.velocities[name] = velocity
        if state.nesterov:
            grad = grad + state.momentum * velocity
        else:
            grad = velocity
        tensor.data = tensor.data - state.learning_rate * grad
