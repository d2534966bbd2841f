"""
Verificación de gradientes por diferencias centrales.

Se usa en las pruebas para contrastar el backward de cada operación y de los
grafos compuestos contra (f(x+ε) − f(x−ε)) / 2ε, ε = 1e-5.
"""
import logging
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from core.tensor import GradTape, Tensor

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """‖a − n‖ / (‖a‖ + ‖n‖); si ambos gradientes se anulan devuelve la diferencia absoluta."""
    diff = float(np.linalg.norm(analytic - numeric))
    scale = float(np.linalg.norm(analytic) + np.linalg.norm(numeric))
    if scale < 1e-7:
        return diff
    return diff / scale


def numeric_gradient(fn: Callable[[], Tensor], tensor: Tensor, step: float = DEFAULT_STEP,
                     indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Gradiente numérico de fn() respecto a tensor (solo en las posiciones indicadas)."""
    flat = tensor.data.reshape(-1)
    grad = np.zeros_like(flat)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        original = flat[i]
        flat[i] = original + step
        plus = fn().item()
        flat[i] = original - step
        minus = fn().item()
        flat[i] = original
        grad[i] = (plus - minus) / (2.0 * step)
    return grad.reshape(tensor.shape)


def check_gradients(fn: Callable[[], Tensor], tensors: Dict[str, Tensor], step: float = DEFAULT_STEP,
                    max_elements: Optional[int] = None, seed: int = 0) -> Dict[str, float]:
    """
    Compara gradiente analítico y numérico para cada tensor.

    fn construye la pérdida escalar desde cero en cada llamada. Con max_elements
    se muestrea un subconjunto fijo de posiciones por tensor.

    Retorna:
        Dict[str, float]: error relativo por nombre de tensor.
    """
    for tensor in tensors.values():
        tensor.zero_grad()
    with GradTape() as tape:
        loss = fn()
    tape.backward(loss)

    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}
    for name, tensor in tensors.items():
        analytic = np.zeros(tensor.shape) if tensor.grad is None else tensor.grad.copy()
        indices = None
        if max_elements is not None and tensor.size > max_elements:
            indices = np.sort(rng.choice(tensor.size, size=max_elements, replace=False))
        numeric = numeric_gradient(fn, tensor, step=step, indices=indices)
        if indices is not None:
            analytic = analytic.reshape(-1)[indices]
            numeric = numeric.reshape(-1)[indices]
        errors[name] = relative_error(analytic, numeric)
        logger.debug(f"gradcheck {name}: error relativo {errors[name]:.2e}")
    return errors
