"""
Almacén de parámetros con nombre (ModelParams) e inicializadores.

Cada parámetro pertenece a un grupo (stem, attribute, appearance, merged) y los
grupos se inicializan con generadores derivados de (seed, grupo). Así un modelo
sin rama de atributos arranca con exactamente los mismos pesos de stem y
apariencia que el modelo completo con la misma semilla.
"""
import logging
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from common.error_handlers import ConfigurationError, IncompatibleCheckpointError
from core.ops import BatchNormStats
from core.tensor import Tensor

logger = logging.getLogger(__name__)

GROUP_STEM = "stem"
GROUP_ATTRIBUTE = "attribute"
GROUP_APPEARANCE = "appearance"
GROUP_MERGED = "merged"

GROUP_CODES = {
    GROUP_STEM: 1,
    GROUP_ATTRIBUTE: 2,
    GROUP_APPEARANCE: 3,
    GROUP_MERGED: 4,
}


def group_rng(seed: int, group: str) -> np.random.Generator:
    """Generador independiente por grupo de parámetros."""
    if group not in GROUP_CODES:
        raise ConfigurationError(f"grupo de parámetros desconocido: {group}")
    return np.random.default_rng(np.random.SeedSequence([int(seed), GROUP_CODES[group]]))


def fan_in_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, gain: float = np.sqrt(2.0)) -> np.ndarray:
    """Normal con desviación gain/sqrt(fan_in) (He para ReLU por defecto)."""
    return rng.standard_normal(shape) * (gain / np.sqrt(fan_in))


class ModelParams:
    """
    Parámetros aprendibles por nombre más los buffers de BatchNorm.

    Atributos:
        tensors (Dict[str, Tensor]): parámetros en orden de registro.
        groups (Dict[str, str]): grupo de cada parámetro.
        buffers (Dict[str, BatchNormStats]): estadísticas móviles por capa BN.
    """

    def __init__(self):
        self.tensors: Dict[str, Tensor] = {}
        self.groups: Dict[str, str] = {}
        self.buffers: Dict[str, BatchNormStats] = {}

    def add(self, name: str, value: np.ndarray, group: str) -> Tensor:
        if name in self.tensors:
            raise ConfigurationError(f"parámetro duplicado: {name}")
        tensor = Tensor(value, requires_grad=True, name=name)
        self.tensors[name] = tensor
        self.groups[name] = group
        return tensor

    def add_batch_norm(self, name: str, channels: int, group: str) -> None:
        self.add(f"{name}.gamma", np.ones(channels), group)
        self.add(f"{name}.beta", np.zeros(channels), group)
        self.buffers[name] = BatchNormStats(channels)

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.tensors[name]
        except KeyError:
            raise ConfigurationError(f"parámetro inexistente: {name}")

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self, groups: Optional[Iterable[str]] = None) -> List[str]:
        if groups is None:
            return list(self.tensors)
        wanted = set(groups)
        return [name for name in self.tensors if self.groups[name] in wanted]

    def group_names(self) -> List[str]:
        return sorted(set(self.groups.values()), key=lambda g: GROUP_CODES.get(g, 99))

    def zero_grad(self) -> None:
        for tensor in self.tensors.values():
            tensor.zero_grad()

    def snapshot(self, groups: Optional[Iterable[str]] = None) -> Dict[str, np.ndarray]:
        """Copia de los valores actuales (para comparar antes/después de una etapa)."""
        return {name: self.tensors[name].data.copy() for name in self.names(groups)}

    def buffer_arrays(self) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
        return {name: (stats.mean, stats.var) for name, stats in self.buffers.items()}

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def assign(self, values: Dict[str, np.ndarray], buffers: Dict[str, Tuple[np.ndarray, np.ndarray]]) -> None:
        """
        Carga valores guardados; falla listando todo parámetro que no encaja.

        Lanza:
            IncompatibleCheckpointError: nombres faltantes, sobrantes o con forma distinta.
        """
        offending = []
        for name, tensor in self.tensors.items():
            if name not in values:
                offending.append(f"{name} (faltante)")
            elif values[name].shape != tensor.shape:
                offending.append(f"{name} {values[name].shape} != {tensor.shape}")
        offending.extend(f"{name} (sobrante)" for name in values if name not in self.tensors)
        for name, stats in self.buffers.items():
            if name not in buffers:
                offending.append(f"{name} (buffer faltante)")
            elif buffers[name][0].shape != stats.mean.shape:
                offending.append(f"{name} (buffer {buffers[name][0].shape} != {stats.mean.shape})")
        if offending:
            raise IncompatibleCheckpointError("el checkpoint no encaja con la configuración", offending)

        for name, tensor in self.tensors.items():
            tensor.data = np.array(values[name], dtype=np.float64)
            tensor.grad = None
        for name, stats in self.buffers.items():
            stats.mean = np.array(buffers[name][0], dtype=np.float64)
            stats.var = np.array(buffers[name][1], dtype=np.float64)
