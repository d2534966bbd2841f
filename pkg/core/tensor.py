"""
Tensor denso con gradiente opcional y la cinta (GradTape) que registra las operaciones.

Todo es float64 para que los gradient checks puedan usar tolerancias apretadas.
La cinta activa vive en un ContextVar: dos grafos evaluados en hilos distintos
nunca comparten estado mutable.
"""
import logging
from contextvars import ContextVar
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from common.error_handlers import DimensionError, UsageError

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """
    Arreglo n-dimensional de reales con acumulador de gradiente perezoso.

    Atributos:
        data (np.ndarray): valores en orden row-major, float64.
        requires_grad (bool): si backward debe acumular gradiente aquí.
        grad (Optional[np.ndarray]): misma forma que data, se crea en el primer backward.
        name (Optional[str]): nombre del parámetro, útil en mensajes de error.
    """

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, copy: bool = True):
        array = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
        if any(extent <= 0 for extent in array.shape):
            raise DimensionError(f"todas las dimensiones deben ser positivas, se recibió {array.shape}")
        self.data: np.ndarray = array
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._produced_by_op = False

    # ----- propiedades básicas -----
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return not self._produced_by_op

    def item(self) -> float:
        if self.size != 1:
            raise UsageError(f"item() solo aplica a tensores de un elemento, forma {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise DimensionError(
                f"gradiente con forma {grad.shape} para tensor {self.name or ''} de forma {self.shape}",
                axis="grad",
            )
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + grad

    # ----- azúcar sintáctica; la lógica vive en core.ops -----
    def __add__(self, other):
        from core import ops
        return ops.add(self, ops.as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        from core import ops
        return ops.sub(self, ops.as_tensor(other))

    def __rsub__(self, other):
        from core import ops
        return ops.sub(ops.as_tensor(other), self)

    def __mul__(self, other):
        from core import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, ops.as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        from core import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from core import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from core import ops
        return ops.take(self, index)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


class TapeNode:
    """Una operación registrada: entradas, salida y regla de backward."""

    __slots__ = ("op_name", "inputs", "output", "backward_fn")

    def __init__(self, op_name: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn: BackwardFn):
        self.op_name = op_name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_ACTIVE_TAPE: ContextVar[Optional["GradTape"]] = ContextVar("ca3_active_tape", default=None)


class GradTape:
    """
    Cinta de operaciones para diferenciación en modo reverso.

    Uso típico:
        with GradTape() as tape:
            loss = ...
        tape.backward(loss)

    Las operaciones solo se graban si hay una cinta activa y alguna entrada
    pide gradiente; fuera de la cinta todo corre en modo inferencia.
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self._tokens = []

    def __enter__(self) -> "GradTape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op_name: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn: BackwardFn) -> None:
        output._produced_by_op = True
        self.nodes.append(TapeNode(op_name, inputs, output, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """
        Recorre la cinta en orden inverso y acumula gradientes en las hojas.

        Lanza:
            UsageError: si loss no es escalar o no salió de esta cinta.
        """
        if loss.size != 1:
            raise UsageError(f"backward requiere una pérdida escalar, se recibió forma {loss.shape}")
        produced = {id(node.output) for node in self.nodes}
        if id(loss) not in produced and not (loss.requires_grad and loss.is_leaf):
            raise UsageError("la pérdida no es alcanzable desde esta cinta")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: Dict[int, Tensor] = {}
        if loss.is_leaf and loss.requires_grad:
            leaves[id(loss)] = loss

        for node in reversed(self.nodes):
            grad_out = grads.pop(id(node.output), None)
            if grad_out is None:
                continue
            input_grads = node.backward_fn(grad_out)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                grads[key] = grads[key] + grad if key in grads else grad
                if tensor.is_leaf:
                    leaves[key] = tensor

        for key, tensor in leaves.items():
            grad = grads.get(key)
            if grad is not None:
                tensor.accumulate_grad(grad)
        logger.debug(f"backward sobre {len(self.nodes)} nodos, {len(leaves)} hojas con gradiente")


def active_tape() -> Optional[GradTape]:
    return _ACTIVE_TAPE.get()


def backward(loss: Tensor, tape: GradTape) -> None:
    """Atajo funcional para tape.backward(loss)."""
    tape.backward(loss)
