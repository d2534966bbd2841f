"""
Manejo centralizado de errores para todo el paquete.

Cada error del dominio hereda de BaseError y trae su propio código de salida,
así los comandos de la CLI no tienen que decidir qué número devolver: solo
dejan subir la excepción y el decorador handle_errors la traduce.

Códigos de salida estables (documentados en el README de la CLI):
- 0 todo bien
- 1 fallo inesperado
- 2 uso incorrecto, archivo faltante o validación
- 3 divergencia durante el entrenamiento
- 4 checkpoint incompatible (versión, integridad o formas)
- 5 error de protocolo en la evaluación
"""
import logging
from functools import wraps
from typing import Callable, Iterable, Optional

from pydantic import ValidationError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_DIVERGENCE = 3
EXIT_INCOMPATIBLE = 4
EXIT_PROTOCOL = 5


class BaseError(Exception):
    """
    Excepción base para errores del dominio con código de salida y detalle.
    """
    exit_code: int = EXIT_UNEXPECTED

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code
        super().__init__(detail)


# ===== Errores numéricos (tensor-core y redes) =====

class DimensionError(BaseError, ValueError):
    """Formas incompatibles; el mensaje nombra el eje culpable."""
    exit_code = EXIT_USAGE

    def __init__(self, detail: str, axis: Optional[str] = None):
        self.axis = axis
        if axis:
            detail = f"{detail} (eje: {axis})"
        super().__init__(detail)


class RangeError(BaseError, IndexError):
    """Rango vacío o fuera de límites."""
    exit_code = EXIT_USAGE


class ConfigurationError(BaseError, ValueError):
    """Configuración imposible (divisibilidad, batch de 1 en BN, etc.)."""
    exit_code = EXIT_USAGE


class LabelError(BaseError, ValueError):
    """Etiqueta fuera de rango o faltante."""
    exit_code = EXIT_USAGE


class UsageError(BaseError, ValueError):
    """Uso incorrecto de la API (por ejemplo backward sobre un no-escalar)."""
    exit_code = EXIT_USAGE


class OptimizerError(BaseError, RuntimeError):
    """El optimizador encontró un parámetro sin gradiente."""
    exit_code = EXIT_UNEXPECTED


class ModeError(BaseError, RuntimeError):
    """El modelo está en el modo equivocado (train vs eval)."""
    exit_code = EXIT_USAGE


# ===== Entrenamiento y checkpoints =====

class DivergenceError(BaseError, RuntimeError):
    """La pérdida dejó de ser finita; el último checkpoint bueno se conserva."""
    exit_code = EXIT_DIVERGENCE

    def __init__(self, detail: str, last_good_checkpoint: Optional[str] = None):
        self.last_good_checkpoint = last_good_checkpoint
        super().__init__(detail)


class CheckpointVersionError(BaseError, ValueError):
    exit_code = EXIT_INCOMPATIBLE


class CheckpointIntegrityError(BaseError, ValueError):
    exit_code = EXIT_INCOMPATIBLE


class IncompatibleCheckpointError(BaseError, ValueError):
    """El checkpoint no encaja con la configuración; lista los parámetros culpables."""
    exit_code = EXIT_INCOMPATIBLE

    def __init__(self, detail: str, offending: Iterable[str] = ()):
        self.offending = list(offending)
        if self.offending:
            detail = f"{detail}: {', '.join(self.offending)}"
        super().__init__(detail)


# ===== Datos =====

class SpecValidationError(BaseError, ValueError):
    exit_code = EXIT_USAGE


class DatasetParseError(BaseError, ValueError):
    """Fila de metadatos mal formada; siempre lleva el número de línea."""
    exit_code = EXIT_USAGE

    def __init__(self, detail: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            detail = f"línea {line_number}: {detail}"
        super().__init__(detail)


class DatasetIntegrityError(BaseError, ValueError):
    exit_code = EXIT_USAGE


class EmptyDatasetError(BaseError, ValueError):
    exit_code = EXIT_USAGE


class ArtifactIOError(BaseError, OSError):
    """No se pudo leer o escribir un artefacto (directorio sin permisos, archivo faltante)."""
    exit_code = EXIT_USAGE


# ===== Evaluación =====

class ProtocolError(BaseError, ValueError):
    """Una identidad de consulta no tiene coincidencias en la galería."""
    exit_code = EXIT_PROTOCOL

    def __init__(self, detail: str, identities: Iterable[int] = ()):
        self.identities = sorted(set(int(i) for i in identities))
        if self.identities:
            detail = f"{detail}: {self.identities}"
        super().__init__(detail)


def handle_errors(fn: Callable[..., int]) -> Callable[..., int]:
    """
    Decorador para los comandos de la CLI.

    Convierte las excepciones en códigos de salida: los BaseError usan su propio
    exit_code, los errores de validación de pydantic salen con 2 y cualquier otra
    cosa se registra con traceback y sale con 1.
    """
    @wraps(fn)
    def wrapper(*args, **kwargs) -> int:
        try:
            result = fn(*args, **kwargs)
            return EXIT_OK if result is None else int(result)
        except BaseError as e:
            logger.error(f"❌ {fn.__name__}: {e.detail} (código {e.exit_code})")
            return e.exit_code
        except ValidationError as e:
            logger.error(f"❌ Configuración inválida en {fn.__name__}: {e}")
            return EXIT_USAGE
        except Exception as e:
            logger.exception(f"Error no esperado en {fn.__name__}: {e}")
            return EXIT_UNEXPECTED
    return wrapper
