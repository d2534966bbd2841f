"""
Checkpoints versionados: parámetros, velocidades del optimizador, estadísticas
de BN, esquema/configuración y posición del entrenamiento.

Contenedor: un .npz (zip de arreglos) con
    __meta__            JSON (UTF-8) con formato, versión, ModelConfig, optimizador,
                        estado del trainer y un digest SHA-256 de todos los arreglos
    param/<nombre>      float64 little-endian
    velocity/<nombre>   float64 little-endian
    buffer/<nombre>/mean, buffer/<nombre>/var

La escritura es atómica: temporal en el mismo directorio + os.replace.
"""
import hashlib
import json
import logging
import os
import tempfile
import zipfile
from typing import Any, Dict, NamedTuple, Optional, Tuple

import numpy as np

from common.error_handlers import (
    ArtifactIOError,
    CheckpointIntegrityError,
    CheckpointVersionError,
    IncompatibleCheckpointError,
)
from common.io_utils import ensure_dir
from core.optim import SgdState
from schemas import AttributeSchema, ModelConfig
from services.model_service import CA3Net

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ca3-checkpoint"
CHECKPOINT_VERSION = 1
META_KEY = "__meta__"


class LoadedCheckpoint(NamedTuple):
    model: CA3Net
    optimizer: SgdState
    trainer_state: Optional[Dict[str, Any]]
    meta: Dict[str, Any]


def _digest(arrays: Dict[str, np.ndarray]) -> str:
    sha = hashlib.sha256()
    for key in sorted(arrays):
        sha.update(key.encode("utf-8"))
        sha.update(np.ascontiguousarray(arrays[key]).tobytes())
    return sha.hexdigest()


def _collect_arrays(model: CA3Net, optimizer: Optional[SgdState]) -> Dict[str, np.ndarray]:
    arrays: Dict[str, np.ndarray] = {}
    for name, tensor in model.params.tensors.items():
        arrays[f"param/{name}"] = tensor.data.astype("<f8")
    if optimizer is not None:
        for name, velocity in optimizer.velocities.items():
            arrays[f"velocity/{name}"] = velocity.astype("<f8")
    for name, (mean, var) in model.params.buffer_arrays().items():
        arrays[f"buffer/{name}/mean"] = mean.astype("<f8")
        arrays[f"buffer/{name}/var"] = var.astype("<f8")
    return arrays


def save_checkpoint(model: CA3Net, optimizer: Optional[SgdState], path: str,
                    trainer_state: Optional[Dict[str, Any]] = None) -> str:
    """
    Guarda modelo + optimizador (+ posición del trainer) en path.

    Lanza:
        ArtifactIOError: si el directorio destino no se puede escribir.
    """
    arrays = _collect_arrays(model, optimizer)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.model_dump(mode="json"),
        "mode": model.mode.value,
        "optimizer": None if optimizer is None else {
            "learning_rate": optimizer.learning_rate,
            "momentum": optimizer.momentum,
            "weight_decay": optimizer.weight_decay,
            "nesterov": optimizer.nesterov,
        },
        "trainer_state": trainer_state,
        "digest": _digest(arrays),
    }
    arrays[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)

    directory = ensure_dir(os.path.dirname(os.path.abspath(path)))
    try:
        fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".ckpt_", suffix=".npz")
        with os.fdopen(fd, "wb") as handle:
            np.savez(handle, **arrays)
        os.replace(tmp_path, path)
    except OSError as e:
        raise ArtifactIOError(f"no se pudo escribir el checkpoint {path}: {e}")
    logger.debug(f"Checkpoint guardado en {path} ({len(arrays) - 1} arreglos)")
    return path


def _read_archive(path: str) -> Dict[str, np.ndarray]:
    if not os.path.isfile(path):
        raise ArtifactIOError(f"checkpoint no encontrado: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            return {key: archive[key] for key in archive.files}
    except (zipfile.BadZipFile, EOFError, ValueError, OSError, KeyError) as e:
        raise CheckpointIntegrityError(f"checkpoint ilegible o truncado {path}: {e}")


def read_checkpoint(path: str) -> Dict[str, Any]:
    """
    Lee y verifica un checkpoint; devuelve meta + arreglos separados por tipo.

    Lanza:
        CheckpointIntegrityError: archivo truncado, sin metadatos o con digest distinto.
        CheckpointVersionError: formato o versión no soportados.
    """
    arrays = _read_archive(path)
    if META_KEY not in arrays:
        raise CheckpointIntegrityError(f"{path}: faltan los metadatos")
    try:
        meta = json.loads(arrays.pop(META_KEY).tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointIntegrityError(f"{path}: metadatos corruptos ({e})")
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointVersionError(f"{path}: formato desconocido {meta.get('format')!r}")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: versión {meta.get('version')} no soportada (se espera {CHECKPOINT_VERSION})"
        )
    if _digest(arrays) != meta.get("digest"):
        raise CheckpointIntegrityError(f"{path}: el digest no coincide, el archivo está dañado")

    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    velocities = {k[len("velocity/"):]: v for k, v in arrays.items() if k.startswith("velocity/")}
    buffers: Dict[str, list] = {}
    for key, value in arrays.items():
        if key.startswith("buffer/"):
            name, kind = key[len("buffer/"):].rsplit("/", 1)
            buffers.setdefault(name, [None, None])[0 if kind == "mean" else 1] = value
    return {"meta": meta, "params": params, "velocities": velocities,
            "buffers": {k: (v[0], v[1]) for k, v in buffers.items()}}


def load_into(model: CA3Net, path: str, optimizer: Optional[SgdState] = None) -> Dict[str, Any]:
    """
    Carga un checkpoint en un modelo ya construido (su configuración manda).

    Lanza:
        IncompatibleCheckpointError: lista de parámetros cuyo nombre o forma no encaja.
    """
    content = read_checkpoint(path)
    model.params.assign(content["params"], content["buffers"])
    if optimizer is not None:
        unknown = [n for n in content["velocities"] if n not in model.params]
        if unknown:
            raise IncompatibleCheckpointError("velocidades para parámetros inexistentes", unknown)
        optimizer.velocities = {n: np.array(v, dtype=np.float64) for n, v in content["velocities"].items()}
    return content["meta"]


def load_checkpoint(path: str, expected_config: Optional[ModelConfig] = None) -> LoadedCheckpoint:
    """
    Reconstruye modelo y optimizador desde el checkpoint.

    Con expected_config el modelo se arma con esa configuración y cualquier
    diferencia de formas se reporta como IncompatibleCheckpointError.
    """
    content = read_checkpoint(path)
    meta = content["meta"]
    config = expected_config or ModelConfig.model_validate(meta["model_config"])
    model = CA3Net(config)
    model.params.assign(content["params"], content["buffers"])
    if meta.get("mode") == "eval":
        model.eval()
    else:
        model.train()

    settings = meta.get("optimizer") or {"learning_rate": 0.0}
    optimizer = SgdState(**settings)
    optimizer.velocities = {n: np.array(v, dtype=np.float64) for n, v in content["velocities"].items()}
    logger.info(f"Checkpoint cargado de {path}: {len(content['params'])} parámetros")
    return LoadedCheckpoint(model, optimizer, meta.get("trainer_state"), meta)


def check_data_compatibility(config: ModelConfig, schema: Optional[AttributeSchema],
                             image_shape: Tuple[int, ...]) -> None:
    """
    Compara la configuración de un checkpoint con los datos a los que se aplica.

    Lanza:
        IncompatibleCheckpointError: un elemento por campo distinto (esperado vs encontrado).
    """
    stem = config.stem
    found_h, found_w = int(image_shape[-2]), int(image_shape[-1])
    offending = []
    if found_h != stem.image_height:
        offending.append(f"image_height (esperado {stem.image_height}, encontrado {found_h})")
    if found_w != stem.image_width:
        offending.append(f"image_width (esperado {stem.image_width}, encontrado {found_w})")
    if config.use_attribute and schema is not None:
        expected = [(a.name, a.class_count) for a in config.attribute_schema.attributes]
        actual = [(a.name, a.class_count) for a in schema.attributes]
        if [n for n, _ in expected] != [n for n, _ in actual]:
            offending.append(f"atributos (esperado {[n for n, _ in expected]}, encontrado {[n for n, _ in actual]})")
        else:
            for (name, want), (_, got) in zip(expected, actual):
                if want != got:
                    offending.append(f"{name}.class_count (esperado {want}, encontrado {got})")
    if offending:
        raise IncompatibleCheckpointError("el checkpoint no corresponde a los datos", offending)
