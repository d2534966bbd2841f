"""
Subcomandos de la CLI (synth, train, eval, visualize).

Cada módulo expone register(subparsers) y una función run(args, extra) decorada
con handle_errors que devuelve el código de salida.
"""
import json
import logging
import os
from typing import Any, Dict, List, Sequence

import numpy as np
import PIL
import pydantic

from common.error_handlers import UsageError
from common.io_utils import atomic_write_text, ensure_dir
from config import APP_VERSION
from schemas import RunManifest

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def parse_overrides(extra: Sequence[str]) -> Dict[str, str]:
    """Convierte `--clave valor` (o `--clave=valor`) en un diccionario; los guiones pasan a `_`."""
    overrides: Dict[str, str] = {}
    items = list(extra)
    i = 0
    while i < len(items):
        token = items[i]
        if not token.startswith("--") or len(token) == 2:
            raise UsageError(f"argumento inesperado: {token}")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(items):
                raise UsageError(f"falta el valor de --{key}")
            value = items[i + 1]
            i += 2
        overrides[key.replace("-", "_")] = value
    return overrides


def parse_int_list(raw: str, flag: str) -> List[int]:
    try:
        return [int(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"{flag} espera enteros separados por comas, se recibió {raw!r}")


def library_versions() -> Dict[str, str]:
    return {
        "ca3": APP_VERSION,
        "numpy": np.__version__,
        "pillow": PIL.__version__,
        "pydantic": pydantic.VERSION,
    }


def write_manifest(out_dir: str, command: str, seed: int, config: Dict[str, Any],
                   artifacts: Dict[str, str]) -> str:
    """Escribe manifest.json con rutas relativas a out_dir."""
    ensure_dir(out_dir)
    relative = {name: os.path.relpath(path, out_dir) for name, path in artifacts.items()}
    manifest = RunManifest(command=command, seed=seed, config=config, artifacts=relative,
                           versions=library_versions())
    path = os.path.join(out_dir, MANIFEST_NAME)
    atomic_write_text(path, json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    return path
