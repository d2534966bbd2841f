"""
Configuración del sistema CA3 de re-identificación.

Este archivo junta todo lo configurable: variables de entorno (vía .env),
los presets `desk` y `paper-faithful`, la lectura de archivos key=value y las
sobreescrituras que llegan por línea de comandos.

Orden de resolución (gana el último que escribe):
    preset → archivo de configuración → `--clave valor` → flags dedicados (--seed, --lambda)

Las claves son planas; aquí solo se convierten tipos. La validación de rangos
la hacen los modelos pydantic de schemas.py (ModelConfig, TrainConfig).
"""

import os
import logging
from typing import Any, Callable, Dict, List, Mapping, Optional

from dotenv import dotenv_values, load_dotenv

from common.error_handlers import ArtifactIOError, ConfigurationError
from models import AppearanceBranch, AttributeVariant, StageObjective
from schemas import AttributeSchema, ModelConfig, PartitionConfig, StemConfig, TrainConfig

# Cargamos variables de entorno desde .env
load_dotenv()

# Logger para este módulo
logger = logging.getLogger(__name__)

APP_VERSION = "1.0.0"

# ===== Variables de entorno =====
LOG_LEVEL: str = os.getenv("CA3_LOG_LEVEL", "INFO").upper()
DEFAULT_PRESET: str = os.getenv("CA3_PRESET", "desk")
DEFAULT_SEED: int = int(os.getenv("CA3_SEED", "0"))
# Hilos para la generación sintética; el resultado no depende de este valor
WORKERS: int = max(1, int(os.getenv("CA3_WORKERS", "1")))


# ===== Conversión de tipos por clave =====

def _parse_bool(raw: str) -> bool:
    value = str(raw).strip().lower()
    if value in ("1", "true", "yes", "si", "sí", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"no es booleano: {raw!r}")


def _parse_int_list(raw: str) -> List[int]:
    return [int(part) for part in str(raw).split(",") if part.strip()]


def _parse_str_list(raw: str) -> List[str]:
    return [part.strip() for part in str(raw).split(",") if part.strip()]


KEY_PARSERS: Dict[str, Callable[[str], Any]] = {
    "image_height": int,
    "image_width": int,
    "stem_channels": _parse_int_list,
    "stem_strides": _parse_int_list,
    "feature_channels": int,
    "attention_channels": _parse_int_list,
    "hidden_size": int,
    "lstm_bias": _parse_bool,
    "attribute_variant": str,
    "h_stripes": int,
    "v_stripes": int,
    "reduced_dim": int,
    "share_reduction": _parse_bool,
    "appearance_branches": _parse_str_list,
    "use_attribute": _parse_bool,
    "use_appearance": _parse_bool,
    "lambda": float,
    "learning_rate": float,
    "momentum": float,
    "weight_decay": float,
    "nesterov": _parse_bool,
    "batch_size": int,
    "stage1_epochs": int,
    "stage2_epochs": int,
    "stage3_epochs": int,
    "early_stop_window": int,
    "early_stop_tolerance": float,
    "lr_decay_fraction": float,
    "lr_decay_factor": float,
    "stage3_objective": str,
    "flip_probability": float,
    "erase_probability": float,
    "seed": int,
}

# ===== Presets =====
# desk: escala de escritorio, 3×96×48 → T de 128×24×12
# paper-faithful: anchos originales, 3×384×192 → T de 2048×24×12 (solo para pruebas de forma)
PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {
        "image_height": 96,
        "image_width": 48,
        "stem_channels": [32, 64, 128],
        "stem_strides": [1, 2, 2, 1],
        "feature_channels": 128,
        "attention_channels": [32, 16],
        "hidden_size": 64,
        "lstm_bias": True,
        "attribute_variant": "full",
        "h_stripes": 6,
        "v_stripes": 3,
        "reduced_dim": 64,
        "share_reduction": False,
        "appearance_branches": ["horizontal", "vertical", "global"],
        "use_attribute": True,
        "use_appearance": True,
        "lambda": 2.0,
        "learning_rate": 0.01,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "nesterov": True,
        "batch_size": 16,
        "stage1_epochs": 20,
        "stage2_epochs": 30,
        "stage3_epochs": 20,
        "early_stop_window": 3,
        "early_stop_tolerance": 1e-3,
        "lr_decay_fraction": 0.25,
        "lr_decay_factor": 0.1,
        "stage3_objective": "appearance",
        "flip_probability": 0.5,
        "erase_probability": 0.5,
        "seed": DEFAULT_SEED,
    },
}
PRESETS["paper-faithful"] = {
    **PRESETS["desk"],
    "image_height": 384,
    "image_width": 192,
    "stem_channels": [256, 512, 1024],
    "stem_strides": [2, 2, 2, 2],
    "feature_channels": 2048,
    "attention_channels": [512, 256],
    "hidden_size": 256,
    "reduced_dim": 256,
    "batch_size": 64,
}


def parse_value(key: str, raw: Any) -> Any:
    """Convierte un valor crudo (texto) al tipo de su clave."""
    if key not in KEY_PARSERS:
        raise ConfigurationError(f"clave de configuración desconocida: {key}")
    if not isinstance(raw, str):
        return raw
    try:
        return KEY_PARSERS[key](raw)
    except ValueError as e:
        raise ConfigurationError(f"valor inválido para {key}: {raw!r} ({e})")


def read_config_file(path: str) -> Dict[str, Any]:
    """
    Lee un archivo key=value (mismo formato que .env).

    Lanza:
        ArtifactIOError: si el archivo no existe.
        ConfigurationError: clave desconocida o valor inválido.
    """
    if not os.path.isfile(path):
        raise ArtifactIOError(f"archivo de configuración no encontrado: {path}")
    raw = dotenv_values(path)
    values = {}
    for key, value in raw.items():
        key = key.strip().lower()
        if value is None:
            raise ConfigurationError(f"{path}: la clave {key} no tiene valor")
        values[key] = parse_value(key, value)
    logger.info(f"Configuración leída de {path}: {len(values)} claves")
    return values


def resolve_config(
    preset: Optional[str] = None,
    config_file: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    seed: Optional[int] = None,
    lambda_: Optional[float] = None,
) -> Dict[str, Any]:
    """
    Resuelve la configuración plana siguiendo el orden documentado arriba.

    Retorna:
        Dict[str, Any]: snapshot plano, listo para el RunManifest.
    """
    preset = preset or DEFAULT_PRESET
    if preset not in PRESETS:
        raise ConfigurationError(f"preset desconocido: {preset} (opciones: {', '.join(PRESETS)})")
    resolved = dict(PRESETS[preset])
    if config_file:
        resolved.update(read_config_file(config_file))
    for key, value in (overrides or {}).items():
        resolved[key] = parse_value(key, value)
    if seed is not None:
        resolved["seed"] = int(seed)
    if lambda_ is not None:
        resolved["lambda"] = float(lambda_)
    logger.debug(f"Configuración resuelta (preset={preset}): {resolved}")
    return resolved


def build_model_config(flat: Mapping[str, Any], schema: AttributeSchema, num_identities: int) -> ModelConfig:
    """Arma el ModelConfig a partir de la configuración plana y del dataset."""
    stem = StemConfig(
        image_height=flat["image_height"],
        image_width=flat["image_width"],
        stem_channels=flat["stem_channels"],
        feature_channels=flat["feature_channels"],
        stem_strides=flat["stem_strides"],
    )
    partition = PartitionConfig(
        h_stripes=flat["h_stripes"],
        v_stripes=flat["v_stripes"],
        reduced_dim=flat["reduced_dim"],
        share_reduction=flat["share_reduction"],
        branches=[AppearanceBranch(b) for b in flat["appearance_branches"]],
    )
    merged = StageObjective(flat["stage3_objective"]) == StageObjective.MERGED_IDENTITY
    # λ = 0 sin cabeza fusionada: modelo solo de apariencia
    use_attribute = flat["use_attribute"] and (flat["lambda"] > 0 or merged)
    return ModelConfig(
        stem=stem,
        attention_channels=flat["attention_channels"],
        hidden_size=flat["hidden_size"],
        lstm_bias=flat["lstm_bias"],
        attribute_variant=AttributeVariant(flat["attribute_variant"]),
        partition=partition,
        use_attribute=use_attribute,
        use_appearance=flat["use_appearance"],
        merged_head=merged,
        num_identities=num_identities,
        attribute_schema=schema,
        seed=flat["seed"],
    )


def build_train_config(flat: Mapping[str, Any]) -> TrainConfig:
    fields = {key: flat[key] for key in KEY_PARSERS if key in flat and key in TrainConfig.model_fields}
    fields["lambda"] = flat["lambda"]
    return TrainConfig(**fields)


# ===== Especificación del generador sintético =====

def _parse_float_list(raw: str) -> List[float]:
    return [float(part) for part in str(raw).split(",") if part.strip()]


SYNTH_KEY_PARSERS: Dict[str, Callable[[str], Any]] = {
    "identities": int,
    "samples_per_identity": int,
    "train_fraction": float,
    "queries_per_identity": int,
    "cameras": int,
    "image_height": int,
    "image_width": int,
    "illumination_range": _parse_float_list,
    "jitter": int,
    "noise_sigma": float,
}
REGION_PREFIX = "region_"


def parse_synth_items(items: Mapping[str, Optional[str]], origin: str = "línea de comandos") -> Dict[str, Any]:
    """
    Convierte pares clave/valor crudos en campos de SynthSpec.

    Las regiones se escriben como `region_<atributo>=fila0,fila1,col0,col1`.
    """
    fields: Dict[str, Any] = {}
    regions: Dict[str, tuple] = {}
    for key, value in items.items():
        key = key.strip().lower()
        if value is None:
            raise ConfigurationError(f"{origin}: la clave {key} no tiene valor")
        if not key.startswith(REGION_PREFIX) and key not in SYNTH_KEY_PARSERS:
            raise ConfigurationError(f"{origin}: clave desconocida {key}")
        try:
            if key.startswith(REGION_PREFIX):
                regions[key[len(REGION_PREFIX):]] = tuple(_parse_float_list(value))
            else:
                fields[key] = SYNTH_KEY_PARSERS[key](value)
        except ValueError as e:
            raise ConfigurationError(f"{origin}: valor inválido para {key}: {value!r} ({e})")
    if "illumination_range" in fields:
        fields["illumination_range"] = tuple(fields["illumination_range"])
    if regions:
        fields["regions"] = regions
    return fields


def read_synth_spec(path: str) -> Dict[str, Any]:
    """
    Lee un archivo key=value con campos de SynthSpec.

    Lanza:
        ArtifactIOError: si el archivo no existe.
        ConfigurationError: clave desconocida o valor inválido.
    """
    if not os.path.isfile(path):
        raise ArtifactIOError(f"archivo de especificación no encontrado: {path}")
    return parse_synth_items(dotenv_values(path), origin=path)
