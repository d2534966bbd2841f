"""
Utilidades de entrada/salida de artefactos en disco.

Formatos:
- Imágenes del dataset: graymap binario de 16 bits (P5, maxval 65535) con los
  tres canales apilados verticalmente (3·H filas × W columnas). Un píxel k
  representa el valor k/65536.
- Mapas de atención: graymap de 8 bits.
- labels.tsv: `archivo<TAB>identidad<TAB>cámara<TAB>c_1 ... c_L`, cabecera comentada con '#'.
- schema.txt: `nombre<TAB>clases<TAB>rango_corporal<TAB>granularidad`, con
  `# order=<política>` y, si la política es custom, `# custom_order=i,j,...`.
"""
import logging
import os
import tempfile
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from common.error_handlers import ArtifactIOError, DatasetParseError
from models import OrderPolicy
from schemas import AttributeSchema, AttributeSpec

logger = logging.getLogger(__name__)

PIXEL_LEVELS = 65536
LabelRow = Tuple[str, int, int, List[int]]


def ensure_dir(path: str) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise ArtifactIOError(f"no se pudo crear el directorio {path}: {e}")
    if not os.access(path, os.W_OK):
        raise ArtifactIOError(f"directorio sin permisos de escritura: {path}")
    return path


def atomic_write_text(path: str, text: str) -> None:
    """Escribe en un temporal del mismo directorio y lo renombra."""
    directory = os.path.dirname(os.path.abspath(path))
    ensure_dir(directory)
    try:
        fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp_")
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(text)
        os.replace(tmp_path, path)
    except OSError as e:
        raise ArtifactIOError(f"no se pudo escribir {path}: {e}")


# ===== Imágenes =====

def quantize(image: np.ndarray) -> np.ndarray:
    """Lleva valores en [0,1) a la grilla de 1/65536 que se puede guardar sin pérdida."""
    levels = np.clip(np.floor(image * PIXEL_LEVELS), 0, PIXEL_LEVELS - 1)
    return levels / PIXEL_LEVELS


def write_planar_pgm(path: str, image: np.ndarray) -> None:
    if image.ndim != 3:
        raise ArtifactIOError(f"se esperaba una imagen C×H×W para {path}, forma {image.shape}")
    channels, height, width = image.shape
    levels = np.clip(np.floor(image * PIXEL_LEVELS), 0, PIXEL_LEVELS - 1).astype(np.int32)
    planar = levels.reshape(channels * height, width)
    try:
        Image.fromarray(planar, mode="I").save(path, format="PPM")
    except OSError as e:
        raise ArtifactIOError(f"no se pudo escribir la imagen {path}: {e}")


def read_planar_pgm(path: str, channels: int = 3) -> np.ndarray:
    """
    Lee un graymap planar y devuelve C×H×W en [0,1).

    Lanza:
        ArtifactIOError: archivo inexistente, ilegible o con alto no divisible por C.
    """
    if not os.path.isfile(path):
        raise ArtifactIOError(f"imagen no encontrada: {path}")
    try:
        with Image.open(path) as img:
            mode = img.mode
            raw = np.array(img, dtype=np.int64)
    except (OSError, UnidentifiedImageError) as e:
        raise ArtifactIOError(f"no se pudo leer la imagen {path}: {e}")
    scale = 256.0 if mode == "L" else float(PIXEL_LEVELS)
    if raw.ndim != 2 or raw.shape[0] % channels:
        raise ArtifactIOError(f"{path}: alto {raw.shape[0]} no es múltiplo de {channels} canales")
    height = raw.shape[0] // channels
    return raw.reshape(channels, height, raw.shape[1]).astype(np.float64) / scale


def write_graymap(path: str, pixels: np.ndarray) -> None:
    try:
        Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="L").save(path, format="PPM")
    except OSError as e:
        raise ArtifactIOError(f"no se pudo escribir {path}: {e}")


def read_graymap(path: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.array(img)
    except (OSError, UnidentifiedImageError) as e:
        raise ArtifactIOError(f"no se pudo leer {path}: {e}")


# ===== Esquema de atributos =====

def format_schema(schema: AttributeSchema) -> str:
    lines = [f"# order={schema.order_policy.value}"]
    if schema.order_policy == OrderPolicy.CUSTOM:
        lines.append("# custom_order=" + ",".join(str(i) for i in schema.custom_order))
    for attr in schema.attributes:
        lines.append(f"{attr.name}\t{attr.class_count}\t{attr.body_rank}\t{attr.granularity}")
    return "\n".join(lines) + "\n"


def write_schema(path: str, schema: AttributeSchema) -> None:
    atomic_write_text(path, format_schema(schema))


def read_schema(path: str) -> AttributeSchema:
    if not os.path.isfile(path):
        raise ArtifactIOError(f"esquema no encontrado: {path}")
    policy = OrderPolicy.TOP_DOWN
    custom_order = None
    attributes = []
    with open(path, "r", encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                try:
                    if key == "order":
                        policy = OrderPolicy(value.strip())
                    elif key == "custom_order":
                        custom_order = [int(v) for v in value.split(",")]
                except ValueError as e:
                    raise DatasetParseError(f"{path}: cabecera inválida ({e})", line_number=number)
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise DatasetParseError(f"{path}: se esperaban 4 campos, hay {len(fields)}", line_number=number)
            try:
                attributes.append(AttributeSpec(
                    name=fields[0], class_count=int(fields[1]),
                    body_rank=int(fields[2]), granularity=int(fields[3]),
                ))
            except ValueError as e:
                raise DatasetParseError(f"{path}: atributo inválido ({e})", line_number=number)
    try:
        return AttributeSchema(attributes=attributes, order_policy=policy, custom_order=custom_order)
    except ValueError as e:
        raise DatasetParseError(f"{path}: esquema inválido ({e})")


# ===== labels.tsv =====

def format_labels(rows: Sequence[LabelRow], attribute_names: Sequence[str]) -> str:
    header = "# " + "\t".join(["filename", "identity", "camera", *attribute_names])
    lines = [header]
    for filename, identity, camera, attributes in rows:
        lines.append("\t".join([filename, str(identity), str(camera), *(str(a) for a in attributes)]))
    return "\n".join(lines) + "\n"


def write_labels(path: str, rows: Sequence[LabelRow], attribute_names: Sequence[str]) -> None:
    atomic_write_text(path, format_labels(rows, attribute_names))


def read_labels(path: str, attribute_count: int) -> List[LabelRow]:
    """
    Lee labels.tsv validando cada fila.

    Lanza:
        DatasetParseError: fila mal formada, siempre con número de línea.
    """
    if not os.path.isfile(path):
        raise ArtifactIOError(f"metadatos no encontrados: {path}")
    rows: List[LabelRow] = []
    with open(path, "r", encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3 + attribute_count:
                raise DatasetParseError(
                    f"{path}: la fila tiene {len(fields) - 3} atributos, el esquema define {attribute_count}",
                    line_number=number,
                )
            try:
                identity, camera = int(fields[1]), int(fields[2])
                attributes = [int(v) for v in fields[3:]]
            except ValueError as e:
                raise DatasetParseError(f"{path}: valor no entero ({e})", line_number=number)
            if identity < 0 or camera < 0 or any(a < 0 for a in attributes):
                raise DatasetParseError(f"{path}: valores negativos", line_number=number)
            rows.append((fields[0], identity, camera, attributes))
    return rows
