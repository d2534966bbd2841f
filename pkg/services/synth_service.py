"""
Servicio de datos sintéticos: peatones procedurales con atributos a nivel identidad.

Cada imagen es un fondo ruidoso con un cuerpo por bandas (cabeza, torso,
piernas) y los atributos dibujados dentro de su región plantilla (el sombrero
arriba, la mochila al costado del torso, etc.). Como las regiones son
conocidas, la concentración de la atención se puede medir.

También vive aquí la augmentación (flip horizontal + random erasing) y la
lectura/escritura del dataset en disco.

Disposición en disco de cada split (train/, gallery/, query/):
    images/<archivo>.pgm   graymap planar de 16 bits
    labels.tsv             archivo, identidad, cámara, L clases
    schema.txt             esquema de atributos
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from common.error_handlers import (
    ArtifactIOError,
    DatasetIntegrityError,
    EmptyDatasetError,
    SpecValidationError,
)
from common.io_utils import (
    ensure_dir,
    quantize,
    read_labels,
    read_planar_pgm,
    read_schema,
    write_labels,
    write_planar_pgm,
    write_schema,
)
from models import Sample
from schemas import AttributeSchema, AttributeSpec, SynthSpec

logger = logging.getLogger(__name__)

SPLITS = ("train", "gallery", "query")
Region = Tuple[float, float, float, float]

# ===== Esquema y plantillas por defecto =====
# (nombre, clases, rango corporal, granularidad); los colores llevan una clase extra "otro"
DEFAULT_ATTRIBUTES: List[Tuple[str, int, int, int]] = [
    ("hat", 2, 0, 0),
    ("hair", 2, 1, 6),
    ("age", 4, 2, 10),
    ("upper_color", 9, 3, 8),
    ("sleeve", 2, 4, 4),
    ("backpack", 2, 5, 3),
    ("bag", 2, 6, 2),
    ("handbag", 2, 7, 1),
    ("lower_type", 2, 8, 7),
    ("lower_color", 10, 9, 9),
    ("lower_length", 2, 10, 5),
    ("gender", 2, 11, 11),
]

# (fila0, fila1, col0, col1) en fracciones de la imagen
DEFAULT_REGIONS: Dict[str, Region] = {
    "hat": (0.0, 0.10, 0.30, 0.70),
    "hair": (0.04, 0.22, 0.25, 0.75),
    "age": (0.10, 0.20, 0.35, 0.65),
    "upper_color": (0.22, 0.55, 0.25, 0.75),
    "sleeve": (0.22, 0.50, 0.10, 0.25),
    "backpack": (0.24, 0.50, 0.75, 0.92),
    "bag": (0.45, 0.62, 0.05, 0.25),
    "handbag": (0.58, 0.72, 0.78, 0.95),
    "lower_type": (0.55, 0.95, 0.28, 0.72),
    "lower_color": (0.55, 0.95, 0.28, 0.72),
    "lower_length": (0.78, 0.95, 0.28, 0.72),
    "gender": (0.52, 0.56, 0.25, 0.75),
}

# Atributos que ocupan una región propia y compacta: los que usa el reporte de localización
LOCALIZED_ATTRIBUTES = ("hat", "backpack", "bag", "handbag")

PALETTE = np.array([
    [0.10, 0.10, 0.10],  # negro
    [0.92, 0.92, 0.92],  # blanco
    [0.82, 0.15, 0.15],  # rojo
    [0.50, 0.20, 0.62],  # morado
    [0.90, 0.85, 0.20],  # amarillo
    [0.50, 0.50, 0.50],  # gris
    [0.20, 0.30, 0.82],  # azul
    [0.20, 0.65, 0.25],  # verde
    [0.45, 0.30, 0.15],  # café
    [0.90, 0.60, 0.70],  # rosado
])
UPPER_OTHER = np.array([0.95, 0.55, 0.10])
LOWER_OTHER = np.array([0.10, 0.60, 0.60])
SKIN = np.array([0.86, 0.70, 0.58])
HAT_COLOR = np.array([0.95, 0.08, 0.08])
BACKPACK_COLOR = np.array([0.30, 0.18, 0.08])
BAG_COLOR = np.array([0.08, 0.18, 0.85])
HANDBAG_COLOR = np.array([0.10, 0.75, 0.20])


def default_schema() -> AttributeSchema:
    return AttributeSchema(attributes=[
        AttributeSpec(name=name, class_count=m, body_rank=rank, granularity=gran)
        for name, m, rank, gran in DEFAULT_ATTRIBUTES
    ])


def default_spec(**overrides) -> SynthSpec:
    fields = {"attribute_schema": default_schema(), "regions": dict(DEFAULT_REGIONS)}
    fields.update(overrides)
    return SynthSpec(**fields)


class SyntheticDataset(NamedTuple):
    schema: AttributeSchema
    train: List[Sample]
    gallery: List[Sample]
    query: List[Sample]

    def split(self, name: str) -> List[Sample]:
        return getattr(self, name)


# ===== Renderizado =====

def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def assign_attributes(schema: AttributeSchema, identities: int, seed: int) -> np.ndarray:
    """
    Etiquetas (K, L) a nivel identidad, balanceadas por atributo.

    Cada atributo reparte sus clases de forma cíclica sobre las identidades y
    luego las baraja con un generador propio.
    """
    labels = np.zeros((identities, schema.size), dtype=np.int64)
    for index, attr in enumerate(schema.attributes):
        column = np.arange(identities) % attr.class_count
        labels[:, index] = _rng(seed, 1000 + index).permutation(column)
    return labels


class _Canvas:
    """Lienzo 3×H×W con dibujo de rectángulos en coordenadas fraccionarias."""

    def __init__(self, height: int, width: int, dy: int, dx: int):
        self.height, self.width = height, width
        self.dy, self.dx = dy, dx
        self.pixels = np.zeros((3, height, width))

    def fill(self, region: Region, color: np.ndarray) -> None:
        r0, r1, c0, c1 = region
        top = max(0, int(round(r0 * self.height)) + self.dy)
        bottom = min(self.height, int(round(r1 * self.height)) + self.dy)
        left = max(0, int(round(c0 * self.width)) + self.dx)
        right = min(self.width, int(round(c1 * self.width)) + self.dx)
        if bottom > top and right > left:
            self.pixels[:, top:bottom, left:right] = np.asarray(color).reshape(3, 1, 1)


def _region(spec: SynthSpec, name: str) -> Region:
    return spec.regions.get(name, DEFAULT_REGIONS[name])


def render_sample(spec: SynthSpec, schema: AttributeSchema, attributes: Sequence[int],
                  identity_colors: np.ndarray, camera: int, rng: np.random.Generator) -> np.ndarray:
    """Dibuja una imagen 3×H×W en [0,1) para una identidad y una cámara."""
    labels = dict(zip(schema.names, attributes))
    height, width = spec.image_height, spec.image_width
    dy, dx = (rng.integers(-spec.jitter, spec.jitter + 1, size=2) if spec.jitter else (0, 0))
    canvas = _Canvas(height, width, int(dy), int(dx))

    tint = 0.35 + 0.05 * (camera % 4)
    canvas.pixels[:] = tint

    upper = identity_colors[0]
    lower = identity_colors[1]
    if "upper_color" in labels:
        upper_class = labels["upper_color"]
        base = UPPER_OTHER if upper_class >= 8 else PALETTE[upper_class]
        upper = np.clip(base + 0.06 * (identity_colors[0] - 0.5), 0.0, 0.99)
    if "lower_color" in labels:
        lower_class = labels["lower_color"]
        base = LOWER_OTHER if lower_class >= 9 else PALETTE[lower_class]
        lower = np.clip(base + 0.06 * (identity_colors[1] - 0.5), 0.0, 0.99)

    skin = SKIN * (1.0 - 0.08 * labels.get("age", 0))
    hair_color = identity_colors[2] * 0.4 + 0.05 * labels.get("age", 0)

    # cabeza
    canvas.fill((0.06, 0.21, 0.36, 0.64), skin)
    if labels.get("hair", 0) == 1:
        canvas.fill((0.04, 0.22, 0.25, 0.36), hair_color)
        canvas.fill((0.04, 0.22, 0.64, 0.75), hair_color)
    canvas.fill((0.04, 0.08, 0.34, 0.66), hair_color)

    # torso y brazos
    canvas.fill(_region(spec, "upper_color"), upper)
    long_sleeve = labels.get("sleeve", 1) == 1
    for arm in ((0.22, 0.50, 0.12, 0.25), (0.22, 0.50, 0.75, 0.88)):
        canvas.fill(arm, upper if long_sleeve else skin)
        canvas.fill((arm[0], arm[0] + 0.08, arm[2], arm[3]), upper)
    # firma de la identidad en el pecho
    canvas.fill((0.30, 0.42, 0.40, 0.60), identity_colors[3])

    # piernas
    if labels.get("lower_type", 0) == 0:
        canvas.fill((0.55, 0.95, 0.30, 0.48), lower)
        canvas.fill((0.55, 0.95, 0.52, 0.70), lower)
    else:
        canvas.fill((0.55, 0.80, 0.28, 0.72), lower)
        canvas.fill((0.80, 0.95, 0.34, 0.46), skin)
        canvas.fill((0.80, 0.95, 0.54, 0.66), skin)
    if labels.get("lower_length", 1) == 0:
        canvas.fill((0.78, 0.95, 0.30, 0.48), skin)
        canvas.fill((0.78, 0.95, 0.52, 0.70), skin)
    if labels.get("gender", 0) == 1:
        canvas.fill(_region(spec, "gender"), identity_colors[4])

    # accesorios en sus regiones plantilla
    if labels.get("hat", 0) == 1:
        canvas.fill(_region(spec, "hat"), HAT_COLOR)
    if labels.get("backpack", 0) == 1:
        canvas.fill(_region(spec, "backpack"), BACKPACK_COLOR)
    if labels.get("bag", 0) == 1:
        canvas.fill(_region(spec, "bag"), BAG_COLOR)
    if labels.get("handbag", 0) == 1:
        canvas.fill(_region(spec, "handbag"), HANDBAG_COLOR)

    low, high = spec.illumination_range
    image = canvas.pixels * rng.uniform(low, high)
    image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    return quantize(np.clip(image, 0.0, 1.0))


def _render_identity(spec: SynthSpec, schema: AttributeSchema, identity: int, attributes: np.ndarray,
                     seed: int) -> List[Sample]:
    identity_colors = _rng(seed, identity, 0).uniform(0.0, 1.0, size=(5, 3))
    samples = []
    for index in range(spec.samples_per_identity):
        camera = index % spec.cameras
        rng = _rng(seed, identity, index + 1)
        image = render_sample(spec, schema, attributes, identity_colors, camera, rng)
        samples.append(Sample(
            image=image, identity=identity, camera=camera,
            attributes=[int(a) for a in attributes],
            filename=f"id{identity:04d}_s{index:03d}_c{camera}.pgm",
        ))
    return samples


def generate_dataset(spec: SynthSpec, seed: int, workers: int = 1) -> SyntheticDataset:
    """
    Genera train/gallery/query con identidades disjuntas entre train y prueba.

    Las identidades [0, K_train) son de entrenamiento y [K_train, K) de prueba;
    de cada identidad de prueba las primeras queries_per_identity imágenes son
    consultas y el resto galería. Cada identidad usa semillas derivadas de
    (seed, identidad), así el resultado no depende de workers.

    Lanza:
        SpecValidationError: esquema ausente o incoherente con las regiones.
    """
    schema = spec.attribute_schema
    if schema is None:
        raise SpecValidationError("la especificación sintética necesita un esquema de atributos")
    unknown = [name for name in schema.names if name not in spec.regions and name not in DEFAULT_REGIONS]
    if unknown:
        raise SpecValidationError(f"atributos sin región plantilla: {', '.join(unknown)}")

    labels = assign_attributes(schema, spec.identities, seed)
    logger.info(f"[SYNTH] Generando {spec.identities} identidades × {spec.samples_per_identity} imágenes (seed={seed})")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        per_identity = list(pool.map(
            lambda identity: _render_identity(spec, schema, identity, labels[identity], seed),
            range(spec.identities),
        ))

    train, gallery, query = [], [], []
    for identity, samples in enumerate(per_identity):
        if identity < spec.train_identities:
            train.extend(samples)
        else:
            query.extend(samples[:spec.queries_per_identity])
            gallery.extend(samples[spec.queries_per_identity:])
    logger.info(f"[SYNTH] train={len(train)} gallery={len(gallery)} query={len(query)}")
    return SyntheticDataset(schema, train, gallery, query)


# ===== Augmentación =====

def flip_horizontal(image: np.ndarray) -> np.ndarray:
    return image[:, :, ::-1].copy()


def erase_rectangle(image: np.ndarray, fraction: float, aspect: float, top: int, left: int,
                    fill: np.ndarray) -> Tuple[np.ndarray, Tuple[int, int]]:
    """Sobrescribe el rectángulo de área fraction·H·W y aspecto aspect con fill."""
    _, height, width = image.shape
    area = fraction * height * width
    h = int(round(np.sqrt(area * aspect)))
    w = int(round(np.sqrt(area / aspect)))
    out = image.copy()
    out[:, top:top + h, left:left + w] = fill[:, :h, :w]
    return out, (h, w)


def random_erase(image: np.ndarray, rng: np.random.Generator, area_range: Tuple[float, float] = (0.02, 0.4),
                 min_aspect: float = 0.3) -> np.ndarray:
    """Random erasing con ruido uniforme; hasta 100 intentos para que el rectángulo quepa."""
    _, height, width = image.shape
    for _ in range(100):
        fraction = rng.uniform(*area_range)
        aspect = rng.uniform(min_aspect, 1.0 / min_aspect)
        area = fraction * height * width
        h = int(round(np.sqrt(area * aspect)))
        w = int(round(np.sqrt(area / aspect)))
        if 0 < h < height and 0 < w < width:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            fill = quantize(rng.uniform(0.0, 1.0, size=(image.shape[0], h, w)))
            out, _ = erase_rectangle(image, fraction, aspect, top, left, fill)
            return out
    return image.copy()


def augment(image: np.ndarray, seed: Union[int, np.random.Generator], flip_probability: float = 0.5,
            erase_probability: float = 0.5) -> np.ndarray:
    """Flip horizontal con probabilidad p y random erasing con probabilidad q; conserva forma y etiquetas."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = image
    if rng.random() < flip_probability:
        out = flip_horizontal(out)
    if rng.random() < erase_probability:
        out = random_erase(out, rng)
    return out if out is not image else image.copy()


# ===== Disco =====

def save_split(directory: str, samples: Sequence[Sample], schema: AttributeSchema) -> None:
    images_dir = ensure_dir(os.path.join(directory, "images"))
    rows = []
    for sample in samples:
        write_planar_pgm(os.path.join(images_dir, sample.filename), sample.image)
        rows.append((sample.filename, sample.identity, sample.camera, list(sample.attributes)))
    write_labels(os.path.join(directory, "labels.tsv"), rows, schema.names)
    write_schema(os.path.join(directory, "schema.txt"), schema)


def save_dataset(dataset: SyntheticDataset, directory: str) -> Dict[str, str]:
    """Escribe los tres splits; devuelve la ruta de cada uno."""
    paths = {}
    for name in SPLITS:
        path = os.path.join(directory, name)
        save_split(path, dataset.split(name), dataset.schema)
        paths[name] = path
    logger.info(f"[SYNTH] Dataset guardado en {directory}")
    return paths


class LoadedSplit(NamedTuple):
    schema: AttributeSchema
    samples: List[Sample]


def load_dataset(directory: str) -> LoadedSplit:
    """
    Lee un split (images/ + labels.tsv + schema.txt) y valida su integridad.

    Lanza:
        EmptyDatasetError: directorio vacío o sin filas.
        DatasetParseError: fila mal formada (con número de línea).
        DatasetIntegrityError: imágenes y metadatos no coinciden.
    """
    if not os.path.isdir(directory):
        raise ArtifactIOError(f"directorio de datos no encontrado: {directory}")
    if not os.listdir(directory):
        raise EmptyDatasetError(f"el directorio {directory} está vacío")
    schema = read_schema(os.path.join(directory, "schema.txt"))
    rows = read_labels(os.path.join(directory, "labels.tsv"), schema.size)
    if not rows:
        raise EmptyDatasetError(f"{directory}/labels.tsv no tiene muestras")

    images_dir = os.path.join(directory, "images")
    listed = {row[0] for row in rows}
    on_disk = set(os.listdir(images_dir)) if os.path.isdir(images_dir) else set()
    missing = sorted(listed - on_disk)
    extra = sorted(name for name in on_disk - listed if not name.startswith("."))
    if missing or extra:
        raise DatasetIntegrityError(
            f"{directory}: imágenes sin archivo {missing[:5]}, archivos sin metadatos {extra[:5]}"
        )

    samples = []
    by_identity: Dict[int, List[int]] = {}
    for filename, identity, camera, attributes in rows:
        for attr, value in zip(schema.attributes, attributes):
            if value >= attr.class_count:
                raise DatasetIntegrityError(f"{filename}: {attr.name}={value} fuera de [0, {attr.class_count})")
        previous = by_identity.setdefault(identity, attributes)
        if previous != attributes:
            raise DatasetIntegrityError(f"identidad {identity} con atributos distintos entre imágenes ({filename})")
        image = read_planar_pgm(os.path.join(images_dir, filename))
        samples.append(Sample(image=image, identity=identity, camera=camera, attributes=attributes, filename=filename))
    logger.info(f"[DATA] {len(samples)} muestras leídas de {directory}")
    return LoadedSplit(schema, samples)


def load_splits(directory: str, names: Sequence[str] = SPLITS) -> Dict[str, LoadedSplit]:
    return {name: load_dataset(os.path.join(directory, name)) for name in names}


def identity_remap(samples: Sequence[Sample]) -> Dict[int, int]:
    """Identidades presentes → [0, K) en orden creciente (para las cabezas de clasificación)."""
    return {identity: index for index, identity in enumerate(sorted({s.identity for s in samples}))}


def stack_images(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples])


def region_cells(region: Region, height: int, width: int) -> Tuple[Tuple[int, int], Tuple[int, int]]:
    """Celdas de una grilla H×W cubiertas por una región fraccionaria (redondeo hacia afuera)."""
    r0, r1, c0, c1 = region
    rows = (int(np.floor(r0 * height)), max(int(np.ceil(r1 * height)), int(np.floor(r0 * height)) + 1))
    cols = (int(np.floor(c0 * width)), max(int(np.ceil(c1 * width)), int(np.floor(c0 * width)) + 1))
    return (rows[0], min(rows[1], height)), (cols[0], min(cols[1], width))


def template_region(name: str, spec: Optional[SynthSpec] = None) -> Region:
    if spec is not None and name in spec.regions:
        return spec.regions[name]
    return DEFAULT_REGIONS[name]
