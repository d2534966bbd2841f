"""
Servicio de evaluación: descriptores, distancias, CMC/mAP y mapas de atención.

Protocolo single-query: cada consulta ordena la galería por distancia euclídea
al cuadrado (menor = mejor, orden estable ante empates). CMC@k es la fracción
de consultas cuyo primer acierto cae en el rango ≤ k; AP promedia la precisión
en la posición de cada acierto a lo largo de toda la lista.
"""
import logging
import math
import os
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
from PIL import Image

from common.error_handlers import ConfigurationError, DimensionError, ProtocolError
from common.io_utils import atomic_write_text, ensure_dir, write_graymap
from models import AttributeVariant, Descriptor, Mode, Sample
from schemas import EvalReport
from services.model_service import CA3Net
from services.synth_service import LOCALIZED_ATTRIBUTES, region_cells, template_region

logger = logging.getLogger(__name__)

DEFAULT_RANKS = (1, 5, 10)


# ===== Descriptores =====

def _normalize_blocks(vectors: np.ndarray, boundaries: Sequence[int]) -> np.ndarray:
    out = vectors.copy()
    edges = [0, *boundaries, vectors.shape[1]]
    for start, end in zip(edges[:-1], edges[1:]):
        if end > start:
            norms = np.linalg.norm(out[:, start:end], axis=1, keepdims=True)
            out[:, start:end] /= np.maximum(norms, 1e-12)
    return out


def descriptor_matrix(model: CA3Net, images: np.ndarray, l2_normalize: bool = False,
                      batch_size: int = 32) -> np.ndarray:
    """
    Descriptores [f_app; f_att] de un arreglo (N,3,H,W), en modo eval.

    Lanza:
        ModeError: si el modelo está en modo train.
    """
    model.require_mode(Mode.EVAL)
    rows = []
    for start in range(0, images.shape[0], batch_size):
        rows.append(model.forward(images[start:start + batch_size]).descriptor.data.copy())
    vectors = np.concatenate(rows, axis=0)
    if l2_normalize:
        split = model.config.appearance_feature_length
        vectors = _normalize_blocks(vectors, [split] if 0 < split < vectors.shape[1] else [])
    return vectors


def extract_descriptor(model: CA3Net, image: np.ndarray, identity: int = 0, camera: int = 0,
                       l2_normalize: bool = False) -> Descriptor:
    vector = descriptor_matrix(model, np.asarray(image)[None], l2_normalize=l2_normalize)[0]
    return Descriptor(vector=vector, identity=identity, camera=camera)


def extract_descriptors(model: CA3Net, samples: Sequence[Sample], l2_normalize: bool = False) -> List[Descriptor]:
    vectors = descriptor_matrix(model, np.stack([s.image for s in samples]), l2_normalize=l2_normalize)
    return [Descriptor(vector=v, identity=s.identity, camera=s.camera) for v, s in zip(vectors, samples)]


# ===== Distancias =====

def matching_score(a: Descriptor, b: Descriptor) -> float:
    """Distancia euclídea al cuadrado entre descriptores concatenados (menor = mejor)."""
    if a.length != b.length:
        raise DimensionError(f"descriptores de largo {a.length} y {b.length}", axis="length")
    diff = a.vector - b.vector
    return float(np.dot(diff, diff))


def distance_matrix(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Una fila por consulta; cada fila se calcula por separado."""
    if queries.shape[1] != gallery.shape[1]:
        raise DimensionError(f"descriptores de largo {queries.shape[1]} y {gallery.shape[1]}", axis="length")
    distances = np.empty((queries.shape[0], gallery.shape[0]))
    for row, query in enumerate(queries):
        diff = gallery - query
        distances[row] = np.einsum("ij,ij->i", diff, diff)
    return distances


# ===== Protocolo =====

def evaluate_distances(distances: np.ndarray, query_ids: Sequence[int], gallery_ids: Sequence[int],
                       query_cams: Optional[Sequence[int]] = None, gallery_cams: Optional[Sequence[int]] = None,
                       ranks: Sequence[int] = DEFAULT_RANKS, same_camera_filter: bool = False) -> EvalReport:
    """
    CMC y mAP a partir de una matriz de distancias (consultas × galería).

    Lanza:
        ProtocolError: si alguna identidad de consulta no tiene coincidencia en la galería.
    """
    distances = np.asarray(distances, dtype=np.float64)
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    num_q, num_g = distances.shape
    if query_ids.shape != (num_q,) or gallery_ids.shape != (num_g,):
        raise DimensionError(f"etiquetas {query_ids.shape}/{gallery_ids.shape} para distancias {distances.shape}", axis="labels")
    ranks = sorted(set(int(k) for k in ranks))
    if not ranks or ranks[0] < 1:
        raise ConfigurationError(f"rangos CMC inválidos: {ranks}")
    if same_camera_filter and (query_cams is None or gallery_cams is None):
        raise ConfigurationError("el filtro de misma cámara necesita las cámaras de consultas y galería")

    order = np.argsort(distances, axis=1, kind="stable")
    curves, average_precision, first_hits, missing = [], [], [], []
    for q in range(num_q):
        ranked = order[q]
        if same_camera_filter:
            keep = ~((gallery_ids[ranked] == query_ids[q]) & (np.asarray(gallery_cams)[ranked] == query_cams[q]))
            ranked = ranked[keep]
        matches = (gallery_ids[ranked] == query_ids[q]).astype(np.int64)
        if not matches.any():
            missing.append(int(query_ids[q]))
            continue
        hits = np.cumsum(matches)
        curve = np.zeros(num_g)
        first = int(np.argmax(matches))
        curve[first:] = 1.0
        curves.append(curve)
        first_hits.append(first + 1)
        precision = hits / np.arange(1, len(matches) + 1)
        average_precision.append(math.fsum(precision[matches == 1]) / int(matches.sum()))

    if missing:
        raise ProtocolError("identidades de consulta sin coincidencia en la galería", missing)

    cmc_curve = np.mean(curves, axis=0)
    cmc = {k: float(cmc_curve[min(k, num_g) - 1]) for k in ranks}
    return EvalReport(
        ranks=ranks,
        cmc=cmc,
        mean_ap=math.fsum(average_precision) / len(average_precision),
        average_precision=average_precision,
        first_hit_ranks=first_hits,
        num_queries=num_q,
        num_gallery=num_g,
        cmc_curve=[float(v) for v in cmc_curve],
        distances=distances,
    )


def evaluate(queries: Sequence[Descriptor], gallery: Sequence[Descriptor], ranks: Sequence[int] = DEFAULT_RANKS,
             same_camera_filter: bool = False) -> EvalReport:
    """Evalúa descriptores ya extraídos (función pura de descriptores y etiquetas)."""
    q = np.stack([d.vector for d in queries])
    g = np.stack([d.vector for d in gallery])
    report = evaluate_distances(
        distance_matrix(q, g),
        [d.identity for d in queries], [d.identity for d in gallery],
        [d.camera for d in queries], [d.camera for d in gallery],
        ranks=ranks, same_camera_filter=same_camera_filter,
    )
    logger.info(f"[EVAL] {report.num_queries} consultas × {report.num_gallery} galería: "
                + ", ".join(f"rank-{k}={v:.4f}" for k, v in report.cmc.items()) + f", mAP={report.mean_ap:.4f}")
    return report


def format_report(report: EvalReport) -> str:
    """TSV: resumen (CMC por rango y mAP) seguido del detalle por consulta."""
    lines = ["metric\tvalue"]
    lines += [f"rank-{k}\t{report.cmc[k]!r}" for k in report.ranks]
    lines.append(f"mAP\t{report.mean_ap!r}")
    lines.append(f"queries\t{report.num_queries}")
    lines.append(f"gallery\t{report.num_gallery}")
    lines.append("")
    lines.append("query\tfirst_hit_rank\taverage_precision")
    for index, (rank, ap) in enumerate(zip(report.first_hit_ranks, report.average_precision)):
        lines.append(f"{index}\t{rank}\t{ap!r}")
    return "\n".join(lines) + "\n"


def format_summary(report: EvalReport) -> str:
    header = " ".join(f"Rank-{k:<4}" for k in report.ranks) + " mAP"
    values = " ".join(f"{100 * report.cmc[k]:6.2f}" for k in report.ranks) + f" {100 * report.mean_ap:6.2f}"
    return (f"Consultas: {report.num_queries}  Galería: {report.num_gallery}\n"
            f"{header}\n{values}\n")


def write_report(report: EvalReport, directory: str) -> Dict[str, str]:
    ensure_dir(directory)
    paths = {
        "report": os.path.join(directory, "eval_report.tsv"),
        "summary": os.path.join(directory, "eval_summary.txt"),
    }
    atomic_write_text(paths["report"], format_report(report))
    atomic_write_text(paths["summary"], format_summary(report))
    return paths


# ===== Atención =====

def attention_maps(model: CA3Net, image: np.ndarray) -> Dict[str, np.ndarray]:
    """Z_t de una imagen (orden de barrido), como arreglos H_f×W_f."""
    config = model.config
    if not config.use_attribute or config.attribute_variant not in (AttributeVariant.FULL, AttributeVariant.ATTENTION):
        raise ConfigurationError("el modelo no tiene mapas de atención (rama de atributos sin atención)")
    model.require_mode(Mode.EVAL)
    out = model.forward(np.asarray(image)[None], with_appearance=False)
    state = out.attribute.state
    return {name: z.data[0].copy() for name, z in zip(state.names, state.maps)}


def attention_pixels(Z: np.ndarray) -> np.ndarray:
    """255·Z/max(Z), redondeado a uint8."""
    peak = float(Z.max())
    scaled = Z / peak if peak > 0 else np.zeros_like(Z)
    return np.clip(np.round(255.0 * scaled), 0, 255).astype(np.uint8)


def export_attention(model: CA3Net, image: np.ndarray, directory: str, upscale: bool = True) -> List[str]:
    """
    Escribe un graymap por atributo (<nombre>.pgm) con su mapa de atención.

    Lanza:
        ArtifactIOError: si el directorio no se puede escribir.
    """
    ensure_dir(directory)
    height, width = image.shape[1], image.shape[2]
    paths = []
    for name, Z in attention_maps(model, image).items():
        pixels = attention_pixels(Z)
        if upscale:
            pixels = np.array(Image.fromarray(pixels, mode="L").resize((width, height), Image.NEAREST))
        path = os.path.join(directory, f"{name}.pgm")
        write_graymap(path, pixels)
        paths.append(path)
    logger.info(f"[EVAL] {len(paths)} mapas de atención exportados a {directory}")
    return paths


class LocalizationReport(NamedTuple):
    pairs: int
    passed: int
    fraction: float
    per_attribute: Dict[str, float]


def attention_localization(model: CA3Net, samples: Sequence[Sample], regions: Optional[Dict] = None,
                           attributes: Sequence[str] = LOCALIZED_ATTRIBUTES, factor: float = 2.0) -> LocalizationReport:
    """
    Para cada (imagen, atributo presente) mide la masa de Z_t dentro de la región
    plantilla; el par pasa si supera factor × la fracción de área de la región.
    """
    schema = model.schema
    names = schema.names
    wanted = [a for a in attributes if a in names]
    _, grid_h, grid_w = model.config.feature_shape
    pairs = passed = 0
    per_attribute: Dict[str, List[bool]] = {a: [] for a in wanted}
    for sample in samples:
        maps = attention_maps(model, sample.image)
        for name in wanted:
            if sample.attributes[names.index(name)] == 0:
                continue
            region = (regions or {}).get(name) or template_region(name)
            (r0, r1), (c0, c1) = region_cells(region, grid_h, grid_w)
            area = (r1 - r0) * (c1 - c0) / float(grid_h * grid_w)
            mass = float(maps[name][r0:r1, c0:c1].sum())
            ok = mass >= factor * area
            per_attribute[name].append(ok)
            pairs += 1
            passed += int(ok)
    fraction = passed / pairs if pairs else 0.0
    summary = {name: (float(np.mean(v)) if v else 0.0) for name, v in per_attribute.items()}
    logger.info(f"[EVAL] Localización de atención: {passed}/{pairs} pares ({fraction:.2%})")
    return LocalizationReport(pairs, passed, fraction, summary)
