"""
Comando `synth`: genera el dataset sintético (train/gallery/query) en disco.
"""
import argparse
import logging
from typing import List

from common.error_handlers import handle_errors
from config import DEFAULT_SEED, WORKERS, parse_synth_items, read_synth_spec
from commands import parse_overrides, write_manifest
from services.synth_service import DEFAULT_REGIONS, default_spec, generate_dataset, save_dataset

logger = logging.getLogger(__name__)


def register(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("synth", allow_abbrev=False, help="Genera el dataset sintético de peatones")
    parser.add_argument("--spec", dest="spec_file", default=None,
                        help="archivo key=value con campos de SynthSpec (por defecto: spec de escritorio)")
    parser.add_argument("--out", dest="out_dir", required=True, help="directorio de salida")
    parser.add_argument("--seed", type=int, default=None, help="semilla (por defecto CA3_SEED)")
    parser.add_argument("--workers", type=int, default=None, help="hilos de generación")
    parser.set_defaults(run=run)
    return parser


@handle_errors
def run(args: argparse.Namespace, extra: List[str]) -> int:
    fields = read_synth_spec(args.spec_file) if args.spec_file else {}
    overrides = parse_synth_items(parse_overrides(extra))
    regions = {**DEFAULT_REGIONS, **fields.pop("regions", {}), **overrides.pop("regions", {})}
    fields.update(overrides)
    spec = default_spec(regions=regions, **fields)
    seed = DEFAULT_SEED if args.seed is None else args.seed

    logger.info(f"[SYNTH] {spec.identities} identidades × {spec.samples_per_identity} imágenes, semilla {seed}")
    dataset = generate_dataset(spec, seed, workers=args.workers or WORKERS)
    paths = save_dataset(dataset, args.out_dir)

    snapshot = spec.model_dump(mode="json", exclude={"attribute_schema"})
    write_manifest(args.out_dir, "synth", seed, snapshot, paths)
    logger.info(f"[SYNTH] ✅ train={len(dataset.train)} gallery={len(dataset.gallery)} query={len(dataset.query)}")
    return 0
