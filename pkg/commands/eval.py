"""
Comando `eval`: CMC/mAP de un checkpoint sobre los splits query y gallery.
"""
import argparse
import logging
import os
from typing import List

from common.error_handlers import handle_errors
from commands import parse_int_list, write_manifest
from services.checkpoint_service import check_data_compatibility, load_checkpoint
from services.evaluation_service import evaluate, extract_descriptors, format_summary, write_report
from services.synth_service import load_dataset

logger = logging.getLogger(__name__)


def register(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("eval", allow_abbrev=False, help="Evalúa un checkpoint (CMC y mAP)")
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--data", dest="data_dir", required=True, help="directorio del dataset (con query/ y gallery/)")
    parser.add_argument("--out", dest="out_dir", required=True)
    parser.add_argument("--ranks", default="1,5,10", help="rangos CMC separados por comas")
    parser.add_argument("--same-camera-filter", dest="same_camera_filter", action="store_true",
                        help="descarta de la galería la misma identidad vista por la misma cámara")
    parser.add_argument("--l2-normalize", dest="l2_normalize", action="store_true",
                        help="normaliza por bloque (apariencia, atributos) antes de comparar")
    parser.set_defaults(run=run)
    return parser


@handle_errors
def run(args: argparse.Namespace, extra: List[str]) -> int:
    ranks = parse_int_list(args.ranks, "--ranks")
    loaded = load_checkpoint(args.checkpoint)
    model = loaded.model.eval()
    query_split = load_dataset(os.path.join(args.data_dir, "query"))
    gallery_split = load_dataset(os.path.join(args.data_dir, "gallery"))
    for split in (query_split, gallery_split):
        check_data_compatibility(model.config, split.schema, split.samples[0].image.shape)
    query, gallery = query_split.samples, gallery_split.samples

    report = evaluate(
        extract_descriptors(model, query, l2_normalize=args.l2_normalize),
        extract_descriptors(model, gallery, l2_normalize=args.l2_normalize),
        ranks=ranks,
        same_camera_filter=args.same_camera_filter,
    )
    artifacts = write_report(report, args.out_dir)
    settings = {
        "checkpoint": os.path.abspath(args.checkpoint),
        "data": os.path.abspath(args.data_dir),
        "ranks": report.ranks,
        "same_camera_filter": args.same_camera_filter,
        "l2_normalize": args.l2_normalize,
    }
    write_manifest(args.out_dir, "eval", model.config.seed, settings, artifacts)
    print(format_summary(report), end="")
    return 0
