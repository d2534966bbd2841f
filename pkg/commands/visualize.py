"""
Comando `visualize`: exporta un graymap de atención por atributo para una imagen.
"""
import argparse
import logging
import os
from typing import List

from common.error_handlers import handle_errors
from common.io_utils import read_planar_pgm
from commands import write_manifest
from services.checkpoint_service import check_data_compatibility, load_checkpoint
from services.evaluation_service import export_attention

logger = logging.getLogger(__name__)


def register(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("visualize", allow_abbrev=False, help="Exporta los mapas de atención de una imagen")
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--image", required=True, help="imagen planar .pgm (3·H × W)")
    parser.add_argument("--out", dest="out_dir", required=True)
    parser.add_argument("--grid", action="store_true", help="guardar en la resolución de T, sin ampliar")
    parser.set_defaults(run=run)
    return parser


@handle_errors
def run(args: argparse.Namespace, extra: List[str]) -> int:
    image = read_planar_pgm(args.image)
    loaded = load_checkpoint(args.checkpoint)
    model = loaded.model.eval()
    check_data_compatibility(model.config, None, image.shape)
    paths = export_attention(model, image, args.out_dir, upscale=not args.grid)
    artifacts = {os.path.splitext(os.path.basename(p))[0]: p for p in paths}
    settings = {"checkpoint": os.path.abspath(args.checkpoint), "image": os.path.abspath(args.image)}
    write_manifest(args.out_dir, "visualize", model.config.seed, settings, artifacts)
    return 0
