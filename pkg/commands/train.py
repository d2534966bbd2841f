"""
Comando `train`: entrenamiento en tres etapas sobre el split `train` de un dataset.

Artefactos en --out:
    checkpoint.npz            modelo final (o posición de reanudación si se cortó con --max-steps)
    last_good.npz             último checkpoint bueno (se conserva si el entrenamiento diverge)
    train_log.tsv             TrainLog completo
    train_log_stage<n>.tsv    TrainLog por etapa
    manifest.json             configuración resuelta, semilla, artefactos y versiones
"""
import argparse
import logging
import os
from typing import Dict, List

from common.error_handlers import ConfigurationError, DivergenceError, handle_errors
from commands import parse_int_list, parse_overrides, write_manifest
from config import build_model_config, build_train_config, resolve_config
from services.checkpoint_service import load_checkpoint, save_checkpoint
from services.model_service import CA3Net
from services.synth_service import identity_remap, load_dataset
from services.trainer_service import LAST_GOOD_NAME, Trainer

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.npz"
LOG_NAME = "train_log.tsv"


def register(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("train", allow_abbrev=False, help="Entrena CA3Net en tres etapas",
                                   description="Claves extra como `--clave valor` sobreescriben la configuración.")
    parser.add_argument("--data", dest="data_dir", required=True, help="directorio del dataset (con train/)")
    parser.add_argument("--out", dest="out_dir", required=True, help="directorio de salida")
    parser.add_argument("--config", dest="config_file", default=None, help="archivo key=value")
    parser.add_argument("--preset", default=None, choices=["desk", "paper-faithful"])
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--lambda", dest="lambda_", type=float, default=None, help="peso de L_att (0 desactiva atributos)")
    parser.add_argument("--stages", default="1,2,3", help="etapas a ejecutar, p. ej. 1 o 1,2")
    parser.add_argument("--resume", default=None, help="checkpoint desde el cual reanudar")
    parser.add_argument("--max-steps", dest="max_steps", type=int, default=None,
                        help="detener tras N pasos totales (el checkpoint permite reanudar)")
    parser.set_defaults(run=run)
    return parser


def _train_dir(data_dir: str) -> str:
    nested = os.path.join(data_dir, "train")
    return nested if os.path.isdir(nested) else data_dir


def _write_logs(trainer: Trainer, out_dir: str) -> Dict[str, str]:
    paths = {"train_log": os.path.join(out_dir, LOG_NAME)}
    trainer.log.write(paths["train_log"])
    for stage in sorted({r.stage for r in trainer.log}):
        path = os.path.join(out_dir, f"train_log_stage{stage}.tsv")
        trainer.log.stage(stage).write(path)
        paths[f"train_log_stage{stage}"] = path
    return paths


@handle_errors
def run(args: argparse.Namespace, extra: List[str]) -> int:
    stages = parse_int_list(args.stages, "--stages")
    if not stages or any(s not in (1, 2, 3) for s in stages):
        raise ConfigurationError(f"--stages solo admite 1, 2 y 3: {args.stages}")
    flat = resolve_config(args.preset, args.config_file, parse_overrides(extra), args.seed, args.lambda_)

    split = load_dataset(_train_dir(args.data_dir))
    height, width = split.samples[0].image.shape[1:]
    if (height, width) != (flat["image_height"], flat["image_width"]):
        raise ConfigurationError(
            f"las imágenes miden {height}×{width} y la configuración espera "
            f"{flat['image_height']}×{flat['image_width']}"
        )
    model_config = build_model_config(flat, split.schema, len(identity_remap(split.samples)))
    train_config = build_train_config(flat)

    if args.resume:
        loaded = load_checkpoint(args.resume, expected_config=model_config)
        trainer = Trainer(loaded.model, train_config, split.samples, checkpoint_dir=args.out_dir)
        trainer.restore(loaded.optimizer, loaded.trainer_state)
    else:
        trainer = Trainer(CA3Net(model_config), train_config, split.samples, checkpoint_dir=args.out_dir)

    artifacts: Dict[str, str] = {}
    try:
        trainer.run(stages, max_steps=args.max_steps)
    except DivergenceError:
        artifacts.update(_write_logs(trainer, args.out_dir))
        artifacts["last_good"] = os.path.join(args.out_dir, LAST_GOOD_NAME)
        write_manifest(args.out_dir, "train", train_config.seed, flat, artifacts)
        raise

    artifacts["checkpoint"] = save_checkpoint(trainer.model, trainer.optimizer,
                                              os.path.join(args.out_dir, CHECKPOINT_NAME), trainer.state_dict())
    artifacts["last_good"] = os.path.join(args.out_dir, LAST_GOOD_NAME)
    artifacts.update(_write_logs(trainer, args.out_dir))
    write_manifest(args.out_dir, "train", train_config.seed, flat, artifacts)
    status = "interrumpido (reanudable)" if trainer.interrupted else "completo"
    logger.info(f"[TRAIN] ✅ Entrenamiento {status}: {trainer.global_step} pasos, etapas {trainer.completed}")
    return 0
