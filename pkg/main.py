import argparse
import logging
import os
import sys
from typing import List, Optional

# Necesitamos agregar nuestro directorio al path para que Python encuentre nuestros módulos
sys.path.insert(0, os.path.abspath(os.path.dirname(__file__)))

from logging_config import configure_logging
from config import APP_VERSION
from commands import eval as eval_command, synth, train, visualize

logger = logging.getLogger(__name__)

COMMANDS = (synth, train, eval_command, visualize)
# Solo estos comandos aceptan sobreescrituras `--clave valor`
ACCEPTS_OVERRIDES = {"synth", "train"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ca3",
        description="Re-identificación de personas con atributos y atención (escala de escritorio).",
        epilog="Códigos de salida: 0 ok, 1 inesperado, 2 uso/validación, 3 divergencia, "
               "4 checkpoint incompatible, 5 error de protocolo.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {APP_VERSION}")
    parser.add_argument("--log-level", dest="log_level", default=None, help="DEBUG, INFO, WARNING…")
    subparsers = parser.add_subparsers(dest="command", metavar="{synth,train,eval,visualize}")
    subparsers.required = True
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    # Configuramos el logging antes que nada para tener visibilidad de todo
    configure_logging(args.log_level)
    if extra and args.command not in ACCEPTS_OVERRIDES:
        parser.error(f"argumentos no reconocidos para {args.command}: {' '.join(extra)}")
    logger.debug(f"Comando {args.command} con {vars(args)}")
    return args.run(args, extra)


if __name__ == "__main__":
    sys.exit(main())
