import logging
import sys
from typing import Optional, Union


def setup_logging(level: Optional[Union[int, str]] = None):
    """Configura el sistema de logging para la CLI (nivel por defecto: CA3_LOG_LEVEL)."""
    if level is None:
        from config import LOG_LEVEL
        level = LOG_LEVEL
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
        if not isinstance(level, int):
            level = logging.INFO

    log_format = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

    # Configuración básica
    logging.basicConfig(
        level=level,
        format=log_format,
        handlers=[
            logging.StreamHandler(sys.stdout)  # Asegurar salida a stdout
        ]
    )

    root_logger = logging.getLogger()
    root_logger.setLevel(level)

    # Pillow es muy verboso en DEBUG al abrir cada imagen
    logging.getLogger("PIL").setLevel(logging.WARNING)

    logger = logging.getLogger(__name__)
    logger.debug("Sistema de logging configurado.")


def configure_logging(level: Optional[Union[int, str]] = None):
    """
    Alias para setup_logging; es lo primero que llama main.py.
    """
    return setup_logging(level)
