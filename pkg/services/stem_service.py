"""
Servicio del stem convolucional: imagen → tensor de características T.

Cada capa es conv 3×3 (pad 1, sin bias) + BN + ReLU. Con el preset desk,
3×96×48 → 128×24×12, la misma grilla espacial que usan las franjas de apariencia.
"""
import logging
from typing import Union

import numpy as np

from common.error_handlers import DimensionError
from core import ops
from core.params import GROUP_STEM, ModelParams, fan_in_normal, group_rng
from core.tensor import Tensor
from models import Mode
from schemas import StemConfig

logger = logging.getLogger(__name__)


class StemService:
    """Construcción de parámetros y forward del stem."""

    @classmethod
    def init_params(cls, params: ModelParams, config: StemConfig, seed: int) -> None:
        rng = group_rng(seed, GROUP_STEM)
        in_channels = 3
        for index, out_channels in enumerate(config.layer_channels):
            weight = fan_in_normal(rng, (out_channels, in_channels, 3, 3), fan_in=in_channels * 9)
            params.add(f"stem.conv{index}.weight", weight, GROUP_STEM)
            params.add_batch_norm(f"stem.bn{index}", out_channels, GROUP_STEM)
            in_channels = out_channels

    @classmethod
    def forward(cls, images: Tensor, params: ModelParams, config: StemConfig, mode: Union[Mode, str]) -> Tensor:
        """
        Lanza:
            DimensionError: si las imágenes no son (N,3,H_img,W_img).
        """
        if images.ndim != 4 or images.shape[1] != 3:
            raise DimensionError(f"el stem espera (N,3,H,W), se recibió {images.shape}", axis="channel")
        if images.shape[2] != config.image_height:
            raise DimensionError(f"alto {images.shape[2]} != {config.image_height}", axis="height")
        if images.shape[3] != config.image_width:
            raise DimensionError(f"ancho {images.shape[3]} != {config.image_width}", axis="width")

        x = images
        for index, stride in enumerate(config.stem_strides):
            x = ops.conv2d(x, params[f"stem.conv{index}.weight"], stride=stride, pad=1)
            name = f"stem.bn{index}"
            x = ops.batch_norm(x, params[f"{name}.gamma"], params[f"{name}.beta"], params.buffers[name], mode)
            x = ops.relu(x)
        return x


def stem_forward(image: Union[Tensor, np.ndarray], params: ModelParams, config: StemConfig,
                 mode: Union[Mode, str] = Mode.EVAL) -> Tensor:
    """Forward de una imagen 3×H×W (o un batch N×3×H×W) hacia T."""
    tensor = image if isinstance(image, Tensor) else Tensor(image)
    if tensor.ndim == 3:
        return ops.take(StemService.forward(ops.reshape(tensor, (1,) + tensor.shape), params, config, mode), 0)
    return StemService.forward(tensor, params, config, mode)
