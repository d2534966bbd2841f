"""
Composición del CA3Net: stem + rama de atributos + rama de apariencia.

El modelo tiene dos modos (train/eval) que solo afectan a BatchNorm. El
descriptor de recuperación se arma siempre como [f_app; f_att] con las ramas
que el modelo tenga activas.
"""
import logging
from typing import Dict, List, NamedTuple, Optional, Union

import numpy as np

from common.error_handlers import ModeError
from core import ops
from core.params import GROUP_MERGED, ModelParams, fan_in_normal, group_rng
from core.tensor import Tensor
from models import Mode, StageObjective
from schemas import ModelConfig
from services import appearance_service, attribute_service
from services.appearance_service import AppearanceOutput
from services.attribute_service import AttributeOutput
from services.stem_service import StemService

logger = logging.getLogger(__name__)


class ForwardOutput(NamedTuple):
    features: Tensor
    appearance: Optional[AppearanceOutput]
    attribute: Optional[AttributeOutput]
    descriptor: Tensor
    merged_logits: Optional[Tensor]


class CA3Net:
    """
    Modelo completo con sus parámetros.

    Atributos:
        config (ModelConfig): configuración validada.
        params (ModelParams): parámetros y buffers de BN.
        mode (Mode): train o eval.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params = ModelParams()
        self.mode = Mode.TRAIN

        _, height, width = config.feature_shape
        if config.use_appearance:
            appearance_service.check_partition(height, width, config.partition)

        StemService.init_params(self.params, config.stem, config.seed)
        if config.use_attribute:
            attribute_service.init_params(self.params, config)
        if config.use_appearance:
            appearance_service.init_params(self.params, config)
        if config.merged_head:
            rng = group_rng(config.seed, GROUP_MERGED)
            length = config.descriptor_length
            self.params.add("merged.head.weight",
                            fan_in_normal(rng, (config.num_identities, length), length, gain=1.0), GROUP_MERGED)
            self.params.add("merged.head.bias", np.zeros(config.num_identities), GROUP_MERGED)
        logger.info(
            f"CA3Net listo: {len(self.params)} tensores, {self.params.count()} parámetros, "
            f"T={config.feature_shape}, descriptor={config.descriptor_length}"
        )

    # ----- modos -----
    def train(self) -> "CA3Net":
        self.mode = Mode.TRAIN
        return self

    def eval(self) -> "CA3Net":
        self.mode = Mode.EVAL
        return self

    def require_mode(self, mode: Mode) -> None:
        if self.mode != mode:
            raise ModeError(f"el modelo está en modo {self.mode.value}, se requiere {mode.value}")

    @property
    def schema(self):
        return self.config.attribute_schema

    # ----- forward -----
    def forward(self, images: Union[np.ndarray, Tensor], with_attribute: Optional[bool] = None,
                with_appearance: Optional[bool] = None) -> ForwardOutput:
        """
        Forward sobre un batch (N,3,H,W).

        with_attribute / with_appearance permiten saltarse una rama (por ejemplo
        la de atributos cuando λ = 0); por defecto se usan las ramas del modelo.
        """
        config = self.config
        run_attribute = config.use_attribute if with_attribute is None else (with_attribute and config.use_attribute)
        run_appearance = config.use_appearance if with_appearance is None else (with_appearance and config.use_appearance)

        batch = images if isinstance(images, Tensor) else Tensor(images)
        if batch.ndim == 3:
            batch = ops.reshape(batch, (1,) + batch.shape)
        T = StemService.forward(batch, self.params, config.stem, self.mode)

        appearance = appearance_service.appearance_forward(T, config, self.params, self.mode) if run_appearance else None
        attribute = (attribute_service.attribute_forward(T, self.schema, self.params, config, self.mode)
                     if run_attribute else None)

        parts = []
        if appearance is not None:
            parts.append(appearance.descriptor)
        if attribute is not None:
            parts.append(attribute.feature)
        descriptor = parts[0] if len(parts) == 1 else ops.concat(parts, axis=1)

        merged_logits = None
        if "merged.head.weight" in self.params and descriptor.shape[1] == config.descriptor_length:
            weight = self.params["merged.head.weight"]
            merged_logits = ops.add(ops.matmul(descriptor, ops.transpose(weight, (1, 0))),
                                    self.params["merged.head.bias"])
        return ForwardOutput(T, appearance, attribute, descriptor, merged_logits)

    def sweep_labels(self, attributes: np.ndarray) -> np.ndarray:
        """Reordena etiquetas (N, C) del orden de listado al orden de barrido."""
        return np.asarray(attributes)[:, self.schema.order()]

    # ----- grupos entrenables -----
    def stage_groups(self, objective: StageObjective, lambda_: float) -> List[str]:
        """
        Grupos de parámetros en el camino del gradiente del objetivo.

        appearance: stem + apariencia; joint: además atributos si λ > 0;
        merged_identity: todo lo que alimenta la cabeza fusionada.
        """
        groups = ["stem"]
        if objective == StageObjective.APPEARANCE:
            groups.append("appearance")
        elif objective == StageObjective.JOINT:
            if self.config.use_appearance:
                groups.append("appearance")
            if self.config.use_attribute and lambda_ > 0:
                groups.append("attribute")
        else:
            if self.config.use_appearance:
                groups.append("appearance")
            if self.config.use_attribute:
                groups.append("attribute")
            groups.append("merged")
        return [g for g in groups if self.params.names([g])]

    def stage_param_names(self, objective: StageObjective, lambda_: float) -> List[str]:
        """Parámetros a actualizar; con la cabeza fusionada las cabezas de atributo no reciben pérdida."""
        names = self.params.names(self.stage_groups(objective, lambda_))
        if objective == StageObjective.MERGED_IDENTITY:
            names = [n for n in names if not n.startswith("attr.head.")]
        return names

    def snapshot(self) -> Dict[str, np.ndarray]:
        return self.params.snapshot()
