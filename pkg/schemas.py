"""
Esquemas Pydantic para validar la configuración y los registros del sistema.

Aquí vive todo lo que se valida antes de tocar un solo número: la forma del
stem, el esquema de atributos y su orden, la partición en franjas, la
configuración de entrenamiento, la especificación del dataset sintético y los
registros que se escriben a disco (TrainLog, EvalReport, RunManifest).

Si la CLI sale con código 2 por "configuración inválida", el mensaje viene de
algún validador de este archivo.
"""

import math
from typing import Any, ClassVar, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from models import AppearanceBranch, AttributeVariant, OrderPolicy, StageObjective

# ===== Backbone =====

class StemConfig(BaseModel):
    """Forma del stem convolucional.

    Atributos:
        image_height (int): alto de la imagen de entrada.
        image_width (int): ancho de la imagen de entrada.
        stem_channels (List[int]): anchos de las capas conv intermedias.
        feature_channels (int): canales de la última capa (C_f de T).
        stem_strides (List[int]): stride de cada capa, una más que stem_channels.
    """
    image_height: int = Field(96, ge=1)
    image_width: int = Field(48, ge=1)
    stem_channels: List[int] = Field(default_factory=lambda: [32, 64, 128])
    feature_channels: int = Field(128, ge=1)
    stem_strides: List[int] = Field(default_factory=lambda: [1, 2, 2, 1])

    @model_validator(mode="after")
    def check_layers(self) -> "StemConfig":
        if len(self.stem_strides) != len(self.stem_channels) + 1:
            raise ValueError(
                f"stem_strides necesita {len(self.stem_channels) + 1} valores (uno por capa), "
                f"se recibieron {len(self.stem_strides)}"
            )
        if any(s < 1 for s in self.stem_strides) or any(c < 1 for c in self.stem_channels):
            raise ValueError("canales y strides del stem deben ser positivos")
        return self

    @property
    def layer_channels(self) -> List[int]:
        return list(self.stem_channels) + [self.feature_channels]

    @property
    def feature_shape(self) -> Tuple[int, int, int]:
        """(C_f, H_f, W_f); cada conv 3×3 con pad 1 produce ceil(extensión/stride)."""
        height, width = self.image_height, self.image_width
        for stride in self.stem_strides:
            height = (height - 1) // stride + 1
            width = (width - 1) // stride + 1
        return self.feature_channels, height, width


# ===== Atributos =====

class AttributeSpec(BaseModel):
    """Un atributo del esquema.

    Atributos:
        name (str): nombre único (también nombre del archivo de atención exportado).
        class_count (int): número de clases m (≥ 2).
        body_rank (int): posición en el orden top-down (de la cabeza a los pies).
        granularity (int): posición en el orden fino-a-abstracto.
    """
    name: str = Field(..., min_length=1)
    class_count: int = Field(..., ge=2)
    body_rank: int = 0
    granularity: int = 0

    @field_validator("name")
    @classmethod
    def validate_name(cls, v: str) -> str:
        if any(ch in v for ch in "\t\n/\\ "):
            raise ValueError(f"nombre de atributo inválido: {v!r}")
        return v


class AttributeSchema(BaseModel):
    """Lista de atributos más la política de orden del barrido LSTM.

    Las etiquetas de las muestras siempre van en el orden de listado; order()
    devuelve la permutación que usa el modelo para recorrerlas.
    """
    attributes: List[AttributeSpec]
    order_policy: OrderPolicy = OrderPolicy.TOP_DOWN
    custom_order: Optional[List[int]] = None

    @model_validator(mode="after")
    def check_schema(self) -> "AttributeSchema":
        if not self.attributes:
            raise ValueError("el esquema necesita al menos un atributo")
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise ValueError(f"nombres de atributo repetidos: {names}")
        if self.order_policy == OrderPolicy.CUSTOM:
            if self.custom_order is None:
                raise ValueError("order_policy=custom requiere custom_order")
            if sorted(self.custom_order) != list(range(len(self.attributes))):
                raise ValueError(f"custom_order no es una permutación de 0..{len(self.attributes) - 1}")
        return self

    @property
    def size(self) -> int:
        return len(self.attributes)

    @property
    def names(self) -> List[str]:
        return [a.name for a in self.attributes]

    def order(self) -> List[int]:
        """Índices (en orden de listado) en el orden de barrido."""
        indices = list(range(len(self.attributes)))
        if self.order_policy == OrderPolicy.CUSTOM:
            return list(self.custom_order)
        if self.order_policy == OrderPolicy.FINE_ABSTRACT:
            return sorted(indices, key=lambda i: self.attributes[i].granularity)
        return sorted(indices, key=lambda i: self.attributes[i].body_rank)

    def inverse_order(self) -> List[int]:
        order = self.order()
        inverse = [0] * len(order)
        for position, index in enumerate(order):
            inverse[index] = position
        return inverse

    def ordered(self) -> List[AttributeSpec]:
        return [self.attributes[i] for i in self.order()]

    def with_policy(self, policy: OrderPolicy, custom_order: Optional[List[int]] = None) -> "AttributeSchema":
        return AttributeSchema(attributes=self.attributes, order_policy=policy, custom_order=custom_order)


# ===== Apariencia =====

class PartitionConfig(BaseModel):
    """Partición de T en franjas y ancho reducido r."""
    h_stripes: int = Field(6, ge=1)
    v_stripes: int = Field(3, ge=1)
    reduced_dim: int = Field(64, ge=1)
    share_reduction: bool = False
    branches: List[AppearanceBranch] = Field(
        default_factory=lambda: [AppearanceBranch.HORIZONTAL, AppearanceBranch.VERTICAL, AppearanceBranch.GLOBAL]
    )

    @field_validator("branches")
    @classmethod
    def canonical_branches(cls, v: List[AppearanceBranch]) -> List[AppearanceBranch]:
        if not v:
            raise ValueError("se necesita al menos una rama de apariencia")
        canonical = [AppearanceBranch.HORIZONTAL, AppearanceBranch.VERTICAL, AppearanceBranch.GLOBAL]
        return [b for b in canonical if b in v]

    def part_counts(self) -> Dict[AppearanceBranch, int]:
        counts = {
            AppearanceBranch.HORIZONTAL: self.h_stripes,
            AppearanceBranch.VERTICAL: self.v_stripes,
            AppearanceBranch.GLOBAL: 1,
        }
        return {b: counts[b] for b in self.branches}

    @property
    def num_parts(self) -> int:
        return sum(self.part_counts().values())

    @property
    def descriptor_length(self) -> int:
        return self.reduced_dim * self.num_parts


# ===== Modelo completo =====

class ModelConfig(BaseModel):
    """Todo lo necesario para construir un CA3Net y sus parámetros."""
    stem: StemConfig = Field(default_factory=StemConfig)
    attention_channels: List[int] = Field(default_factory=lambda: [32, 16])
    hidden_size: int = Field(64, ge=1)
    lstm_bias: bool = True
    attribute_variant: AttributeVariant = AttributeVariant.FULL
    partition: PartitionConfig = Field(default_factory=PartitionConfig)
    use_attribute: bool = True
    use_appearance: bool = True
    merged_head: bool = False
    num_identities: int = Field(..., ge=1)
    attribute_schema: AttributeSchema
    seed: int = 0

    @model_validator(mode="after")
    def check_model(self) -> "ModelConfig":
        if len(self.attention_channels) != 2:
            raise ValueError("attention_channels necesita exactamente dos anchos (1×1 y 3×3)")
        if not (self.use_attribute or self.use_appearance):
            raise ValueError("el modelo necesita al menos una rama (use_attribute o use_appearance)")
        return self

    @property
    def feature_shape(self) -> Tuple[int, int, int]:
        return self.stem.feature_shape

    @property
    def attribute_feature_length(self) -> int:
        if not self.use_attribute:
            return 0
        if self.attribute_variant == AttributeVariant.BASE:
            return self.hidden_size
        return self.hidden_size * self.attribute_schema.size

    @property
    def appearance_feature_length(self) -> int:
        return self.partition.descriptor_length if self.use_appearance else 0

    @property
    def descriptor_length(self) -> int:
        """r·(h+v+1) + d·C con las ramas por defecto."""
        return self.appearance_feature_length + self.attribute_feature_length


# ===== Entrenamiento =====

class StageSpec(BaseModel):
    """Una etapa: qué pérdida se optimiza, qué grupos se entrenan y cuántas épocas."""
    stage: int = Field(..., ge=1, le=3)
    objective: StageObjective
    epochs: int = Field(..., ge=0)
    trainable_groups: List[str]


class TrainConfig(BaseModel):
    """Hiperparámetros de las tres etapas."""
    model_config = ConfigDict(populate_by_name=True)

    lambda_: float = Field(2.0, ge=0.0, alias="lambda")
    learning_rate: float = Field(0.01, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(5e-4, ge=0.0)
    nesterov: bool = True
    batch_size: int = Field(16, ge=2)
    stage1_epochs: int = Field(20, ge=0)
    stage2_epochs: int = Field(30, ge=0)
    stage3_epochs: int = Field(20, ge=0)
    early_stop_window: int = Field(3, ge=1)
    early_stop_tolerance: float = Field(1e-3, ge=0.0)
    lr_decay_fraction: float = Field(0.25, ge=0.0, le=1.0)
    lr_decay_factor: float = Field(0.1, gt=0.0, le=1.0)
    stage3_objective: StageObjective = StageObjective.APPEARANCE
    flip_probability: float = Field(0.5, ge=0.0, le=1.0)
    erase_probability: float = Field(0.5, ge=0.0, le=1.0)
    seed: int = 0

    @field_validator("stage3_objective")
    @classmethod
    def validate_stage3(cls, v: StageObjective) -> StageObjective:
        if v == StageObjective.JOINT:
            raise ValueError("stage3_objective debe ser appearance o merged_identity")
        return v

    def epochs_for(self, stage: int) -> int:
        return {1: self.stage1_epochs, 2: self.stage2_epochs, 3: self.stage3_epochs}[stage]

    def learning_rate_at(self, stage: int, epoch: int) -> float:
        """Constante dentro de la etapa y ×lr_decay_factor en la fracción final (nunca desde la primera época)."""
        epochs = self.epochs_for(stage)
        decay_start = max(1, int(math.floor(epochs * (1.0 - self.lr_decay_fraction))))
        if epochs > 0 and epoch >= decay_start:
            return self.learning_rate * self.lr_decay_factor
        return self.learning_rate


# ===== Dataset sintético =====

class SynthSpec(BaseModel):
    """Especificación del generador de peatones sintéticos.

    Atributos:
        identities (int): número total de identidades K.
        samples_per_identity (int): imágenes por identidad.
        train_fraction (float): fracción de identidades para entrenamiento.
        queries_per_identity (int): imágenes de consulta por identidad de prueba.
        cameras (int): cantidad de etiquetas de cámara sintéticas.
        image_height (int), image_width (int): tamaño de las imágenes.
        illumination_range (Tuple[float, float]): factor de iluminación por muestra.
        jitter (int): traslación horizontal/vertical máxima en píxeles.
        noise_sigma (float): desviación del ruido gaussiano de fondo.
        regions (Dict[str, Tuple[float, float, float, float]]): plantilla
            (fila0, fila1, col0, col1) en fracciones de la imagen por atributo.
    """
    identities: int = Field(20, ge=2)
    samples_per_identity: int = Field(10, ge=2)
    train_fraction: float = Field(0.5, gt=0.0, lt=1.0)
    queries_per_identity: int = Field(2, ge=1)
    cameras: int = Field(4, ge=1)
    image_height: int = Field(96, ge=8)
    image_width: int = Field(48, ge=4)
    illumination_range: Tuple[float, float] = (0.75, 1.0)
    jitter: int = Field(2, ge=0)
    noise_sigma: float = Field(0.03, ge=0.0)
    regions: Dict[str, Tuple[float, float, float, float]] = Field(default_factory=dict)
    attribute_schema: Optional[AttributeSchema] = None

    @model_validator(mode="after")
    def check_spec(self) -> "SynthSpec":
        low, high = self.illumination_range
        if not (0.0 < low <= high <= 1.0):
            raise ValueError(f"illumination_range inválido: {self.illumination_range}")
        if self.queries_per_identity >= self.samples_per_identity:
            raise ValueError("queries_per_identity debe dejar al menos una imagen para la galería")
        if self.train_identities < 1 or self.test_identities < 1:
            raise ValueError(f"con {self.identities} identidades el split deja un lado vacío")
        for name, (r0, r1, c0, c1) in self.regions.items():
            if not (0.0 <= r0 < r1 <= 1.0 and 0.0 <= c0 < c1 <= 1.0):
                raise ValueError(f"región inválida para {name}: {(r0, r1, c0, c1)}")
        if self.attribute_schema is not None:
            unknown = set(self.regions) - set(self.attribute_schema.names)
            if unknown:
                raise ValueError(f"regiones para atributos inexistentes: {sorted(unknown)}")
        return self

    @property
    def train_identities(self) -> int:
        return int(round(self.identities * self.train_fraction))

    @property
    def test_identities(self) -> int:
        return self.identities - self.train_identities


# ===== Registros =====

class TrainLogRecord(BaseModel):
    """Una fila del TrainLog (un paso de optimización)."""
    stage: int
    epoch: int
    step: int
    loss_app: float
    loss_att: float
    loss_merged: float = 0.0
    loss_total: float
    learning_rate: float

    COLUMNS: ClassVar[Tuple[str, ...]] = ("stage", "epoch", "step", "loss_app", "loss_att", "loss_merged", "loss_total", "learning_rate")

    def to_row(self) -> str:
        return "\t".join([
            str(self.stage), str(self.epoch), str(self.step),
            repr(self.loss_app), repr(self.loss_att), repr(self.loss_merged),
            repr(self.loss_total), repr(self.learning_rate),
        ])


class EvalReport(BaseModel):
    """Resultado de evaluación: CMC en los rangos pedidos, mAP y detalle por consulta."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    ranks: List[int]
    cmc: Dict[int, float]
    mean_ap: float = Field(..., ge=0.0, le=1.0)
    average_precision: List[float]
    first_hit_ranks: List[int]
    num_queries: int
    num_gallery: int
    cmc_curve: List[float] = Field(default_factory=list)
    distances: Optional[Any] = Field(default=None, exclude=True)

    @model_validator(mode="after")
    def check_report(self) -> "EvalReport":
        values = [self.cmc[k] for k in sorted(self.cmc)]
        if any(v < 0.0 or v > 1.0 for v in values):
            raise ValueError("valores CMC fuera de [0,1]")
        if any(b < a for a, b in zip(values, values[1:])):
            raise ValueError("la curva CMC debe ser no decreciente")
        return self


class RunManifest(BaseModel):
    """Qué produjo un comando: configuración resuelta, semilla, artefactos y versiones."""
    command: str
    seed: int
    config: Dict[str, Any] = Field(default_factory=dict)
    artifacts: Dict[str, str] = Field(default_factory=dict)
    versions: Dict[str, str] = Field(default_factory=dict)
