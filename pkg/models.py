"""
Enums y registros pequeños compartidos por todo el paquete.

Incluye:
- Mode, OrderPolicy, PointwiseKind (Enum)
- AttributeVariant, AppearanceBranch, StageObjective (Enum)
- Sample
- Descriptor
"""

from enum import Enum
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator


class Mode(str, Enum):
	TRAIN = "train"
	EVAL = "eval"


class OrderPolicy(str, Enum):
	TOP_DOWN = "top_down"
	FINE_ABSTRACT = "fine_abstract"
	CUSTOM = "custom"


class PointwiseKind(str, Enum):
	RELU = "relu"
	TANH = "tanh"
	SIGMOID = "sigmoid"


class AttributeVariant(str, Enum):
	FULL = "full"            # bloque de atención + refinamiento con h_{t-1} + LSTM
	ATTENTION = "attention"  # solo bloque de atención, sin contexto del estado oculto
	LSTM = "lstm"            # LSTM sobre la media espacial, sin atención
	BASE = "base"            # cabezas directas sobre la media espacial de X_f


class AppearanceBranch(str, Enum):
	HORIZONTAL = "horizontal"
	VERTICAL = "vertical"
	GLOBAL = "global"


class StageObjective(str, Enum):
	APPEARANCE = "appearance"
	JOINT = "joint"
	MERGED_IDENTITY = "merged_identity"


class Sample(BaseModel):
	"""Una imagen con su identidad, cámara y etiquetas de atributos (a nivel identidad)."""
	model_config = ConfigDict(arbitrary_types_allowed=True)

	image: np.ndarray
	identity: int = Field(..., ge=0)
	camera: int = Field(default=0, ge=0)
	attributes: List[int] = Field(default_factory=list)
	filename: Optional[str] = None

	@field_validator("image")
	@classmethod
	def validate_image(cls, v: np.ndarray) -> np.ndarray:
		if v.ndim != 3 or v.shape[0] != 3:
			raise ValueError(f"la imagen debe ser 3×H×W, se recibió {v.shape}")
		return np.asarray(v, dtype=np.float64)


class Descriptor(BaseModel):
	"""Descriptor de recuperación [f_app; f_att] de una muestra."""
	model_config = ConfigDict(arbitrary_types_allowed=True)

	vector: np.ndarray
	identity: int
	camera: int = 0

	@property
	def length(self) -> int:
		return int(self.vector.shape[0])


__all__ = [
	"Mode",
	"OrderPolicy",
	"PointwiseKind",
	"AttributeVariant",
	"AppearanceBranch",
	"StageObjective",
	"Sample",
	"Descriptor",
]
