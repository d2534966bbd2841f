"""
Configuraciones y datos diminutos compartidos por las pruebas.

El modelo chico usa imágenes 3×8×6 y un stem con stride 2 → T de 6×4×3
(grilla de 4×3), 3 atributos y 4 identidades.
"""
from typing import List

import numpy as np

from models import AttributeVariant, Sample
from schemas import AttributeSchema, AttributeSpec, ModelConfig, PartitionConfig, StemConfig, TrainConfig

TINY_HEIGHT, TINY_WIDTH = 8, 6


def tiny_schema(class_counts=(2, 3, 2)) -> AttributeSchema:
    return AttributeSchema(attributes=[
        AttributeSpec(name=f"a{i}", class_count=m, body_rank=i, granularity=len(class_counts) - i)
        for i, m in enumerate(class_counts)
    ])


def tiny_model_config(num_identities: int = 4, schema: AttributeSchema = None, **overrides) -> ModelConfig:
    fields = dict(
        stem=StemConfig(image_height=TINY_HEIGHT, image_width=TINY_WIDTH, stem_channels=[4],
                        feature_channels=6, stem_strides=[1, 2]),
        attention_channels=[4, 3],
        hidden_size=5,
        partition=PartitionConfig(h_stripes=2, v_stripes=3, reduced_dim=4),
        num_identities=num_identities,
        attribute_schema=schema or tiny_schema(),
        attribute_variant=AttributeVariant.FULL,
        seed=0,
    )
    fields.update(overrides)
    return ModelConfig(**fields)


def tiny_train_config(**overrides) -> TrainConfig:
    fields = dict(batch_size=4, stage1_epochs=2, stage2_epochs=2, stage3_epochs=1,
                  early_stop_window=5, seed=0)
    fields.update(overrides)
    return TrainConfig(**fields)


def tiny_samples(num_identities: int = 4, per_identity: int = 2, schema: AttributeSchema = None,
                 seed: int = 0) -> List[Sample]:
    """Imágenes aleatorias en la grilla de 1/65536 con etiquetas coherentes por identidad."""
    schema = schema or tiny_schema()
    rng = np.random.default_rng(seed)
    samples = []
    for identity in range(num_identities):
        attributes = [int(identity % a.class_count) for a in schema.attributes]
        base = rng.uniform(0.0, 1.0, size=(3, TINY_HEIGHT, TINY_WIDTH))
        for index in range(per_identity):
            noise = rng.normal(0.0, 0.05, size=base.shape)
            image = np.floor(np.clip(base + noise, 0.0, 0.999) * 65536) / 65536
            samples.append(Sample(image=image, identity=identity, camera=index % 2, attributes=attributes,
                                  filename=f"id{identity:04d}_s{index:03d}_c{index % 2}.pgm"))
    return samples
