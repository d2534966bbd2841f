"""
Servicio de entrenamiento en tres etapas.

- Etapa 1: solo L_app; la rama de atributos ni se evalúa ni se actualiza.
- Etapa 2: L = L_app + λ·L_att con stem, apariencia y atributos.
- Etapa 3: re-identificación pura (appearance) o cabeza de identidad sobre
  [f_app; f_att] (merged_identity), según stage3_objective.

Determinismo: el orden de los batches de cada época sale de
SeedSequence([seed, etapa, época]) y la augmentación de
SeedSequence([seed, etapa, época, batch]); por eso un entrenamiento
reanudado desde un checkpoint repite exactamente el ininterrumpido.
"""
import logging
import os
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from common.error_handlers import ConfigurationError, DivergenceError
from common.io_utils import atomic_write_text
from core import ops
from core.optim import SgdState, sgd_step
from core.tensor import GradTape, Tensor
from models import Sample, StageObjective
from schemas import StageSpec, TrainConfig, TrainLogRecord
from services.appearance_service import appearance_loss
from services.attribute_service import attribute_loss
from services.checkpoint_service import save_checkpoint
from services.model_service import CA3Net
from services.synth_service import augment, identity_remap

logger = logging.getLogger(__name__)

LAST_GOOD_NAME = "last_good.npz"


def total_loss(loss_app: Union[Tensor, float], loss_att: Union[Tensor, float], lambda_: float) -> Union[Tensor, float]:
    """L = L_app + λ·L_att (acepta tensores o escalares)."""
    if isinstance(loss_app, Tensor) or isinstance(loss_att, Tensor):
        return ops.add(ops.as_tensor(loss_app), ops.scale(ops.as_tensor(loss_att), lambda_))
    return float(loss_app) + float(lambda_) * float(loss_att)


class TrainLog:
    """Registros por paso; se escribe como TSV sin marcas de tiempo."""

    def __init__(self, records: Optional[List[TrainLogRecord]] = None):
        self.records: List[TrainLogRecord] = list(records or [])

    def append(self, record: TrainLogRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def stage(self, stage: int) -> "TrainLog":
        return TrainLog([r for r in self.records if r.stage == stage])

    def to_tsv(self) -> str:
        lines = ["\t".join(TrainLogRecord.COLUMNS)] + [r.to_row() for r in self.records]
        return "\n".join(lines) + "\n"

    def write(self, path: str) -> None:
        atomic_write_text(path, self.to_tsv())


class Trainer:
    """
    Dueño exclusivo del modelo durante el entrenamiento.

    Atributos:
        model (CA3Net): modelo a entrenar.
        config (TrainConfig): hiperparámetros.
        samples (List[Sample]): conjunto de entrenamiento.
        optimizer (SgdState): estado de SGD (velocidades incluidas).
        log (TrainLog): registros acumulados.
        checkpoint_dir (Optional[str]): dónde guardar el último checkpoint bueno.
    """

    def __init__(self, model: CA3Net, config: TrainConfig, samples: Sequence[Sample],
                 checkpoint_dir: Optional[str] = None):
        if len(samples) < 2:
            raise ConfigurationError("se necesitan al menos 2 muestras de entrenamiento")
        self.model = model
        self.config = config
        self.samples = list(samples)
        self.checkpoint_dir = checkpoint_dir
        self.optimizer = SgdState(config.learning_rate, config.momentum, config.weight_decay, config.nesterov)
        self.log = TrainLog()
        self.history: Dict[int, List[float]] = {}
        self.completed: List[int] = []
        self.position: Optional[Dict[str, Any]] = None
        self.global_step = 0
        self.interrupted = False

        remap = identity_remap(self.samples)
        if len(remap) != model.config.num_identities:
            raise ConfigurationError(
                f"el modelo clasifica {model.config.num_identities} identidades, el conjunto tiene {len(remap)}"
            )
        self.identities = np.array([remap[s.identity] for s in self.samples])
        self.attributes = np.array([s.attributes for s in self.samples], dtype=np.int64)

    # ----- etapas -----
    def stage_spec(self, stage: int) -> StageSpec:
        objective = {1: StageObjective.APPEARANCE, 2: StageObjective.JOINT, 3: self.config.stage3_objective}[stage]
        groups = self.model.stage_groups(objective, self.config.lambda_)
        return StageSpec(stage=stage, objective=objective, epochs=self.config.epochs_for(stage), trainable_groups=groups)

    def _skip_reason(self, spec: StageSpec) -> Optional[str]:
        model_config = self.model.config
        if spec.epochs == 0:
            return "0 épocas"
        if spec.objective == StageObjective.APPEARANCE and not model_config.use_appearance:
            return "el modelo no tiene rama de apariencia"
        if spec.objective == StageObjective.MERGED_IDENTITY and not model_config.merged_head:
            return "el modelo no tiene cabeza fusionada"
        if spec.objective == StageObjective.JOINT and not model_config.use_appearance and (
                not model_config.use_attribute or self.config.lambda_ == 0):
            return "no hay pérdida activa"
        return None

    # ----- un paso -----
    def _batch_images(self, indices: Sequence[int], rng: Optional[np.random.Generator]) -> np.ndarray:
        images = []
        for index in indices:
            image = self.samples[index].image
            if rng is not None:
                image = augment(image, rng, self.config.flip_probability, self.config.erase_probability)
            images.append(image)
        return np.stack(images)

    def step(self, spec: StageSpec, indices: Sequence[int], epoch: int = 0, batch: int = 0,
             augment_images: bool = True) -> TrainLogRecord:
        """
        Un paso de optimización sobre las muestras indicadas.

        Lanza:
            DivergenceError: si la pérdida deja de ser finita (antes de tocar los parámetros).
        """
        config = self.config
        model = self.model.train()
        indices = np.asarray(indices)
        rng = (np.random.default_rng(np.random.SeedSequence([config.seed, spec.stage, epoch, batch]))
               if augment_images else None)
        images = self._batch_images(indices, rng)
        identities = self.identities[indices]

        with_attribute = spec.objective == StageObjective.MERGED_IDENTITY or (
            spec.objective == StageObjective.JOINT and config.lambda_ > 0)
        with GradTape() as tape:
            out = model.forward(images, with_attribute=with_attribute)
            zero = Tensor(0.0)
            loss_app = appearance_loss(out.appearance.logits, identities) if out.appearance is not None else zero
            loss_att = zero
            loss_merged = zero
            if spec.objective == StageObjective.JOINT and out.attribute is not None:
                loss_att = attribute_loss(out.attribute.logits, model.sweep_labels(self.attributes[indices]))
            if spec.objective == StageObjective.MERGED_IDENTITY:
                loss_merged = ops.softmax_cross_entropy(out.merged_logits, identities)
            loss = total_loss(loss_app, loss_att, config.lambda_)
            if spec.objective == StageObjective.MERGED_IDENTITY:
                loss = ops.add(loss, loss_merged)

        value = loss.item()
        if not np.isfinite(value):
            last_good = os.path.join(self.checkpoint_dir, LAST_GOOD_NAME) if self.checkpoint_dir else None
            raise DivergenceError(
                f"pérdida no finita en etapa {spec.stage}, época {epoch}, batch {batch}", last_good
            )
        tape.backward(loss)
        sgd_step(model.params, self.optimizer, model.stage_param_names(spec.objective, config.lambda_))
        model.params.zero_grad()

        record = TrainLogRecord(
            stage=spec.stage, epoch=epoch, step=batch,
            loss_app=loss_app.item(), loss_att=loss_att.item(), loss_merged=loss_merged.item(),
            loss_total=value, learning_rate=self.optimizer.learning_rate,
        )
        logger.debug(f"[TRAIN] etapa {spec.stage} época {epoch} batch {batch}: L={value:.6f}")
        return record

    # ----- épocas -----
    def epoch_batches(self, stage: int, epoch: int) -> List[np.ndarray]:
        """Barajado uniforme por época; se descartan restos de menos de 2 muestras (BN)."""
        order = np.random.default_rng(np.random.SeedSequence([self.config.seed, stage, epoch])).permutation(len(self.samples))
        size = self.config.batch_size
        batches = [order[i:i + size] for i in range(0, len(order), size)]
        return [b for b in batches if len(b) >= 2]

    def _should_stop(self, history: List[float]) -> bool:
        window = self.config.early_stop_window
        if len(history) <= window:
            return False
        previous = history[-1 - window]
        improvement = (previous - history[-1]) / max(abs(previous), 1e-12)
        return improvement < self.config.early_stop_tolerance

    def _save_last_good(self) -> None:
        if self.checkpoint_dir:
            save_checkpoint(self.model, self.optimizer, os.path.join(self.checkpoint_dir, LAST_GOOD_NAME),
                            self.state_dict())

    def train_stage(self, spec: StageSpec, max_steps: Optional[int] = None) -> bool:
        """
        Corre (o continúa) una etapa. Devuelve False si se detuvo por max_steps.
        """
        resuming = self.position is not None and self.position["stage"] == spec.stage
        if resuming:
            start_epoch, start_batch = self.position["epoch"], self.position["batch"]
            epoch_sum, epoch_steps = self.position["epoch_sum"], self.position["epoch_steps"]
        else:
            start_epoch, start_batch, epoch_sum, epoch_steps = 0, 0, 0.0, 0
            self.optimizer.reset()
            self.history[spec.stage] = []
            logger.info(f"[TRAIN] Etapa {spec.stage} ({spec.objective.value}): grupos {spec.trainable_groups}, "
                        f"{spec.epochs} épocas")
        history = self.history.setdefault(spec.stage, [])

        for epoch in range(start_epoch, spec.epochs):
            self.optimizer.learning_rate = self.config.learning_rate_at(spec.stage, epoch)
            batches = self.epoch_batches(spec.stage, epoch)
            first = start_batch if epoch == start_epoch else 0
            if epoch != start_epoch:
                epoch_sum, epoch_steps = 0.0, 0
            for batch in range(first, len(batches)):
                if max_steps is not None and self.global_step >= max_steps:
                    self.position = {"stage": spec.stage, "epoch": epoch, "batch": batch,
                                     "epoch_sum": epoch_sum, "epoch_steps": epoch_steps}
                    return False
                record = self.step(spec, batches[batch], epoch, batch)
                self.log.append(record)
                self.global_step += 1
                epoch_sum += record.loss_total
                epoch_steps += 1

            mean = epoch_sum / max(epoch_steps, 1)
            history.append(mean)
            logger.info(f"[TRAIN] etapa {spec.stage} época {epoch}: pérdida media {mean:.5f}, "
                        f"lr {self.optimizer.learning_rate:g}")
            early = self._should_stop(history)
            if early or epoch + 1 == spec.epochs:
                self._finish_stage(spec.stage)
                self._save_last_good()
                if early:
                    logger.info(f"[TRAIN] etapa {spec.stage}: parada temprana en la época {epoch}")
                return True
            self.position = {"stage": spec.stage, "epoch": epoch + 1, "batch": 0, "epoch_sum": 0.0, "epoch_steps": 0}
            self._save_last_good()

        self._finish_stage(spec.stage)
        return True

    def _finish_stage(self, stage: int) -> None:
        self.position = None
        if stage not in self.completed:
            self.completed.append(stage)

    def run(self, stages: Sequence[int] = (1, 2, 3), max_steps: Optional[int] = None) -> TrainLog:
        """
        Ejecuta las etapas pedidas en orden, saltando las ya completadas.

        Con max_steps se detiene tras ese número total de pasos (self.interrupted
        queda en True y state_dict() guarda la posición para reanudar).
        """
        self.interrupted = False
        if self.global_step == 0:
            self._save_last_good()
        for stage in sorted(set(stages)):
            if stage in self.completed:
                continue
            spec = self.stage_spec(stage)
            reason = self._skip_reason(spec)
            if reason:
                logger.info(f"[TRAIN] Etapa {stage} omitida: {reason}")
                self.completed.append(stage)
                continue
            if not self.train_stage(spec, max_steps=max_steps):
                self.interrupted = True
                logger.info(f"[TRAIN] Detenido tras {self.global_step} pasos (etapa {stage})")
                return self.log
        return self.log

    # ----- reanudación -----
    def state_dict(self) -> Dict[str, Any]:
        return {
            "position": self.position,
            "completed": list(self.completed),
            "history": {str(k): list(v) for k, v in self.history.items()},
            "global_step": self.global_step,
            "records": [r.model_dump() for r in self.log.records],
        }

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        self.position = state.get("position")
        self.completed = list(state.get("completed", []))
        self.history = {int(k): list(v) for k, v in state.get("history", {}).items()}
        self.global_step = int(state.get("global_step", 0))
        self.log = TrainLog([TrainLogRecord(**r) for r in state.get("records", [])])

    def restore(self, optimizer: SgdState, state: Optional[Dict[str, Any]]) -> None:
        """Retoma desde un checkpoint: velocidades del optimizador más la posición guardada."""
        self.optimizer.velocities = {name: velocity.copy() for name, velocity in optimizer.velocities.items()}
        self.optimizer.learning_rate = optimizer.learning_rate
        if state:
            self.load_state_dict(state)
        logger.info(f"[TRAIN] Reanudando tras {self.global_step} pasos, etapas completas {self.completed}")
