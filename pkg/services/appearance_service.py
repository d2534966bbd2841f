"""
Servicio de la rama de apariencia: franjas horizontales, verticales y global.

Cada parte se promedia espacialmente, pasa por la reducción 1×1 de su rama
(+ BN + ReLU) y alimenta su propia cabeza de identidad. Dentro de una rama
todas las franjas comparten la reducción y se procesan como un solo batch.

Orden fijo de las piezas del descriptor: g_1..g_h, k_1..k_v, p.
"""
import logging
from typing import Dict, List, NamedTuple, Sequence, Tuple, Union

import numpy as np

from common.error_handlers import ConfigurationError, DimensionError, LabelError
from core import ops
from core.params import GROUP_APPEARANCE, ModelParams, fan_in_normal, group_rng
from core.tensor import Tensor
from models import AppearanceBranch, Mode
from schemas import ModelConfig, PartitionConfig

logger = logging.getLogger(__name__)

Region = Tuple[Tuple[int, int], Tuple[int, int]]


class AppearanceOutput(NamedTuple):
    part_names: List[str]
    logits: List[Tensor]
    pieces: List[Tensor]
    descriptor: Tensor


def part_names(partition: PartitionConfig) -> List[str]:
    names = []
    counts = partition.part_counts()
    if AppearanceBranch.HORIZONTAL in counts:
        names += [f"h{i}" for i in range(counts[AppearanceBranch.HORIZONTAL])]
    if AppearanceBranch.VERTICAL in counts:
        names += [f"v{i}" for i in range(counts[AppearanceBranch.VERTICAL])]
    if AppearanceBranch.GLOBAL in counts:
        names.append("global")
    return names


def _reduction_key(partition: PartitionConfig, branch: AppearanceBranch) -> str:
    return "shared" if partition.share_reduction else branch.value


def init_params(params: ModelParams, config: ModelConfig) -> None:
    rng = group_rng(config.seed, GROUP_APPEARANCE)
    partition = config.partition
    channels = config.feature_shape[0]
    r = partition.reduced_dim
    if partition.share_reduction:
        params.add("app.reduce.shared.weight", fan_in_normal(rng, (r, channels), channels), GROUP_APPEARANCE)
    for branch in partition.branches:
        if not partition.share_reduction:
            params.add(f"app.reduce.{branch.value}.weight", fan_in_normal(rng, (r, channels), channels), GROUP_APPEARANCE)
        params.add_batch_norm(f"app.bn.{branch.value}", r, GROUP_APPEARANCE)
    for name in part_names(partition):
        params.add(f"app.head.{name}.weight",
                   fan_in_normal(rng, (config.num_identities, r), r, gain=1.0), GROUP_APPEARANCE)
        params.add(f"app.head.{name}.bias", np.zeros(config.num_identities), GROUP_APPEARANCE)


def check_partition(height: int, width: int, partition: PartitionConfig) -> None:
    """
    Lanza:
        ConfigurationError: si H_f no es divisible por h o W_f por v.
    """
    problems = []
    if height % partition.h_stripes:
        problems.append(f"H_f={height} no es divisible por h={partition.h_stripes}")
    if width % partition.v_stripes:
        problems.append(f"W_f={width} no es divisible por v={partition.v_stripes}")
    if problems:
        raise ConfigurationError("partición desigual: " + "; ".join(problems))


def stripe_regions(height: int, width: int, partition: PartitionConfig) -> Dict[AppearanceBranch, List[Region]]:
    """Rangos [fila0,fila1) × [col0,col1) de cada parte, por rama."""
    check_partition(height, width, partition)
    rows = height // partition.h_stripes
    cols = width // partition.v_stripes
    regions = {
        AppearanceBranch.HORIZONTAL: [((i * rows, (i + 1) * rows), (0, width)) for i in range(partition.h_stripes)],
        AppearanceBranch.VERTICAL: [((0, height), (j * cols, (j + 1) * cols)) for j in range(partition.v_stripes)],
        AppearanceBranch.GLOBAL: [((0, height), (0, width))],
    }
    return {b: regions[b] for b in partition.branches}


def partition(T: Tensor, cfg: PartitionConfig) -> Tuple[List[Tensor], List[Tensor]]:
    """Corta T (CHW o NCHW) en h franjas horizontales y v verticales."""
    if T.ndim not in (3, 4):
        raise DimensionError(f"partition espera CHW o NCHW, se recibió {T.shape}", axis="rank")
    height, width = T.shape[-2], T.shape[-1]
    check_partition(height, width, cfg)
    rows = height // cfg.h_stripes
    cols = width // cfg.v_stripes
    horizontal = [T[..., i * rows:(i + 1) * rows, :] for i in range(cfg.h_stripes)]
    vertical = [T[..., :, j * cols:(j + 1) * cols] for j in range(cfg.v_stripes)]
    return horizontal, vertical


def pool_reduce(region: Tensor, weight: Tensor, gamma: Tensor, beta: Tensor, stats: ops.BatchNormStats,
                mode: Union[Mode, str]) -> Tensor:
    """
    Media espacial → conv 1×1 (lineal C_f→r) → BN → ReLU.

    region: (C,H,W) → (r,) o (N,C,H,W) → (N,r).
    """
    single = region.ndim == 3
    pooled = ops.avg_pool_region(region, (0, region.shape[-2]), (0, region.shape[-1]))
    if single:
        pooled = ops.reshape(pooled, (1, pooled.shape[0]))
    reduced = _reduce(pooled, weight, gamma, beta, stats, mode)
    return ops.reshape(reduced, (reduced.shape[1],)) if single else reduced


def _reduce(pooled: Tensor, weight: Tensor, gamma: Tensor, beta: Tensor, stats: ops.BatchNormStats,
            mode: Union[Mode, str]) -> Tensor:
    if pooled.shape[1] != weight.shape[1]:
        raise DimensionError(f"reducción {weight.shape} sobre {pooled.shape[1]} canales", axis="channel")
    projected = ops.matmul(pooled, ops.transpose(weight, (1, 0)))
    return ops.relu(ops.batch_norm(projected, gamma, beta, stats, mode))


def appearance_forward(T: Tensor, config: ModelConfig, params: ModelParams, mode: Union[Mode, str]) -> AppearanceOutput:
    """
    Forward de las ramas configuradas sobre T (N,C_f,H_f,W_f).

    Retorna logits por parte, piezas reducidas y el descriptor (N, r·partes).
    """
    if T.ndim != 4:
        raise DimensionError(f"appearance_forward espera (N,C,H,W), se recibió {T.shape}", axis="rank")
    partition_cfg = config.partition
    n = T.shape[0]
    regions = stripe_regions(T.shape[2], T.shape[3], partition_cfg)

    pieces: List[Tensor] = []
    for branch, branch_regions in regions.items():
        pooled = [ops.avg_pool_region(T, rows, cols) for rows, cols in branch_regions]
        stacked = pooled[0] if len(pooled) == 1 else ops.concat(pooled, axis=0)
        key = _reduction_key(partition_cfg, branch)
        bn = f"app.bn.{branch.value}"
        reduced = _reduce(stacked, params[f"app.reduce.{key}.weight"], params[f"{bn}.gamma"],
                          params[f"{bn}.beta"], params.buffers[bn], mode)
        if len(branch_regions) == 1:
            pieces.append(reduced)
        else:
            pieces.extend(reduced[i * n:(i + 1) * n] for i in range(len(branch_regions)))

    names = part_names(partition_cfg)
    logits = []
    for name, piece in zip(names, pieces):
        weight = params[f"app.head.{name}.weight"]
        logits.append(ops.add(ops.matmul(piece, ops.transpose(weight, (1, 0))), params[f"app.head.{name}.bias"]))
    descriptor = pieces[0] if len(pieces) == 1 else ops.concat(pieces, axis=1)
    return AppearanceOutput(names, logits, pieces, descriptor)


def appearance_loss(logits: Sequence[Tensor], identities) -> Tensor:
    """
    L_app = Σ_partes CE(logits_parte, y), cada CE promediada sobre el batch.

    Lanza:
        LabelError: identidad fuera de rango.
    """
    identities = np.atleast_1d(np.asarray(identities))
    if not logits:
        raise LabelError("no hay cabezas de apariencia activas")
    total = None
    for head_logits in logits:
        label = identities if head_logits.ndim == 2 else int(identities[0])
        term = ops.softmax_cross_entropy(head_logits, label)
        total = term if total is None else ops.add(total, term)
    return total
