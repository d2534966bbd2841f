"""
Servicio de la rama de atributos: bloque de atención + Attention-LSTM.

Flujo por batch (N muestras, grilla H_f×W_f, k = H_f·W_f):
- attention_block: T → A (un mapa inicial por atributo, en orden de listado)
- transfer_features: T → X_f (d canales)
- por cada atributo t en el orden de barrido:
    U_t = W_h · tanh(a_t + W_g · h_{t−1});  Z_t = softmax espacial de U_t
    x_t = Σ_{i,j} Z_t ⊙ X_f;  (h_t, c_t) = LSTM(x_t, h_{t−1}, c_{t−1})
    logits_t = FC_t(h_t)
- f_att = [h_1; ...; h_C]

Las variantes (attention, lstm, base) quitan piezas de este flujo; ver
AttributeVariant en models.py.
"""
import logging
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from common.error_handlers import ConfigurationError, DimensionError, LabelError
from core import ops
from core.params import GROUP_ATTRIBUTE, ModelParams, fan_in_normal, group_rng
from core.tensor import Tensor
from models import AttributeVariant, Mode
from schemas import AttributeSchema, ModelConfig

logger = logging.getLogger(__name__)

FORGET_BIAS = 1.0
W_H_GAIN = 0.02


class LstmState(NamedTuple):
    h: Tensor
    c: Tensor


class AttentionState:
    """
    Estado de atención de un forward.

    Atributos:
        names (List[str]): atributos en orden de barrido.
        initial_maps (Optional[Tensor]): A, (N,C,H_f,W_f) en orden de listado.
        features (Tensor): X_f, (N,d,H_f,W_f).
        unnormalized (List[Tensor]): U_t por paso, (N,H_f,W_f).
        maps (List[Tensor]): Z_t por paso, (N,H_f,W_f).
        inputs (List[Tensor]): x_t por paso, (N,d).
        hidden (List[Tensor]): h_t por paso, (N,d).
    """

    def __init__(self, names: List[str], initial_maps: Optional[Tensor], features: Tensor):
        self.names = names
        self.initial_maps = initial_maps
        self.features = features
        self.unnormalized: List[Tensor] = []
        self.maps: List[Tensor] = []
        self.inputs: List[Tensor] = []
        self.hidden: List[Tensor] = []

    def map_for(self, name: str) -> Tensor:
        return self.maps[self.names.index(name)]


class AttributeOutput(NamedTuple):
    names: List[str]
    logits: List[Tensor]
    state: AttentionState
    feature: Tensor


# ===== Parámetros =====

def init_params(params: ModelParams, config: ModelConfig) -> None:
    """Registra los parámetros que usa la variante configurada."""
    rng = group_rng(config.seed, GROUP_ATTRIBUTE)
    schema = config.attribute_schema
    channels, height, width = config.feature_shape
    k = height * width
    d = config.hidden_size
    variant = config.attribute_variant
    uses_attention = variant in (AttributeVariant.FULL, AttributeVariant.ATTENTION)
    uses_lstm = variant in (AttributeVariant.FULL, AttributeVariant.LSTM)

    if uses_attention:
        a1, a2 = config.attention_channels
        params.add("attr.att_conv0.weight", fan_in_normal(rng, (a1, channels, 1, 1), channels), GROUP_ATTRIBUTE)
        params.add_batch_norm("attr.att_bn0", a1, GROUP_ATTRIBUTE)
        params.add("attr.att_conv1.weight", fan_in_normal(rng, (a2, a1, 3, 3), a1 * 9), GROUP_ATTRIBUTE)
        params.add_batch_norm("attr.att_bn1", a2, GROUP_ATTRIBUTE)
        params.add("attr.att_conv2.weight", fan_in_normal(rng, (schema.size, a2, 1, 1), a2, gain=1.0), GROUP_ATTRIBUTE)
        params.add("attr.att_conv2.bias", np.zeros(schema.size), GROUP_ATTRIBUTE)

    params.add("attr.transfer.weight", fan_in_normal(rng, (d, channels, 1, 1), channels), GROUP_ATTRIBUTE)
    params.add("attr.transfer.bias", np.zeros(d), GROUP_ATTRIBUTE)

    if variant == AttributeVariant.FULL:
        params.add("attr.W_h", fan_in_normal(rng, (k, k), k, gain=W_H_GAIN), GROUP_ATTRIBUTE)
        params.add("attr.W_g", fan_in_normal(rng, (k, d), d, gain=1.0), GROUP_ATTRIBUTE)

    if uses_lstm:
        params.add("attr.lstm.M", fan_in_normal(rng, (4 * d, 2 * d), 2 * d, gain=1.0), GROUP_ATTRIBUTE)
        if config.lstm_bias:
            bias = np.zeros(4 * d)
            bias[d:2 * d] = FORGET_BIAS
            params.add("attr.lstm.b", bias, GROUP_ATTRIBUTE)

    for attr in schema.attributes:
        params.add(f"attr.head.{attr.name}.weight", fan_in_normal(rng, (attr.class_count, d), d, gain=1.0), GROUP_ATTRIBUTE)
        params.add(f"attr.head.{attr.name}.bias", np.zeros(attr.class_count), GROUP_ATTRIBUTE)


# ===== Operaciones =====

def _transpose(matrix: Tensor) -> Tensor:
    return ops.transpose(matrix, (1, 0))


def attention_block(T: Tensor, params: ModelParams, schema: AttributeSchema, mode: Union[Mode, str]) -> Tensor:
    """
    T (N,C_f,H,W) → A (N,C,H,W): conv1×1+BN+ReLU, conv3×3+BN+ReLU, conv1×1 lineal.

    Lanza:
        ConfigurationError: si la última conv no tiene un filtro por atributo.
    """
    final = params["attr.att_conv2.weight"]
    if final.shape[0] != schema.size:
        raise ConfigurationError(f"el bloque de atención produce {final.shape[0]} mapas, el esquema tiene {schema.size}")
    x = ops.conv2d(T, params["attr.att_conv0.weight"])
    x = ops.relu(ops.batch_norm(x, params["attr.att_bn0.gamma"], params["attr.att_bn0.beta"],
                                params.buffers["attr.att_bn0"], mode))
    x = ops.conv2d(x, params["attr.att_conv1.weight"], pad=1)
    x = ops.relu(ops.batch_norm(x, params["attr.att_bn1.gamma"], params["attr.att_bn1.beta"],
                                params.buffers["attr.att_bn1"], mode))
    return ops.conv2d(x, final, params["attr.att_conv2.bias"])


def transfer_features(T: Tensor, params: ModelParams) -> Tensor:
    """Conv 1×1 con bias: T → X_f de d canales."""
    return ops.conv2d(T, params["attr.transfer.weight"], params["attr.transfer.bias"])


def spatial_softmax(U: Tensor) -> Tensor:
    """Softmax sobre todas las posiciones espaciales de (H,W) o (N,H,W)."""
    if U.ndim not in (2, 3):
        raise DimensionError(f"spatial_softmax espera (H,W) o (N,H,W), se recibió {U.shape}", axis="rank")
    spatial = U.shape[-2:]
    flat = ops.reshape(U, U.shape[:-2] + (spatial[0] * spatial[1],))
    return ops.reshape(ops.softmax(flat, axis=-1), U.shape)


def refine_attention(A_t: Tensor, h_prev: Tensor, W_h: Tensor, W_g: Tensor) -> Tuple[Tensor, Tensor]:
    """
    U_t = W_h · tanh(a_t + W_g · h_{t−1}) y Z_t = softmax espacial de U_t.

    Acepta un mapa (H,W) con h (d,) o un batch (N,H,W) con h (N,d).

    Lanza:
        DimensionError: si k o d no coinciden con W_h / W_g.
    """
    single = A_t.ndim == 2
    maps = ops.reshape(A_t, (1,) + A_t.shape) if single else A_t
    hidden = ops.reshape(h_prev, (1,) + h_prev.shape) if single else h_prev
    n, height, width = maps.shape
    k = height * width
    if W_h.shape != (k, k):
        raise DimensionError(f"W_h {W_h.shape} para k={k}", axis="k")
    if W_g.shape[0] != k:
        raise DimensionError(f"W_g {W_g.shape} para k={k}", axis="k")
    if hidden.shape != (n, W_g.shape[1]):
        raise DimensionError(f"h_prev {h_prev.shape} para d={W_g.shape[1]}", axis="d")

    a = ops.reshape(maps, (n, k))
    context = ops.matmul(hidden, _transpose(W_g))
    U = ops.matmul(ops.tanh(ops.add(a, context)), _transpose(W_h))
    U = ops.reshape(U, (n, height, width))
    Z = spatial_softmax(U)
    if single:
        return ops.reshape(U, (height, width)), ops.reshape(Z, (height, width))
    return U, Z


def attend(X_f: Tensor, Z_t: Tensor) -> Tensor:
    """x_t = Σ_{i,j} Z_t ⊙ X_f: (d,H,W)+(H,W) → (d,) o (N,d,H,W)+(N,H,W) → (N,d)."""
    weighted = ops.elementwise_mul(X_f, Z_t)
    return ops.reduce_sum(weighted, axis=(-2, -1))


def lstm_step(x_t: Tensor, state: LstmState, M: Tensor, bias: Optional[Tensor] = None) -> Tuple[Tensor, LstmState]:
    """
    Una celda LSTM con compuertas en orden i, f, o, g:
        [i; f; o; g] = M · [x_t; h_{t−1}] + b
        c_t = σ(f)⊙c_{t−1} + σ(i)⊙tanh(g);  h_t = σ(o)⊙tanh(c_t)
    """
    single = x_t.ndim == 1
    x = ops.reshape(x_t, (1,) + x_t.shape) if single else x_t
    h_prev = ops.reshape(state.h, (1,) + state.h.shape) if single else state.h
    c_prev = ops.reshape(state.c, (1,) + state.c.shape) if single else state.c
    d = h_prev.shape[-1]
    if M.shape != (4 * d, x.shape[-1] + d):
        raise DimensionError(f"M {M.shape} no encaja con entrada {x.shape[-1]} y d={d}", axis="input")

    z = ops.matmul(ops.concat([x, h_prev], axis=1), _transpose(M))
    if bias is not None:
        z = ops.add(z, bias)
    i = ops.sigmoid(z[:, 0:d])
    f = ops.sigmoid(z[:, d:2 * d])
    o = ops.sigmoid(z[:, 2 * d:3 * d])
    g = ops.tanh(z[:, 3 * d:4 * d])
    c = ops.add(ops.mul(f, c_prev), ops.mul(i, g))
    h = ops.mul(o, ops.tanh(c))
    if single:
        h, c = ops.reshape(h, (d,)), ops.reshape(c, (d,))
    return h, LstmState(h, c)


def classify(feature: Tensor, params: ModelParams, name: str) -> Tensor:
    weight = params[f"attr.head.{name}.weight"]
    return ops.add(ops.matmul(feature, _transpose(weight)), params[f"attr.head.{name}.bias"])


def attribute_forward(T: Tensor, schema: AttributeSchema, params: ModelParams, config: ModelConfig,
                      mode: Union[Mode, str]) -> AttributeOutput:
    """
    Barre los atributos en el orden del esquema y devuelve logits, estado y f_att.

    Lanza:
        ConfigurationError: si el esquema no coincide con las cabezas registradas.
    """
    missing = [a.name for a in schema.attributes if f"attr.head.{a.name}.weight" not in params]
    if missing:
        raise ConfigurationError(f"sin cabeza de clasificación para: {', '.join(missing)}")
    if T.ndim != 4:
        raise DimensionError(f"attribute_forward espera T (N,C,H,W), se recibió {T.shape}", axis="rank")

    variant = config.attribute_variant
    n = T.shape[0]
    d = config.hidden_size
    order = schema.order()
    names = [schema.attributes[i].name for i in order]

    X_f = transfer_features(T, params)
    A = attention_block(T, params, schema, mode) if variant in (AttributeVariant.FULL, AttributeVariant.ATTENTION) else None
    state = AttentionState(names, A, X_f)

    if variant == AttributeVariant.BASE:
        pooled = ops.reduce_mean(X_f, axis=(2, 3))
        logits = [classify(pooled, params, name) for name in names]
        return AttributeOutput(names, logits, state, pooled)

    lstm_state = LstmState(Tensor(np.zeros((n, d))), Tensor(np.zeros((n, d))))
    pooled = ops.reduce_mean(X_f, axis=(2, 3)) if variant == AttributeVariant.LSTM else None
    lstm_bias = params["attr.lstm.b"] if "attr.lstm.b" in params else None
    logits, features = [], []
    for index, name in zip(order, names):
        if variant == AttributeVariant.LSTM:
            x_t = pooled
        else:
            A_t = A[:, index]
            if variant == AttributeVariant.FULL:
                U_t, Z_t = refine_attention(A_t, lstm_state.h, params["attr.W_h"], params["attr.W_g"])
            else:
                U_t, Z_t = A_t, spatial_softmax(A_t)
            x_t = attend(X_f, Z_t)
            state.unnormalized.append(U_t)
            state.maps.append(Z_t)
        state.inputs.append(x_t)

        if variant == AttributeVariant.ATTENTION:
            feature = x_t
        else:
            feature, lstm_state = lstm_step(x_t, lstm_state, params["attr.lstm.M"], lstm_bias)
            state.hidden.append(feature)
        features.append(feature)
        logits.append(classify(feature, params, name))

    return AttributeOutput(names, logits, state, ops.concat(features, axis=1))


def attribute_loss(logits: Sequence[Tensor], labels: np.ndarray) -> Tensor:
    """
    Σ_t CE(logits_t, c_t), cada término promediado sobre el batch.

    labels es (N, C) en el mismo orden que logits (orden de barrido).

    Lanza:
        LabelError: etiquetas faltantes o fuera de rango.
    """
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels.reshape(1, -1)
    if labels.shape[1] != len(logits):
        raise LabelError(f"se esperaban {len(logits)} etiquetas de atributo por muestra, hay {labels.shape[1]}")
    total = None
    for t, head_logits in enumerate(logits):
        column = labels[:, t]
        term = ops.softmax_cross_entropy(head_logits, column if head_logits.ndim == 2 else int(column[0]))
        total = term if total is None else ops.add(total, term)
    return total
