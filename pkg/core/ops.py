"""
Operaciones diferenciables sobre Tensor.

Cada operación calcula su salida con numpy y, si hay una GradTape activa y
alguna entrada pide gradiente, registra su regla de backward. Las convoluciones
van por im2col + matmul; conv2d_reference es el lazo ingenuo que usamos como
oráculo en las pruebas.

Convención de formas: imágenes y mapas de características en CHW o NCHW.
"""
import logging
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from common.error_handlers import (
    ConfigurationError,
    DimensionError,
    LabelError,
    RangeError,
)
from core.tensor import Tensor, active_tape
from models import Mode, PointwiseKind

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(op_name: str, inputs: Sequence[Tensor], data: np.ndarray, backward_fn) -> Tensor:
    out = Tensor(data, copy=False)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op_name, tuple(inputs), out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(a: Tensor, b: Tensor, op_name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op_name}: formas {a.shape} y {b.shape} no son compatibles", axis="broadcast")


# ===== Aritmética elemento a elemento =====

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "add")

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )
    return _result("add", (a, b), a.data + b.data, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "sub")

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )
    return _result("sub", (a, b), a.data - b.data, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "mul")

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )
    return _result("mul", (a, b), a.data * b.data, backward)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _result("scale", (a,), a.data * factor, lambda g: (g * factor,))


def elementwise_mul(x: Tensor, attention_map: Tensor) -> Tensor:
    """
    Multiplica un tensor (C,H,W) o (N,C,H,W) por un mapa (H,W) o (N,H,W).

    El mapa solo se difunde sobre el eje de canales.
    """
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or attention_map.ndim != x.ndim - 1:
        raise DimensionError(
            f"elementwise_mul espera tensor CHW/NCHW y mapa HW/NHW, se recibió {x.shape} y {attention_map.shape}",
            axis="rank",
        )
    if x.shape[-2] != attention_map.shape[-2]:
        raise DimensionError(f"alto {x.shape[-2]} vs {attention_map.shape[-2]}", axis="height")
    if x.shape[-1] != attention_map.shape[-1]:
        raise DimensionError(f"ancho {x.shape[-1]} vs {attention_map.shape[-1]}", axis="width")
    if batched and x.shape[0] != attention_map.shape[0]:
        raise DimensionError(f"batch {x.shape[0]} vs {attention_map.shape[0]}", axis="batch")
    channel_axis = 1 if batched else 0
    expanded = reshape(attention_map, attention_map.shape[:channel_axis] + (1,) + attention_map.shape[channel_axis:])
    return mul(x, expanded)


# ===== Álgebra lineal y reorganización =====

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul requiere al menos 2 dimensiones: {a.shape} @ {b.shape}", axis="rank")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}", axis="inner")
    try:
        data = a.data @ b.data
    except ValueError:
        raise DimensionError(f"matmul: lotes incompatibles {a.shape} @ {b.shape}", axis="batch")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb
    return _result("matmul", (a, b), data, backward)


def reduce_sum(x: Tensor, axis: Union[None, int, Tuple[int, ...]] = None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _result("sum", (x,), data, backward)


def reduce_mean(x: Tensor, axis: Union[None, int, Tuple[int, ...]] = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"no se puede reorganizar {x.shape} como {shape}", axis="size")
    return _result("reshape", (x,), data, lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _result("transpose", (x,), x.data.transpose(axes), lambda g: (g.transpose(inverse),))


def take(x: Tensor, index) -> Tensor:
    """Indexado básico (slices y enteros); backward escribe de vuelta en la región."""
    data = x.data[index]

    def backward(g):
        grad = np.zeros_like(x.data)
        grad[index] += g
        return (grad,)
    return _result("take", (x,), np.array(data, copy=True), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat requiere al menos un tensor", axis="count")
    reference = tensors[0].shape
    axis_norm = axis % len(reference)
    for t in tensors[1:]:
        if t.ndim != len(reference):
            raise DimensionError(f"concat: rangos distintos {reference} vs {t.shape}", axis="rank")
        for ax, (lhs, rhs) in enumerate(zip(reference, t.shape)):
            if ax != axis_norm and lhs != rhs:
                raise DimensionError(f"concat: {reference} vs {t.shape}", axis=str(ax))
    data = np.concatenate([t.data for t in tensors], axis=axis_norm)
    boundaries = np.cumsum([t.shape[axis_norm] for t in tensors])[:-1]

    def backward(g):
        pieces = np.split(g, boundaries, axis=axis_norm)
        return tuple(piece if t.requires_grad else None for piece, t in zip(pieces, tensors))
    return _result("concat", tuple(tensors), data, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# ===== No linealidades =====

def pointwise(x: Tensor, kind: Union[PointwiseKind, str]) -> Tensor:
    kind = PointwiseKind(kind)
    if kind == PointwiseKind.RELU:
        mask = x.data > 0
        return _result("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))
    if kind == PointwiseKind.TANH:
        out = np.tanh(x.data)
        return _result("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))
    # sigmoid estable vía tanh
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    return pointwise(x, PointwiseKind.RELU)


def tanh(x: Tensor) -> Tensor:
    return pointwise(x, PointwiseKind.TANH)


def sigmoid(x: Tensor) -> Tensor:
    return pointwise(x, PointwiseKind.SIGMOID)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _result("softmax", (x,), out, backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """
    -log softmax(logits)[label], promediado sobre el batch.

    Acepta logits (K,) con una etiqueta o (N,K) con N etiquetas. Se estabiliza
    restando el máximo. Con K=1 la pérdida es exactamente cero.
    """
    if logits.ndim not in (1, 2):
        raise DimensionError(f"logits deben ser (K,) o (N,K), se recibió {logits.shape}", axis="rank")
    single = logits.ndim == 1
    values = logits.data.reshape(1, -1) if single else logits.data
    n, k = values.shape
    label_array = np.atleast_1d(np.asarray(labels))
    if label_array.shape != (n,):
        raise LabelError(f"se esperaban {n} etiquetas, se recibieron {label_array.shape}")
    if not np.issubdtype(label_array.dtype, np.integer):
        if not np.all(np.equal(np.mod(label_array, 1), 0)):
            raise LabelError(f"etiquetas no enteras: {label_array}")
        label_array = label_array.astype(np.int64)
    if np.any(label_array < 0) or np.any(label_array >= k):
        raise LabelError(f"etiqueta fuera de [0, {k}): {label_array[(label_array < 0) | (label_array >= k)].tolist()}")

    rows = np.arange(n)
    peak = values.max(axis=1, keepdims=True)
    shifted = values - peak
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    losses = log_norm - shifted[rows, label_array]
    loss = np.array(losses.mean())

    def backward(g):
        probs = np.exp(shifted - log_norm[:, None])
        probs[rows, label_array] -= 1.0
        grad = probs * (float(g) / n)
        return (grad.reshape(logits.shape),)
    return _result("softmax_cross_entropy", (logits,), loss, backward)


# ===== Convolución =====

def _conv_output_size(extent: int, kernel: int, stride: int, pad: int, axis: str) -> int:
    size = (extent + 2 * pad - kernel) // stride + 1
    if size < 1:
        raise DimensionError(f"kernel {kernel} no cabe en entrada {extent} con pad {pad}", axis=axis)
    return size


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """
    Convolución 2D (correlación cruzada) vía im2col + matmul.

    x: (C,H,W) o (N,C,H,W); weight: (O,C,Kh,Kw); bias opcional (O,).
    Salida: (O,H',W') o (N,O,H',W') con H' = floor((H + 2·pad − Kh)/stride) + 1.
    """
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"stride debe ser >= 1 y pad >= 0 (stride={stride}, pad={pad})")
    if weight.ndim != 4:
        raise DimensionError(f"el kernel debe ser (O,C,Kh,Kw), se recibió {weight.shape}", axis="rank")
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError(f"la entrada debe ser CHW o NCHW, se recibió {x.shape}", axis="rank")
    xd = x.data[None] if single else x.data
    n, c, h, w = xd.shape
    o, wc, kh, kw = weight.shape
    if c != wc:
        raise DimensionError(f"entrada con {c} canales pero kernel con {wc}", axis="channel")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"bias {bias.shape} para {o} filtros", axis="output_channel")
    oh = _conv_output_size(h, kh, stride, pad, "height")
    ow = _conv_output_size(w, kw, stride, pad, "width")

    padded = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = padded[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    cols = cols.reshape(n, c * kh * kw, oh * ow)
    kernel = weight.data.reshape(o, c * kh * kw)
    out = (kernel @ cols).reshape(n, o, oh, ow)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        g2 = g4.reshape(n, o, oh * ow)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g4.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcols = (kernel.T @ g2).reshape(n, c, kh, kw, oh, ow)
            gpad = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    gpad[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, :, i, j]
            gx = gpad[:, :, pad:pad + h, pad:pad + w] if pad else gpad
            if single:
                gx = gx[0]
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result("conv2d", inputs, out, backward)


def conv2d_reference(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None,
                     stride: int = 1, pad: int = 0) -> np.ndarray:
    """Convolución por lazos directos (C,H,W); solo para contrastar conv2d en pruebas."""
    c, h, w = x.shape
    o, _, kh, kw = weight.shape
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((o, oh, ow))
    for f in range(o):
        for y in range(oh):
            for z in range(ow):
                acc = 0.0
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            acc += padded[ch, y * stride + i, z * stride + j] * weight[f, ch, i, j]
                out[f, y, z] = acc + (bias[f] if bias is not None else 0.0)
    return out


# ===== Pooling y normalización =====

def avg_pool_region(x: Tensor, row_range: Tuple[int, int], col_range: Tuple[int, int]) -> Tensor:
    """Media por canal sobre la región [r0,r1) × [c0,c1) de un CHW o NCHW."""
    if x.ndim not in (3, 4):
        raise DimensionError(f"avg_pool_region espera CHW o NCHW, se recibió {x.shape}", axis="rank")
    height, width = x.shape[-2], x.shape[-1]
    (r0, r1), (c0, c1) = row_range, col_range
    if not (0 <= r0 < r1 <= height):
        raise RangeError(f"rango de filas [{r0},{r1}) inválido para alto {height}")
    if not (0 <= c0 < c1 <= width):
        raise RangeError(f"rango de columnas [{c0},{c1}) inválido para ancho {width}")
    count = (r1 - r0) * (c1 - c0)
    data = x.data[..., r0:r1, c0:c1].mean(axis=(-2, -1))

    def backward(g):
        grad = np.zeros_like(x.data)
        grad[..., r0:r1, c0:c1] = (g / count)[..., None, None]
        return (grad,)
    return _result("avg_pool_region", (x,), data, backward)


class BatchNormStats:
    """Estadísticas móviles de una capa BN (no reciben gradiente)."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)

    def __repr__(self) -> str:
        return f"BatchNormStats(channels={self.mean.shape[0]})"


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats,
               mode: Union[Mode, str], momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """
    BatchNorm sobre (N,C) o (N,C,H,W).

    En train normaliza con estadísticas del batch y actualiza las móviles
    (varianza móvil insesgada); en eval usa las móviles.
    """
    mode = Mode(mode)
    if x.ndim not in (2, 4):
        raise DimensionError(f"batch_norm espera (N,C) o (N,C,H,W), se recibió {x.shape}", axis="rank")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(f"gamma/beta {gamma.shape} para {channels} canales", axis="channel")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    view = (1, channels) if x.ndim == 2 else (1, channels, 1, 1)

    if mode == Mode.TRAIN:
        if x.shape[0] < 2:
            raise ConfigurationError("batch_norm en modo train requiere un batch de al menos 2")
        count = x.size // channels
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        stats.mean = (1.0 - momentum) * stats.mean + momentum * mean
        stats.var = (1.0 - momentum) * stats.var + momentum * var * count / (count - 1)
    else:
        count = None
        mean, var = stats.mean, stats.var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(view)) * inv_std.reshape(view)
    out = gamma.data.reshape(view) * xhat + beta.data.reshape(view)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(view)
            if mode == Mode.TRAIN:
                gx = (inv_std.reshape(view) / count) * (
                    count * gxhat
                    - gxhat.sum(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = gxhat * inv_std.reshape(view)
        return gx, ggamma, gbeta
    return _result("batch_norm", (x, gamma, beta), out, backward)
