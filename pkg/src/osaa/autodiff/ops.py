"""Differentiable operations over :class:`Tensor`.

Every op computes in the dtype of its inputs. Convolution weights follow the
usual layouts: ``conv1d`` takes ``[C_out, C_in, K]`` and ``conv_transpose1d``
takes ``[C_in, C_out, K]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor.from_op(a.data / b.data, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor.from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor.from_op(np.maximum(a.data, 0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x)))
    return Tensor.from_op(out, (a,), lambda g: (g * _sigmoid(-x),), "log_sigmoid")


def grad_reverse(a: Tensor, coeff: float = 1.0) -> Tensor:
    """Identity forward; the backward pass multiplies the gradient by ``-coeff``."""
    if coeff < 0:
        raise ValueError(f"grad_reverse coeff must be >= 0, got {coeff}")
    scale = np.asarray(-coeff, dtype=a.dtype)
    return Tensor.from_op(a.data, (a,), lambda g: (g * scale,), "grad_reverse")


# ---------------------------------------------------------------- reductions and shape

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor.from_op(np.asarray(out, dtype=a.dtype), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), np.asarray(1.0 / count, dtype=a.dtype))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Pick ``a[i, index[i]]`` for each row of a 2-D tensor."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def backward(g):
        out = np.zeros_like(a.data)
        out[rows, index] = g
        return (out,)

    return Tensor.from_op(a.data[rows, index], (a,), backward, "take_rows")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor.from_op(a.data @ b.data, (a, b), backward, "matmul")


# ---------------------------------------------------------------- layers

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped ``[F_out, F_in]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input features {x.shape} do not match weight {weight.shape} (F_in)")
    w = weight.data
    out = x.data @ w.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ w
        gw = g.T @ x.data
        gb = g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward, "linear")


def dropout(x: Tensor, p_drop: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    if not 0.0 <= p_drop < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p_drop}")
    if not training or p_drop == 0.0:
        return x
    keep = (rng.random(x.shape, dtype=np.float32) >= p_drop) * x.dtype.type(1.0 / (1.0 - p_drop))
    return Tensor.from_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, (x,), backward, "log_softmax")


def mse_per_sample(x_hat: Tensor, x: Tensor) -> Tensor:
    """Squared Euclidean distance per sample over all non-batch elements."""
    if x_hat.shape != x.shape:
        raise ValueError(f"mse_per_sample: shapes differ, reconstruction {x_hat.shape} vs input {x.shape}")
    diff = x_hat.data - x.data
    axes = tuple(range(1, diff.ndim))
    out = (diff * diff).sum(axis=axes)

    def backward(g):
        gd = 2.0 * diff * g.reshape((-1,) + (1,) * len(axes))
        return gd, -gd

    return Tensor.from_op(out, (x_hat, x), backward, "mse_per_sample")


# ---------------------------------------------------------------- convolution

def _check_conv(name, x, weight, bias, stride, padding, in_axis):
    if x.ndim != 3:
        raise ValueError(f"{name}: input must be [B, C_in, L], got shape {x.shape}")
    if weight.ndim != 3:
        raise ValueError(f"{name}: weight must be 3-D, got shape {weight.shape}")
    if x.shape[1] != weight.shape[in_axis]:
        raise ValueError(
            f"{name}: input channels C_in={x.shape[1]} do not match weight C_in={weight.shape[in_axis]}")
    out_axis = 1 - in_axis
    if bias is not None and bias.shape != (weight.shape[out_axis],):
        raise ValueError(f"{name}: bias shape {bias.shape} does not match C_out={weight.shape[out_axis]}")
    if stride < 1 or padding < 0:
        raise ValueError(f"{name}: stride must be >= 1 and padding >= 0, got stride={stride} padding={padding}")


def _flat_corr(flat: np.ndarray, taps: list[np.ndarray], rows: int, out: np.ndarray) -> None:
    """``out[t] = sum_k flat[t + k] @ taps[k]`` for ``t < rows``, written in place.

    Narrow inputs go through a single im2col gemm; wide ones accumulate one
    gemm per tap over contiguous row ranges.
    """
    K = len(taps)
    C = flat.shape[1]
    if C * K <= 64:
        isz = flat.itemsize
        cols = np.lib.stride_tricks.as_strided(flat, shape=(rows, K * C), strides=(C * isz, isz))
        np.matmul(cols, np.concatenate(taps, axis=0), out=out)
        return
    np.matmul(flat[0:rows], taps[0], out=out)
    tmp = np.empty_like(out)
    for k in range(1, K):
        np.matmul(flat[k:k + rows], taps[k], out=tmp)
        out += tmp


def _corr_stride1(x: np.ndarray, w: np.ndarray, padding: int):
    """Stride-1 cross-correlation over a channels-last flattened batch.

    The padded batch is laid end to end as ``[B * Lp, C]`` so each kernel tap
    is one gemm against a contiguous row range; outputs whose window straddles
    two samples are computed and discarded. Returns the output and a closure
    mapping the output gradient to ``(grad_x, grad_w)``.
    """
    B, C, L = x.shape
    O, _, K = w.shape
    Lp = L + 2 * padding
    L_out = Lp - K + 1
    T = B * Lp - K + 1
    dtype = np.result_type(x.dtype, w.dtype)
    xt = np.zeros((B, Lp, C), dtype=dtype)
    xt[:, padding:padding + L, :] = x.transpose(0, 2, 1)
    flat = xt.reshape(B * Lp, C)
    taps = [np.ascontiguousarray(w[:, :, k].T) for k in range(K)]  # [C, O] each
    full = np.empty((B * Lp, O), dtype=dtype)
    _flat_corr(flat, taps, T, full[:T])
    out = np.ascontiguousarray(full.reshape(B, Lp, O)[:, :L_out, :].transpose(0, 2, 1))

    def backward(g):
        # gradient rows live at the same flat positions as the forward outputs,
        # preceded by K - 1 zero rows so the input gradient is a full correlation
        gbuf = np.zeros((K - 1 + B * Lp, O), dtype=dtype)
        gbuf[K - 1:].reshape(B, Lp, O)[:, :L_out, :] = g.transpose(0, 2, 1)
        gflat = gbuf[K - 1:K - 1 + T]
        gT = gflat.T
        gw = np.empty((O, C, K), dtype=dtype)
        for k in range(K):
            gw[:, :, k] = gT @ flat[k:k + T]
        gx = np.empty((B * Lp, C), dtype=dtype)
        _flat_corr(gbuf, [np.ascontiguousarray(taps[K - 1 - k].T) for k in range(K)], B * Lp, gx)
        gx = np.ascontiguousarray(gx.reshape(B, Lp, C)[:, padding:padding + L, :].transpose(0, 2, 1))
        return gx, gw

    return out, backward


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x [B, C_in, L]`` with ``weight [C_out, C_in, K]``."""
    _check_conv("conv1d", x, weight, bias, stride, padding, in_axis=1)
    B, C_in, L = x.shape
    C_out, _, K = weight.shape
    Lp = L + 2 * padding
    if K > Lp:
        raise ValueError(f"conv1d: kernel length K={K} exceeds padded input length L+2*padding={Lp}")
    L_out = (Lp - K) // stride + 1
    w = weight.data

    if stride == 1:
        out, corr_backward = _corr_stride1(x.data, w, padding)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
        cols = sliding_window_view(xp, K, axis=2)[:, :, ::stride][:, :, :L_out]  # [B, C_in, L_out, K]
        out = np.ascontiguousarray(np.tensordot(cols, w, axes=([1, 3], [1, 2])).transpose(0, 2, 1))

        def corr_backward(g):
            gw = np.tensordot(g, cols, axes=([0, 2], [0, 2]))  # [C_out, C_in, K]
            gcols = np.tensordot(g, w, axes=([1], [0]))  # [B, L_out, C_in, K]
            gxp = np.zeros((B, C_in, Lp), dtype=g.dtype)
            span = stride * (L_out - 1) + 1
            for k in range(K):
                gxp[:, :, k:k + span:stride] += gcols[:, :, :, k].transpose(0, 2, 1)
            return (gxp[:, :, padding:padding + L] if padding else gxp), gw

    if bias is not None:
        out += bias.data[None, :, None]

    def backward(g):
        gx, gw = corr_backward(g)
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward, "conv1d")


def conv_transpose1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Transposed convolution of ``x [B, C_in, L]`` with ``weight [C_in, C_out, K]``.

    Equal to the input-gradient of ``conv1d`` with the same weight, stride and
    padding.
    """
    _check_conv("conv_transpose1d", x, weight, bias, stride, padding, in_axis=0)
    B, C_in, L = x.shape
    _, C_out, K = weight.shape
    full = (L - 1) * stride + K
    L_out = full - 2 * padding
    if L_out < 1:
        raise ValueError(f"conv_transpose1d: output length (L-1)*stride-2*padding+K = {L_out} < 1")
    w = weight.data

    if stride == 1 and padding <= K - 1:
        # stride 1: a plain correlation with the flipped, channel-swapped kernel
        flipped = np.ascontiguousarray(w[:, :, ::-1].transpose(1, 0, 2))
        out, corr_backward = _corr_stride1(x.data, flipped, K - 1 - padding)

        def transpose_backward(g):
            gx, gflipped = corr_backward(g)
            return gx, gflipped.transpose(1, 0, 2)[:, :, ::-1]
    else:
        cols = np.tensordot(x.data, w, axes=([1], [0]))  # [B, L, C_out, K]
        buf = np.zeros((B, C_out, full), dtype=np.result_type(x.dtype, w.dtype))
        span = stride * (L - 1) + 1
        for k in range(K):
            buf[:, :, k:k + span:stride] += cols[:, :, :, k].transpose(0, 2, 1)
        out = np.ascontiguousarray(buf[:, :, padding:padding + L_out])

        def transpose_backward(g):
            gfull = np.zeros((B, C_out, full), dtype=g.dtype)
            gfull[:, :, padding:padding + L_out] = g
            win = sliding_window_view(gfull, K, axis=2)[:, :, ::stride][:, :, :L]  # [B, C_out, L, K]
            gx = np.ascontiguousarray(np.tensordot(win, w, axes=([1, 3], [1, 2])).transpose(0, 2, 1))
            gw = np.tensordot(x.data, win, axes=([0, 2], [0, 2]))  # [C_in, C_out, K]
            return gx, gw

    if bias is not None:
        out += bias.data[None, :, None]

    def backward(g):
        gx, gw = transpose_backward(g)
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        return gx, np.ascontiguousarray(gw), gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward, "conv_transpose1d")


# ---------------------------------------------------------------- pooling

@dataclass(frozen=True)
class PoolIndices:
    """Argmax positions recorded by :func:`maxpool1d`.

    ``index[b, c, j]`` is an absolute position in the unpadded input of length
    ``input_len`` and always falls inside window ``j``.
    """

    index: np.ndarray
    window: int
    input_len: int

    @property
    def out_len(self) -> int:
        return self.index.shape[-1]

    def local(self) -> np.ndarray:
        """Offset of each argmax inside its window."""
        local = self.index - np.arange(self.out_len) * self.window
        if local.size and (local.min() < 0 or local.max() >= self.window):
            raise ValueError("pool index lies outside its window")
        return local


def _window_pick(g: np.ndarray, local: np.ndarray, window: int) -> np.ndarray:
    """``[..., n] -> [..., n * window]`` with ``g`` placed at each window's ``local`` slot."""
    if window == 2:
        second = local.astype(bool)
        out = np.empty(g.shape[:-1] + (g.shape[-1], 2), dtype=g.dtype)
        np.multiply(g, ~second, out=out[..., 0])
        np.multiply(g, second, out=out[..., 1])
    else:
        out = g[..., None] * (local[..., None] == np.arange(window))
    return out.reshape(g.shape[:-1] + (g.shape[-1] * window,))


def _window_gather(g: np.ndarray, local: np.ndarray, window: int) -> np.ndarray:
    """Inverse of :func:`_window_pick`: read each window's ``local`` slot."""
    blocks = g.reshape(local.shape + (window,))
    if window == 2:
        return np.where(local.astype(bool), blocks[..., 1], blocks[..., 0])
    return np.take_along_axis(blocks, local[..., None], axis=-1)[..., 0]


def maxpool1d(x: Tensor, window: int) -> tuple[Tensor, PoolIndices]:
    """Non-overlapping max pool. A ragged tail is padded with -inf; ties go to the lowest index."""
    if x.ndim != 3:
        raise ValueError(f"maxpool1d: input must be [B, C, L], got shape {x.shape}")
    B, C, L = x.shape
    if window < 1 or window > L:
        raise ValueError(f"maxpool1d: window {window} must lie in [1, L={L}]")
    n_out = -(-L // window)
    data = x.data
    if n_out * window != L:
        data = np.pad(data, ((0, 0), (0, 0), (0, n_out * window - L)), constant_values=-np.inf)
    blocks = data.reshape(B, C, n_out, window)
    if window == 2:
        second = blocks[..., 1] > blocks[..., 0]
        local = second.astype(np.int64)
        out = np.where(second, blocks[..., 1], blocks[..., 0])
    else:
        local = blocks.argmax(axis=3)
        out = np.take_along_axis(blocks, local[..., None], axis=3)[..., 0]
    indices = PoolIndices(index=local + np.arange(n_out) * window, window=window, input_len=L)

    def backward(g):
        return (_window_pick(g, local, window)[:, :, :L],)

    return Tensor.from_op(out, (x,), backward, "maxpool1d"), indices


def maxunpool1d(x: Tensor, indices: PoolIndices, out_len: Optional[int] = None) -> Tensor:
    """Scatter ``x`` to the recorded argmax positions; zeros elsewhere."""
    out_len = indices.input_len if out_len is None else out_len
    index = indices.index
    if x.shape != index.shape:
        raise ValueError(f"maxunpool1d: input shape {x.shape} does not match pool indices {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= out_len):
        raise ValueError(f"maxunpool1d: pool index out of range for output length {out_len}")
    B, C, n = x.shape
    w = indices.window
    local = indices.local()
    span = n * w
    out = _window_pick(x.data, local, w)
    if span > out_len:
        out = np.ascontiguousarray(out[:, :, :out_len])
    elif span < out_len:
        out = np.pad(out, ((0, 0), (0, 0), (0, out_len - span)))

    def backward(g):
        if span > out_len:
            g = np.pad(g, ((0, 0), (0, 0), (0, span - out_len)))
        return (_window_gather(np.ascontiguousarray(g[:, :, :span]), local, w),)

    return Tensor.from_op(out, (x,), backward, "maxunpool1d")


def adaptive_spans(length: int, out_len: int) -> list[tuple[int, int]]:
    """Floor/ceil partition of ``range(length)`` into ``out_len`` spans."""
    return [((i * length) // out_len, -(-((i + 1) * length) // out_len)) for i in range(out_len)]


def adaptive_avg_pool1d(x: Tensor, out_len: int) -> Tensor:
    if x.ndim != 3:
        raise ValueError(f"adaptive_avg_pool1d: input must be [B, C, L], got shape {x.shape}")
    if out_len < 1:
        raise ValueError(f"adaptive_avg_pool1d: out_len must be >= 1, got {out_len}")
    L = x.shape[2]
    avg = np.zeros((L, out_len), dtype=x.dtype)
    for i, (start, end) in enumerate(adaptive_spans(L, out_len)):
        avg[start:end, i] = 1.0 / (end - start)
    out = x.data @ avg

    def backward(g):
        return (g @ avg.T,)

    return Tensor.from_op(out, (x,), backward, "adaptive_avg_pool1d")
