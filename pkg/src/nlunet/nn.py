"""Layer primitives on ``[B, D, H, W, C]`` tensors.

Convolutions use "same" zero padding of ``(k - 1) // 2`` on every side, so a
stride-1 convolution preserves the spatial size and a stride-2 convolution
halves even extents.  The stride-2 transposed convolution is the exact adjoint
of that strided convolution and therefore doubles every extent.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DataError, ShapeError
from .tensor import Tensor, default_dtype, make_result

TRAIN = "train"
EVAL = "eval"

_kinks = threading.local()


def _check_mode(mode: str) -> None:
    if mode not in (TRAIN, EVAL):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")


# --- parameters ----------------------------------------------------------------


@dataclass
class ConvParams:
    """Weights of a (transposed) 3D convolution.

    ``weight`` has shape ``[k, k, k, C_in, C_out]`` where ``C_in`` is the
    channel count of the op's input, for both the forward and transposed op.
    """

    weight: Tensor
    bias: Tensor
    stride: int = 1

    @property
    def kernel(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[3]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[4]

    @classmethod
    def init(cls, rng: np.random.Generator, kernel: int, c_in: int, c_out: int, stride: int = 1, dtype=None):
        """He-normal weights scaled by fan-in, zero bias."""
        if stride not in (1, 2):
            raise ContractError(f"stride must be 1 or 2, got {stride}")
        if kernel % 2 != 1:
            raise ContractError(f"kernel extent must be odd, got {kernel}")
        dtype = dtype or default_dtype()
        fan_in = kernel**3 * c_in
        w = rng.standard_normal((kernel, kernel, kernel, c_in, c_out)) * np.sqrt(2.0 / fan_in)
        return cls(
            weight=Tensor(w.astype(dtype), requires_grad=True),
            bias=Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True),
            stride=stride,
        )

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5

    @classmethod
    def init(cls, channels: int, dtype=None, momentum: float = 0.9, epsilon: float = 1e-5):
        dtype = dtype or default_dtype()
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            epsilon=epsilon,
        )

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


# --- convolution kernels on raw arrays ------------------------------------------


def _pad(k: int) -> int:
    return (k - 1) // 2


def _out_extent(n: int, k: int, stride: int) -> int:
    return (n + 2 * _pad(k) - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Gather ``[B, Do, Ho, Wo, k*k*k*C]`` patches (a fresh contiguous array)."""
    p = _pad(k)
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p), (p, p), (0, 0)))
    if k == 1:
        cols = x[:, ::stride, ::stride, ::stride, :]
        return np.ascontiguousarray(cols)
    win = sliding_window_view(x, (k, k, k), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride]
    # [B, Do, Ho, Wo, C, kd, kh, kw] -> [B, Do, Ho, Wo, kd, kh, kw, C]
    win = win.transpose(0, 1, 2, 3, 5, 6, 7, 4)
    b, do, ho, wo = win.shape[:4]
    return win.reshape(b, do, ho, wo, -1)


def _col2im(cols: np.ndarray, in_shape: tuple, k: int, stride: int) -> np.ndarray:
    """Scatter-add patch gradients back onto an input of shape ``in_shape``."""
    b, d, h, w, c = in_shape
    p = _pad(k)
    do, ho, wo = cols.shape[1:4]
    if k == 1:
        out = np.zeros(in_shape, dtype=cols.dtype)
        out[:, ::stride, ::stride, ::stride, :] = cols.reshape(b, do, ho, wo, c)
        return out
    cols = cols.reshape(b, do, ho, wo, k, k, k, c)
    out = np.zeros((b, d + 2 * p, h + 2 * p, w + 2 * p, c), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                out[
                    :,
                    i : i + stride * (do - 1) + 1 : stride,
                    j : j + stride * (ho - 1) + 1 : stride,
                    l : l + stride * (wo - 1) + 1 : stride,
                    :,
                ] += cols[:, :, :, :, i, j, l, :]
    return out[:, p : p + d, p : p + h, p : p + w, :]


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int):
    k = w.shape[0]
    cols = _im2col(x, k, stride)
    out = cols @ w.reshape(-1, w.shape[-1])
    return out, cols


def _conv_input_grad(g: np.ndarray, w: np.ndarray, in_shape: tuple, stride: int) -> np.ndarray:
    k = w.shape[0]
    if stride == 1:
        # Adjoint of a stride-1 "same" convolution: convolve with the flipped kernel.
        w_flip = np.ascontiguousarray(np.swapaxes(w[::-1, ::-1, ::-1], 3, 4))
        return _conv_forward(g, w_flip, 1)[0]
    gcols = g @ w.reshape(-1, w.shape[-1]).T
    return _col2im(gcols, in_shape, k, stride)


def _conv_weight_grad(cols: np.ndarray, g: np.ndarray, w_shape: tuple) -> np.ndarray:
    c_out = g.shape[-1]
    return (cols.reshape(-1, cols.shape[-1]).T @ g.reshape(-1, c_out)).reshape(w_shape)


def _check_input(x: Tensor, c_in: int, op: str) -> None:
    if x.ndim != 5:
        raise ShapeError(f"{op}: expected [B, D, H, W, C] input, got shape {x.shape}")
    if x.shape[-1] != c_in:
        raise ShapeError(f"{op}: input has {x.shape[-1]} channels, weights expect {c_in} (input {x.shape})")
    if min(x.shape[1:4]) < 1:
        raise ShapeError(f"{op}: empty spatial extent in {x.shape}")


# --- differentiable ops ---------------------------------------------------------


def conv3d(x: Tensor, p: ConvParams) -> Tensor:
    """3D convolution with "same" zero padding and stride 1 or 2."""
    _check_input(x, p.in_channels, "conv3d")
    s, k = p.stride, p.kernel
    if s == 2 and any(n % 2 for n in x.shape[1:4]):
        raise ShapeError(f"conv3d: stride 2 requires even spatial extents, got {x.shape[1:4]}")
    wt, bt = p.weight, p.bias
    out, cols = _conv_forward(x.data, wt.data, s)
    out += bt.data
    in_shape = x.shape

    def backward(g):
        gx = _conv_input_grad(g, wt.data, in_shape, s) if x.requires_grad else None
        gw = _conv_weight_grad(cols, g, wt.shape) if wt.requires_grad else None
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bt.requires_grad else None
        return gx, gw, gb

    return make_result(out, (x, wt, bt), backward, "conv3d")


def conv_transpose3d(x: Tensor, p: ConvParams) -> Tensor:
    """Stride-2 transposed convolution; output extents are exactly twice the input's.

    Weight layout ``[k, k, k, C_in, C_out]``.  With ``W`` the weight of a
    stride-2 ``conv3d`` mapping ``C_out -> C_in`` and ``W.swapaxes(3, 4)``
    used here, the two ops are adjoint.
    """
    _check_input(x, p.in_channels, "conv_transpose3d")
    if p.stride != 2:
        raise ContractError("conv_transpose3d supports stride 2 only")
    wt, bt = p.weight, p.bias
    b, d, h, w, _ = x.shape
    k = p.kernel
    if _out_extent(2 * d, k, 2) != d:
        raise ShapeError(f"conv_transpose3d: kernel {k} cannot double extent {d}")
    # Forward conv weight mapping C_out -> C_in.
    w_conv = np.swapaxes(wt.data, 3, 4)
    out_shape = (b, 2 * d, 2 * h, 2 * w, p.out_channels)
    xd = x.data
    out = _conv_input_grad(xd, w_conv, out_shape, 2)
    out += bt.data

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad or wt.requires_grad:
            cols = _im2col(g, k, 2)
            if x.requires_grad:
                gx = cols @ w_conv.reshape(-1, w_conv.shape[-1])
            if wt.requires_grad:
                gw = np.swapaxes(_conv_weight_grad(cols, xd, w_conv.shape), 3, 4)
        if bt.requires_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gw, gb

    return make_result(out, (x, wt, bt), backward, "conv_transpose3d")


def batch_norm(x: Tensor, p: BatchNormParams, mode: str) -> Tensor:
    """Per-channel batch normalization over all non-channel axes.

    Train mode normalizes with batch statistics and updates the running
    statistics in place; eval mode uses the running statistics.
    """
    _check_mode(mode)
    c = x.shape[-1]
    if p.gamma.shape != (c,):
        raise ShapeError(f"batch_norm: {c} channels but parameters for {p.gamma.shape[0]}")
    gamma, beta = p.gamma, p.beta
    xd = x.data
    axes = tuple(range(x.ndim - 1))

    if mode == EVAL:
        inv = 1.0 / np.sqrt(p.running_var + p.epsilon)
        xhat = (xd - p.running_mean) * inv
        out = xhat * gamma.data + beta.data

        def backward_eval(g):
            gx = g * (gamma.data * inv) if x.requires_grad else None
            gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
            gb = g.sum(axis=axes) if beta.requires_grad else None
            return gx, gg, gb

        return make_result(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward_eval, "batch_norm")

    n = xd.size // c
    if n < 2:
        raise ContractError(f"batch_norm in train mode needs at least 2 values per channel, got {n}")
    mu = xd.mean(axis=axes)
    centered = xd - mu
    var = (centered * centered).mean(axis=axes)
    inv = 1.0 / np.sqrt(var + p.epsilon)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    m = p.momentum
    p.running_mean[...] = m * p.running_mean + (1 - m) * mu
    p.running_var[...] = m * p.running_var + (1 - m) * var

    def backward(g):
        gb = g.sum(axis=axes)
        gg = (g * xhat).sum(axis=axes)
        gx = None
        if x.requires_grad:
            gx = (gamma.data * inv / n) * (n * g - gb - xhat * gg)
        return (
            gx,
            gg if gamma.requires_grad else None,
            gb if beta.requires_grad else None,
        )

    return make_result(out, (x, gamma, beta), backward, "batch_norm")


def relu6(x: Tensor) -> Tensor:
    """``min(max(x, 0), 6)``; the subgradient at both kinks is 0."""
    xd = x.data
    log = getattr(_kinks, "log", None)
    if log is not None:
        log.append(np.sign(xd).astype(np.int8) + np.sign(xd - 6).astype(np.int8))
    mask = (xd > 0) & (xd < 6)
    return make_result(np.clip(xd, 0, 6), (x,), lambda g: (g * mask,), "relu6")


@contextlib.contextmanager
def kink_sides() -> Iterator[list]:
    """Record, for every relu6 call in the block, which side of 0 and 6 each input lies on.

    Used as the ``probe`` of :func:`finite_difference_check` so that steps
    straddling a kink are left out of the comparison.
    """
    outer = getattr(_kinks, "log", None)
    _kinks.log = []
    try:
        yield _kinks.log
    finally:
        _kinks.log = outer


def dropout(x: Tensor, rate: float, mode: str, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors by ``1 / (1 - rate)``."""
    _check_mode(mode)
    if not 0 <= rate < 1:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == EVAL or rate == 0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs a random generator")
    scale = dropout_mask(x.shape, rate, rng).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return make_result(x.data * scale, (x,), lambda g: (g * scale,), "dropout")


def dropout_mask(shape: tuple, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean keep-mask; the drop probability is ``rate`` rounded to a multiple of 2**-16."""
    threshold = int(round(rate * 65536))
    return rng.integers(0, 65536, size=shape, dtype=np.uint16) >= threshold


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean voxel-wise softmax cross-entropy; ``labels`` holds integer classes."""
    k = logits.shape[-1]
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: labels {labels.shape} do not match logits {logits.shape}")
    bad = (labels < 0) | (labels >= k)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"cross_entropy: label {labels[idx]} at voxel {idx} outside 0..{k - 1}")

    z = logits.data.reshape(-1, k)
    lab = labels.reshape(-1).astype(np.intp)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(z.shape[0])
    n = z.shape[0]
    loss = np.asarray((lse - z[rows, lab]).mean(), dtype=logits.dtype)
    shape = logits.shape

    def backward(g):
        prob = np.exp(z - lse[:, None])
        prob[rows, lab] -= 1.0
        return ((prob * (g / n)).reshape(shape).astype(logits.dtype, copy=False),)

    return make_result(loss, (logits,), backward, "cross_entropy")
