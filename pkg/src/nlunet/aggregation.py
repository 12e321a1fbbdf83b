"""Global aggregation block: self-attention over every voxel of a feature map.

Queries come from a configurable transform of the input, keys and values from
1x1x1 convolutions.  The output takes the spatial size of the query map, so
the same block preserves, halves or doubles resolution depending on the query
transform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn
from .errors import ConfigError, ContractError, DataError, ResourceError, ShapeError
from .tensor import (
    Tensor,
    is_grad_enabled,
    make_result,
    matmul,
    mul,
    reshape,
    softmax_array,
    softmax_lastdim,
    transpose,
)

CONV1 = "conv1"
DECONV3_S2 = "deconv3_s2"
CONV3_S2 = "conv3_s2"
QUERY_KINDS = (CONV1, DECONV3_S2, CONV3_S2)

# Per batch item; 2**25 attention weights are 128 MiB in float32.
DEFAULT_MAX_ATTENTION = 2**25
# Query rows processed at once when no gradient is recorded.
_CHUNK_ROWS = 1024


@dataclass
class AggregationParams:
    query_kind: str
    query: nn.ConvParams
    key: nn.ConvParams
    value: nn.ConvParams
    out: nn.ConvParams
    dropout_rate: float = 0.5
    max_attention: int = DEFAULT_MAX_ATTENTION

    @property
    def key_channels(self) -> int:
        return self.key.out_channels

    @property
    def value_channels(self) -> int:
        return self.value.out_channels

    @property
    def out_channels(self) -> int:
        return self.out.out_channels

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        c_in: int,
        channels: int,
        query_kind: str = CONV1,
        dropout_rate: float = 0.5,
        dtype=None,
    ) -> "AggregationParams":
        """Build a block with ``C_K == C_V == C_O == channels``."""
        if query_kind == CONV1:
            q = nn.ConvParams.init(rng, 1, c_in, channels, 1, dtype)
        elif query_kind == DECONV3_S2:
            q = nn.ConvParams.init(rng, 3, c_in, channels, 2, dtype)
        elif query_kind == CONV3_S2:
            q = nn.ConvParams.init(rng, 3, c_in, channels, 2, dtype)
        else:
            raise ConfigError(f"unknown query transform {query_kind!r}")
        return cls(
            query_kind=query_kind,
            query=q,
            key=nn.ConvParams.init(rng, 1, c_in, channels, 1, dtype),
            value=nn.ConvParams.init(rng, 1, c_in, channels, 1, dtype),
            out=nn.ConvParams.init(rng, 1, channels, channels, 1, dtype),
            dropout_rate=dropout_rate,
        )

    def parameters(self) -> dict:
        named = {}
        for group in ("query", "key", "value", "out"):
            for k, v in getattr(self, group).parameters().items():
                named[f"{group}.{k}"] = v
        return named


def unfold(x: Tensor) -> Tensor:
    """``[B, D, H, W, C] -> [B, D*H*W, C]``; rows are D-major, then H, then W."""
    b, d, h, w, c = x.shape
    return reshape(x, (b, d * h * w, c))


def fold(x: Tensor, d: int, h: int, w: int) -> Tensor:
    b, n, c = x.shape
    if n != d * h * w:
        raise ShapeError(f"fold: {n} rows cannot fill {d}x{h}x{w}")
    return reshape(x, (b, d, h, w, c))


def query_transform(x: Tensor, p: AggregationParams) -> Tensor:
    if p.query_kind == DECONV3_S2:
        return nn.conv_transpose3d(x, p.query)
    return nn.conv3d(x, p.query)


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mode: str = nn.EVAL,
    rate: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    max_attention: int = DEFAULT_MAX_ATTENTION,
) -> tuple:
    """Scaled dot-product attention on ``[B, N, C]`` matrices, as one fused op.

    Returns ``(O, A)``: ``A = softmax(Q K^T / sqrt(C_K))`` with dropout
    applied in train mode, and ``O = A V``.  ``A`` is returned detached, for
    inspection only.
    """
    n_q, n_k = q.shape[1], k.shape[1]
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3 or q.shape[0] != k.shape[0]:
        raise ShapeError(f"attention: expected [B, N, C] inputs, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query dim {q.shape} and key dim {k.shape} differ")
    if k.shape[:2] != v.shape[:2]:
        raise ShapeError(f"attention: {k.shape[1]} keys but {v.shape[1]} values")
    if n_q * n_k > max_attention:
        raise ResourceError(
            f"attention matrix {n_q}x{n_k} (N_query={n_q}, N={n_k}) exceeds budget of {max_attention} entries"
        )
    qd, kd, vd = q.data, k.data, v.data
    scale = qd.dtype.type(1.0 / math.sqrt(q.shape[-1]))
    a = qd @ np.swapaxes(kd, -1, -2)
    a *= scale
    a -= a.max(axis=-1, keepdims=True)
    np.exp(a, out=a)
    a /= a.sum(axis=-1, keepdims=True)

    keep = None
    a_used = a
    if mode == nn.TRAIN and rate > 0:
        if rng is None:
            raise ContractError("attention dropout in train mode needs a random generator")
        keep = nn.dropout_mask(a.shape, rate, rng)
        inv = a.dtype.type(1.0 / (1.0 - rate))
        a_used = a * keep
        a_used *= inv
    elif mode not in (nn.TRAIN, nn.EVAL):
        raise ContractError(f"unknown mode {mode!r}")

    def backward(g):
        gq = gk = gv = None
        if v.requires_grad:
            gv = np.swapaxes(a_used, -1, -2) @ g
        if q.requires_grad or k.requires_grad:
            gs = g @ np.swapaxes(vd, -1, -2)
            if keep is not None:
                gs *= keep
                gs *= inv
            gs *= a
            gs -= a * gs.sum(axis=-1, keepdims=True)
            gs *= scale
            if q.requires_grad:
                gq = gs @ kd
            if k.requires_grad:
                gk = np.swapaxes(gs, -1, -2) @ qd
        return gq, gk, gv

    o = make_result(a_used @ vd, (q, k, v), backward, "attention")
    return o, Tensor(a_used)


def attention_reference(q: Tensor, k: Tensor, v: Tensor) -> tuple:
    """Unfused eval-mode attention built from the generic tensor ops."""
    scores = mul(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    a = softmax_lastdim(scores)
    return matmul(a, v), a


def _attention_chunked(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Graph-free attention that never holds more than a block of query rows."""
    scale = q.dtype.type(1.0 / math.sqrt(q.shape[-1]))
    kt = np.swapaxes(k, -1, -2)
    out = np.empty(q.shape[:2] + (v.shape[-1],), dtype=q.dtype)
    for start in range(0, q.shape[1], _CHUNK_ROWS):
        sl = slice(start, start + _CHUNK_ROWS)
        a = softmax_array((q[:, sl] @ kt) * scale)
        out[:, sl] = a @ v
    return out


def global_aggregate(
    x: Tensor,
    p: AggregationParams,
    mode: str = nn.EVAL,
    rng: Optional[np.random.Generator] = None,
    return_attention: bool = False,
):
    """Apply the block to ``x``; output spatial size follows the query transform.

    In eval mode without gradient recording the attention matrix is computed
    in row blocks, so large query maps are handled without materializing it.
    """
    if not np.all(np.isfinite(x.data)):
        raise DataError("global_aggregate: input contains non-finite values")
    qmap = query_transform(x, p)
    _, dq, hq, wq, _ = qmap.shape
    q = unfold(qmap)
    k = unfold(nn.conv3d(x, p.key))
    v = unfold(nn.conv3d(x, p.value))

    if mode == nn.EVAL and not is_grad_enabled() and not return_attention:
        o = Tensor(_attention_chunked(q.data, k.data, v.data))
        a = None
    else:
        o, a = attention(q, k, v, mode, p.dropout_rate, rng, p.max_attention)
    y = nn.conv3d(fold(o, dq, hq, wq), p.out)
    if return_attention:
        return y, a
    return y


def attention_rowsums(a: Tensor) -> np.ndarray:
    """Per-row sums of an attention matrix ``[B, N_q, N_k] -> [B, N_q]``."""
    return a.data.sum(axis=-1)
