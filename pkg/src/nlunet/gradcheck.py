"""Finite-difference gradient checks for every differentiable op, block and the network.

Each check runs in float64.  Tensor-valued outputs are reduced to a scalar by
a fixed random projection ``sum(out * R)`` so every output element carries
gradient.
"""

from __future__ import annotations

from typing import Callable, Dict, Optional

import numpy as np

from . import aggregation as agg
from . import nn
from .network import BlockA, BlockB, BlockC, BlockD, NetworkConfig, build_network, make_ablation
from .tensor import Tensor, finite_difference_check, mul, precision, softmax_lastdim, tensor_sum

DEFAULT_THRESHOLD = 1e-4


def _project(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    r = Tensor(rng.standard_normal(out.shape))
    return lambda t: tensor_sum(mul(t, r))


def _randn(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))


# Elements whose +-eps step moves a relu6 input across 0 or 6 are skipped and
# counted here; run_gradchecks reports the count per check.
_skipped = {"skipped": 0}


def _check_all(fn: Callable[[], Tensor], tensors, rng, eps=1e-4, sample=None) -> float:
    """Worst relative error of ``fn`` w.r.t. each tensor in ``tensors``, away from relu6 kinks."""
    proj = _project(fn(), rng)
    loss = lambda _t: proj(fn())
    return max(
        finite_difference_check(loss, t, eps=eps, sample=sample, rng=rng, probe=nn.kink_sides, stats=_skipped)
        for t in tensors
    )


def _conv(rng, stride):
    x = _randn(rng, 1, 4, 4, 4, 2)
    p = nn.ConvParams.init(rng, 3, 2, 3, stride)
    p.bias.data = rng.standard_normal(3)
    return _check_all(lambda: nn.conv3d(x, p), [x, p.weight, p.bias], rng)


def check_conv3d(rng):
    return _conv(rng, 1)


def check_conv3d_stride2(rng):
    return _conv(rng, 2)


def check_conv_transpose3d(rng):
    x = _randn(rng, 1, 2, 2, 2, 3)
    p = nn.ConvParams.init(rng, 3, 3, 2, 2)
    p.bias.data = rng.standard_normal(2)
    return _check_all(lambda: nn.conv_transpose3d(x, p), [x, p.weight, p.bias], rng)


def check_batch_norm(rng):
    x = _randn(rng, 2, 2, 2, 2, 3)
    p = nn.BatchNormParams.init(3)
    p.gamma.data = rng.uniform(0.5, 1.5, 3)
    p.beta.data = rng.standard_normal(3)
    return _check_all(lambda: nn.batch_norm(x, p, nn.TRAIN), [x, p.gamma, p.beta], rng)


def check_batch_norm_eval(rng):
    x = _randn(rng, 2, 2, 2, 2, 3)
    p = nn.BatchNormParams.init(3)
    p.running_mean[:] = rng.standard_normal(3)
    p.running_var[:] = rng.uniform(0.5, 2.0, 3)
    return _check_all(lambda: nn.batch_norm(x, p, nn.EVAL), [x, p.gamma, p.beta], rng)


def check_relu6(rng):
    raw = rng.uniform(-3, 9, size=(4, 5))
    # keep clear of the kinks at 0 and 6
    raw[np.abs(raw) < 1e-2] += 0.05
    raw[np.abs(raw - 6) < 1e-2] += 0.05
    x = Tensor(raw)
    return _check_all(lambda: nn.relu6(x), [x], rng)


def check_dropout_eval(rng):
    x = _randn(rng, 3, 4)
    return _check_all(lambda: nn.dropout(x, 0.5, nn.EVAL, None), [x], rng)


def check_dropout_train(rng):
    x = _randn(rng, 3, 4)
    seed = int(rng.integers(2**31))
    return _check_all(lambda: nn.dropout(x, 0.5, nn.TRAIN, np.random.default_rng(seed)), [x], rng)


def check_matmul(rng):
    a, b = _randn(rng, 4, 3), _randn(rng, 3, 5)
    return _check_all(lambda: a @ b, [a, b], rng)


def check_softmax(rng):
    x = _randn(rng, 3, 6)
    return _check_all(lambda: softmax_lastdim(x), [x], rng)


def check_cross_entropy(rng):
    logits = _randn(rng, 2, 2, 2, 2, 4)
    labels = rng.integers(0, 4, size=(2, 2, 2, 2))
    return finite_difference_check(lambda t: nn.cross_entropy(t, labels), logits)


def check_attention(rng):
    q, k, v = _randn(rng, 2, 5, 3), _randn(rng, 2, 7, 3), _randn(rng, 2, 7, 4)
    seed = int(rng.integers(2**31))
    fn = lambda: agg.attention(q, k, v, nn.TRAIN, 0.5, np.random.default_rng(seed))[0]
    return _check_all(fn, [q, k, v], rng)


def _aggregate(rng, kind, spatial):
    x = _randn(rng, 1, spatial, spatial, spatial, 3)
    p = agg.AggregationParams.init(rng, 3, 4, kind)
    for conv in (p.query, p.key, p.value, p.out):
        conv.bias.data = 0.1 * rng.standard_normal(conv.bias.shape)
    fn = lambda: agg.global_aggregate(x, p, nn.EVAL)
    return _check_all(fn, [x, p.query.weight, p.key.weight, p.value.weight, p.out.weight], rng)


def check_aggregate_conv1(rng):
    return _aggregate(rng, agg.CONV1, 2)


def check_aggregate_deconv(rng):
    return _aggregate(rng, agg.DECONV3_S2, 2)


def check_aggregate_conv3_s2(rng):
    return _aggregate(rng, agg.CONV3_S2, 4)


def _block(rng, block, x, mode=nn.TRAIN):
    seed = int(rng.integers(2**31))
    fn = lambda: block.forward(x, mode, np.random.default_rng(seed))
    tensors = [x] + [t for _, t in block.named_parameters()][:3]
    return _check_all(fn, tensors, rng, eps=1e-5, sample=12)


_BN = dict(momentum=0.9, epsilon=1e-5)


def check_block_a(rng):
    return _block(rng, BlockA(rng, 3, _BN), _randn(rng, 2, 2, 2, 2, 3))


def check_block_b(rng):
    return _block(rng, BlockB(rng, 2, 4, _BN), _randn(rng, 2, 4, 4, 4, 2))


def check_block_c(rng):
    return _block(rng, BlockC(rng, 3, 0.5, _BN), _randn(rng, 2, 2, 2, 2, 3))


def check_block_d(rng):
    return _block(rng, BlockD(rng, 4, 2, 0.5, _BN), _randn(rng, 2, 2, 2, 2, 4))


def check_network(rng):
    """Tiny full model (base width 4) on a 1x8^3x2 input, train mode."""
    net = build_network(make_ablation("full", NetworkConfig(base_width=4)), rng)
    x = _randn(rng, 1, 8, 8, 8, 2)
    seed = int(rng.integers(2**31))
    fn = lambda: net.forward(x, nn.TRAIN, np.random.default_rng(seed))
    params = net.parameters()
    picks = [x, params["stem.weight"], params["bottom.agg.key.weight"], params["up2.agg.query.weight"], params["output.classifier.weight"]]
    return _check_all(fn, picks, rng, eps=1e-5, sample=8)


CHECKS: Dict[str, Callable[[np.random.Generator], float]] = {
    "matmul": check_matmul,
    "softmax": check_softmax,
    "conv3d": check_conv3d,
    "conv3d_stride2": check_conv3d_stride2,
    "conv_transpose3d": check_conv_transpose3d,
    "batch_norm_train": check_batch_norm,
    "batch_norm_eval": check_batch_norm_eval,
    "relu6": check_relu6,
    "dropout_eval": check_dropout_eval,
    "dropout_train_fixed_mask": check_dropout_train,
    "cross_entropy": check_cross_entropy,
    "attention": check_attention,
    "aggregate_conv1": check_aggregate_conv1,
    "aggregate_deconv3_s2": check_aggregate_deconv,
    "aggregate_conv3_s2": check_aggregate_conv3_s2,
    "block_a": check_block_a,
    "block_b": check_block_b,
    "block_c": check_block_c,
    "block_d": check_block_d,
    "network": check_network,
}


def run_gradchecks(seed: int = 0, repeats: int = 1, names=None, skipped: Optional[dict] = None) -> Dict[str, float]:
    """Worst relative error per check over ``repeats`` seeds starting at ``seed``.

    If ``skipped`` is a dict it receives, per check, how many sampled elements
    were left out because their finite-difference step crossed a relu6 kink.
    """
    results = {}
    with precision(np.float64):
        for name, check in CHECKS.items():
            if names is not None and name not in names:
                continue
            _skipped["skipped"] = 0
            worst = 0.0
            for r in range(repeats):
                worst = max(worst, check(np.random.default_rng([seed + r, len(name)])))
            results[name] = worst
            if skipped is not None:
                skipped[name] = _skipped["skipped"]
    return results
