"""Residual blocks and the two-scale non-local U-Net built from them.

Block kinds:

* ``a``: size-preserving pre-activation residual block, two 3x3x3 convolutions.
* ``b``: down-sampling residual block; a stride-2 1x1x1 convolution replaces
  the identity shortcut.
* ``c``: identity shortcut around a size-preserving global aggregation block.
* ``d``: up-sampling residual block; a stride-2 3x3x3 deconvolution shortcut
  plus an up-sampling global aggregation branch.

Encoder and decoder features are merged by summation.
"""

from __future__ import annotations

import dataclasses
import json
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import nn
from .aggregation import CONV1, DECONV3_S2, DEFAULT_MAX_ATTENTION, AggregationParams, global_aggregate
from .errors import CheckpointError, ConfigError, ContractError, ShapeError
from .nn import BatchNormParams, ConvParams
from .tensor import Tensor, default_dtype

BOTTOM_KINDS = ("conv", "aggregation")
UPSAMPLE_KINDS = ("deconv", "aggregation-deconv")
ABLATION_IDS = ("1", "2", "3", "4", "5", "full")


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 2
    num_classes: int = 4
    base_width: int = 32
    num_scales: int = 2
    bottom_kind: str = "aggregation"
    upsample_kind: str = "aggregation-deconv"
    short_residuals: bool = True
    first_up_only_aggregation: bool = False
    dropout_rate: float = 0.5
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-5
    max_attention: int = DEFAULT_MAX_ATTENTION

    def validate(self) -> "NetworkConfig":
        if self.num_scales != 2:
            raise ConfigError(f"only two down-sampling stages are supported, got num_scales={self.num_scales}")
        for name in ("in_channels", "num_classes", "base_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.bottom_kind not in BOTTOM_KINDS:
            raise ConfigError(f"bottom_kind must be one of {BOTTOM_KINDS}, got {self.bottom_kind!r}")
        if self.upsample_kind not in UPSAMPLE_KINDS:
            raise ConfigError(f"upsample_kind must be one of {UPSAMPLE_KINDS}, got {self.upsample_kind!r}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        return self

    @property
    def widths(self) -> list:
        return [self.base_width * 2**i for i in range(self.num_scales + 1)]

    @property
    def spatial_multiple(self) -> int:
        return 2**self.num_scales

    def up_uses_aggregation(self, stage: int) -> bool:
        """Stage 0 is the up-sampling block nearest the bottom."""
        if self.upsample_kind != "aggregation-deconv":
            return False
        return stage == 0 or not self.first_up_only_aggregation

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d).validate()


def make_ablation(model_id: Union[int, str], base_cfg: Optional[NetworkConfig] = None) -> NetworkConfig:
    """Config for one rung of the ablation ladder (``1``..``5`` or ``"full"``)."""
    base = base_cfg or NetworkConfig()
    key = str(model_id).lower()
    if key.startswith("model"):
        key = key[5:]
    plain = dict(bottom_kind="conv", upsample_kind="deconv", first_up_only_aggregation=False)
    variants = {
        "1": dict(plain, short_residuals=False),
        "2": dict(plain, short_residuals=True),
        "3": dict(plain, short_residuals=True, upsample_kind="aggregation-deconv", first_up_only_aggregation=True),
        "4": dict(plain, short_residuals=True, upsample_kind="aggregation-deconv"),
        "5": dict(plain, short_residuals=True, bottom_kind="aggregation"),
        "full": dict(
            bottom_kind="aggregation",
            upsample_kind="aggregation-deconv",
            short_residuals=True,
            first_up_only_aggregation=False,
        ),
    }
    if key not in variants:
        raise ConfigError(f"unknown ablation model {model_id!r}; expected one of {ABLATION_IDS}")
    return dataclasses.replace(base, **variants[key]).validate()


# --- blocks ---------------------------------------------------------------------


class Module:
    """Container whose parameters are discovered from its attributes in definition order."""

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (ConvParams, BatchNormParams, AggregationParams)):
                for k, t in val.parameters().items():
                    yield f"{full}.{k}", t

    def named_buffers(self, prefix: str = ""):
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Module):
                yield from val.named_buffers(full + ".")
            elif isinstance(val, BatchNormParams):
                for k, arr in val.buffers().items():
                    yield f"{full}.{k}", arr


def _act(x: Tensor, bn: BatchNormParams, mode: str) -> Tensor:
    return nn.relu6(nn.batch_norm(x, bn, mode))


class ConvLayer(Module):
    """BN -> ReLU6 -> 3x3x3 convolution (plain, no shortcut)."""

    kind = "conv"

    def __init__(self, rng, c_in, c_out, stride, bn_kw):
        self.bn = BatchNormParams.init(c_in, **bn_kw)
        self.conv = ConvParams.init(rng, 3, c_in, c_out, stride)

    def forward(self, x, mode, rng=None):
        return nn.conv3d(_act(x, self.bn, mode), self.conv)


class DeconvLayer(Module):
    """BN -> ReLU6 -> stride-2 3x3x3 deconvolution."""

    kind = "deconv"

    def __init__(self, rng, c_in, c_out, bn_kw):
        self.bn = BatchNormParams.init(c_in, **bn_kw)
        self.deconv = ConvParams.init(rng, 3, c_in, c_out, 2)

    def forward(self, x, mode, rng=None):
        return nn.conv_transpose3d(_act(x, self.bn, mode), self.deconv)


class BlockA(Module):
    kind = "a"

    def __init__(self, rng, channels, bn_kw, residual=True):
        self.residual = residual
        self.bn1 = BatchNormParams.init(channels, **bn_kw)
        self.conv1 = ConvParams.init(rng, 3, channels, channels)
        self.bn2 = BatchNormParams.init(channels, **bn_kw)
        self.conv2 = ConvParams.init(rng, 3, channels, channels)

    def forward(self, x, mode, rng=None):
        h = nn.conv3d(_act(x, self.bn1, mode), self.conv1)
        h = nn.conv3d(_act(h, self.bn2, mode), self.conv2)
        return _residual_sum(x, h) if self.residual else h


class BlockB(Module):
    kind = "b"

    def __init__(self, rng, c_in, c_out, bn_kw):
        self.bn1 = BatchNormParams.init(c_in, **bn_kw)
        self.conv1 = ConvParams.init(rng, 3, c_in, c_out, 2)
        self.bn2 = BatchNormParams.init(c_out, **bn_kw)
        self.conv2 = ConvParams.init(rng, 3, c_out, c_out)
        self.shortcut = ConvParams.init(rng, 1, c_in, c_out, 2)

    def forward(self, x, mode, rng=None):
        h = nn.conv3d(_act(x, self.bn1, mode), self.conv1)
        h = nn.conv3d(_act(h, self.bn2, mode), self.conv2)
        return _residual_sum(nn.conv3d(x, self.shortcut), h)


class BlockC(Module):
    kind = "c"

    def __init__(self, rng, channels, dropout_rate, bn_kw, max_attention=DEFAULT_MAX_ATTENTION):
        self.bn = BatchNormParams.init(channels, **bn_kw)
        self.agg = AggregationParams.init(rng, channels, channels, CONV1, dropout_rate)
        self.agg.max_attention = max_attention

    def forward(self, x, mode, rng=None):
        return _residual_sum(x, global_aggregate(_act(x, self.bn, mode), self.agg, mode, rng))


class BlockD(Module):
    kind = "d"

    def __init__(self, rng, c_in, c_out, dropout_rate, bn_kw, max_attention=DEFAULT_MAX_ATTENTION):
        self.bn = BatchNormParams.init(c_in, **bn_kw)
        self.agg = AggregationParams.init(rng, c_in, c_out, DECONV3_S2, dropout_rate)
        self.agg.max_attention = max_attention
        self.shortcut = ConvParams.init(rng, 3, c_in, c_out, 2)

    def forward(self, x, mode, rng=None):
        branch = global_aggregate(_act(x, self.bn, mode), self.agg, mode, rng)
        return _residual_sum(nn.conv_transpose3d(x, self.shortcut), branch)


class OutputBlock(Module):
    """Block a followed by BN -> ReLU6 -> dropout -> 1x1x1 convolution to class logits."""

    def __init__(self, rng, channels, num_classes, dropout_rate, bn_kw, residual=True):
        self.block = BlockA(rng, channels, bn_kw, residual)
        self.bn = BatchNormParams.init(channels, **bn_kw)
        self.classifier = ConvParams.init(rng, 1, channels, num_classes)
        self.dropout_rate = dropout_rate

    def forward(self, x, mode, rng=None):
        h = _act(self.block.forward(x, mode, rng), self.bn, mode)
        h = nn.dropout(h, self.dropout_rate, mode, rng)
        return nn.conv3d(h, self.classifier)


def _residual_sum(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"internal: residual sum of mismatched shapes {a.shape} and {b.shape}")
    return a + b


def residual_block(x: Tensor, block: Module, mode: str = nn.EVAL, rng=None) -> Tensor:
    """Run one block (of kind a, b, c or d) on ``x``."""
    return block.forward(x, mode, rng)


# --- network ----------------------------------------------------------------------


class Network(Module):
    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        cfg.validate()
        self.config = cfg
        w0, w1, w2 = cfg.widths
        bn_kw = dict(momentum=cfg.bn_momentum, epsilon=cfg.bn_epsilon)
        res = cfg.short_residuals

        self.stem = ConvParams.init(rng, 3, cfg.in_channels, w0)
        self.input_block = BlockA(rng, w0, bn_kw, residual=res)
        if res:
            self.down1 = BlockB(rng, w0, w1, bn_kw)
            self.down2 = BlockB(rng, w1, w2, bn_kw)
        else:
            self.down1 = ConvLayer(rng, w0, w1, 2, bn_kw)
            self.down2 = ConvLayer(rng, w1, w2, 2, bn_kw)
        if cfg.bottom_kind == "aggregation":
            self.bottom = BlockC(rng, w2, cfg.dropout_rate, bn_kw, cfg.max_attention)
        else:
            self.bottom = ConvLayer(rng, w2, w2, 1, bn_kw)
        self.up1 = self._up(rng, w2, w1, 0, bn_kw)
        self.post1 = BlockA(rng, w1, bn_kw, residual=res)
        self.up2 = self._up(rng, w1, w0, 1, bn_kw)
        self.post2 = BlockA(rng, w0, bn_kw, residual=res)
        self.output = OutputBlock(rng, w0, cfg.num_classes, cfg.dropout_rate, bn_kw, residual=res)
        names = [n for n, _ in self.named_parameters()]
        assert len(names) == len(set(names)), "duplicate parameter names"

    def _up(self, rng, c_in, c_out, stage, bn_kw):
        cfg = self.config
        if cfg.up_uses_aggregation(stage):
            return BlockD(rng, c_in, c_out, cfg.dropout_rate, bn_kw, cfg.max_attention)
        return DeconvLayer(rng, c_in, c_out, bn_kw)

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(self.named_parameters())

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(self.named_buffers())

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    def forward(self, x: Tensor, mode: str = nn.EVAL, rng: Optional[np.random.Generator] = None) -> Tensor:
        cfg = self.config
        if x.ndim != 5:
            raise ShapeError(f"network input must be [B, D, H, W, C], got {x.shape}")
        if x.shape[-1] != cfg.in_channels:
            raise ShapeError(f"network expects {cfg.in_channels} input channels, got {x.shape}")
        m = cfg.spatial_multiple
        if any(n % m for n in x.shape[1:4]):
            raise ShapeError(f"spatial extents {x.shape[1:4]} must be divisible by {m}")
        if mode == nn.TRAIN and rng is None:
            raise ContractError("train-mode forward needs a random generator for dropout")

        e0 = self.input_block.forward(nn.conv3d(x, self.stem), mode, rng)
        e1 = self.down1.forward(e0, mode, rng)
        e2 = self.down2.forward(e1, mode, rng)
        h = self.bottom.forward(e2, mode, rng)
        h = self.post1.forward(_residual_sum(self.up1.forward(h, mode, rng), e1), mode, rng)
        h = self.post2.forward(_residual_sum(self.up2.forward(h, mode, rng), e0), mode, rng)
        return self.output.forward(h, mode, rng)

    __call__ = forward


def build_network(cfg: NetworkConfig, rng: Union[int, np.random.Generator] = 0) -> Network:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return Network(cfg, rng)


def forward(net: Network, x: Tensor, mode: str = nn.EVAL, rng=None) -> Tensor:
    return net.forward(x, mode, rng)


def count_parameters(net: Network) -> int:
    """Number of trainable scalars (BN gamma/beta included, running stats excluded)."""
    return sum(t.size for t in net.parameters().values())


# --- checkpoints ------------------------------------------------------------------


def _checkpoint_paths(path) -> tuple:
    path = Path(path)
    return path.with_suffix(".json"), path.with_suffix(".bin")


def save_checkpoint(net: Network, path, extra: Optional[dict] = None) -> Path:
    """Write ``<path>.json`` (manifest + config) and ``<path>.bin`` (little-endian float32 blob)."""
    manifest_path, blob_path = _checkpoint_paths(path)
    entries, chunks, offset = [], [], 0
    items = [(n, t.data, "param") for n, t in net.named_parameters()]
    items += [(n, a, "buffer") for n, a in net.named_buffers()]
    for name, arr, kind in items:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append(dict(name=name, kind=kind, shape=list(arr.shape), dtype="float32", offset=offset, nbytes=len(raw)))
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": "nlunet-checkpoint-1", "config": net.config.to_dict(), "entries": entries}
    if extra:
        manifest["extra"] = extra
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest_path


def read_manifest(path) -> dict:
    manifest_path, _ = _checkpoint_paths(path)
    try:
        return json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest {manifest_path}: {exc}") from exc


def load_checkpoint(path, net: Optional[Network] = None) -> Network:
    """Load parameters and running statistics; any name or shape mismatch is an error."""
    manifest = read_manifest(path)
    _, blob_path = _checkpoint_paths(path)
    cfg = NetworkConfig.from_dict(manifest["config"])
    if net is None:
        net = build_network(cfg, 0)
    elif net.config != cfg:
        raise CheckpointError("checkpoint config does not match the target network")
    try:
        blob = blob_path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint blob {blob_path}: {exc}") from exc

    targets = {n: ("param", t) for n, t in net.named_parameters()}
    targets.update({n: ("buffer", a) for n, a in net.named_buffers()})
    seen = set()
    for e in manifest["entries"]:
        name = e["name"]
        if name not in targets:
            raise CheckpointError(f"checkpoint entry {name!r} has no matching network slot")
        kind, slot = targets[name]
        arr_shape = slot.shape
        if tuple(e["shape"]) != tuple(arr_shape):
            raise CheckpointError(f"shape mismatch for {name!r}: checkpoint {e['shape']}, network {list(arr_shape)}")
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"checkpoint blob truncated at entry {name!r}")
        vals = np.frombuffer(blob, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"]).reshape(arr_shape)
        if kind == "param":
            slot.data = vals.astype(default_dtype())
        else:
            slot[...] = vals
        seen.add(name)
    missing = set(targets) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks entries: {sorted(missing)[:5]}")
    return net
