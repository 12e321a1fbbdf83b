"""Adam optimization, the patch-based training loop, and sliding-window inference."""

from __future__ import annotations

import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import nn
from .data import LabelVolume, Volume, argmax_labels, sample_corners, sliding_positions, stitch
from .errors import ConfigError, ContractError, NumericError
from .metrics import SegmentationReport, evaluate
from .network import Network, NetworkConfig, build_network, load_checkpoint, make_ablation, save_checkpoint
from .tensor import Tensor, no_grad, softmax_array

log = logging.getLogger(__name__)


# --- Adam ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 2e-6
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, state: AdamState, grads: Optional[dict] = None) -> None:
    """One Adam update with L2 weight decay folded into the gradient.

    ``params`` maps names to tensors; gradients come from ``grads`` or, when
    omitted, from each tensor's ``.grad``.
    """
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            raise ContractError(f"adam_step: no gradient for parameter {name!r}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data = (p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.data.dtype, copy=False)


# --- configuration ---------------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 5
    patch_size: int = 32
    steps: int = 2000
    seed: int = 0
    model: str = "full"
    base_width: int = 32
    lr: float = 0.001
    weight_decay: float = 2e-6
    log_every: int = 1
    checkpoint_every: int = 0
    val_every: int = 0
    overlap_step: int = 8
    infer_batch: int = 5

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patch_size < 4 or self.patch_size % 4:
            raise ConfigError(f"patch_size must be a positive multiple of 4, got {self.patch_size}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if not 1 <= self.overlap_step <= self.patch_size:
            raise ConfigError(f"overlap_step must be in [1, patch_size], got {self.overlap_step}")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")
        make_ablation(self.model)
        return self

    def network_config(self) -> NetworkConfig:
        return make_ablation(self.model, NetworkConfig(base_width=self.base_width))


@dataclass
class TrainResult:
    net: Network
    log: list  # (step, loss, val_dice or None)
    state: AdamState

    def losses(self) -> np.ndarray:
        return np.array([row[1] for row in self.log])


def _seeds(seed: int):
    init, sampling, dropout = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init), np.random.default_rng(sampling), np.random.default_rng(dropout))


def format_log_line(step: int, loss: float, val: Optional[float] = None) -> str:
    line = f"{step}\t{loss!r}"
    if val is not None:
        line += f"\t{val!r}"
    return line


def train(
    cfg: TrainConfig,
    data: Sequence[tuple],
    val: Optional[tuple] = None,
    log_path=None,
    checkpoint_path=None,
    net: Optional[Network] = None,
    progress: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Train on random patches from ``data`` (a list of ``(Volume, LabelVolume)``).

    Volumes should already be normalized.  Each step samples ``batch_size``
    patches, runs a train-mode forward pass, and applies one Adam update on
    the mean voxel cross-entropy.
    """
    cfg.validate()
    if not data:
        raise ConfigError("train: no training volumes")
    init_rng, sample_rng, drop_rng = _seeds(cfg.seed)
    if net is None:
        net = build_network(cfg.network_config(), init_rng)
    params = net.parameters()
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    s = cfg.patch_size
    records = []

    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "a")
    try:
        for step in range(1, cfg.steps + 1):
            xs, ys = [], []
            which = sample_rng.integers(0, len(data), size=cfg.batch_size)
            for i in which:
                vol, lab = data[i]
                (z, y, x), = sample_corners(vol.dims, 1, s, sample_rng)
                xs.append(vol.data[z : z + s, y : y + s, x : x + s])
                ys.append(lab.labels[z : z + s, y : y + s, x : x + s])
            xb = Tensor(np.stack(xs))
            yb = np.stack(ys)

            net.zero_grad()
            logits = net.forward(xb, nn.TRAIN, drop_rng)
            loss = nn.cross_entropy(logits, yb)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite training loss {value} at step {step}")
            loss.backward()
            adam_step(params, state)

            val_dice = None
            if val is not None and cfg.val_every and step % cfg.val_every == 0:
                _, pred = infer(net, val[0], s, cfg.overlap_step, cfg.infer_batch)
                val_dice = evaluate(pred, val[1].labels).avg_dice
            if step % cfg.log_every == 0 or val_dice is not None:
                records.append((step, value, val_dice))
                if log_file:
                    log_file.write(format_log_line(step, value, val_dice) + "\n")
                    log_file.flush()
            if progress:
                progress(step, value)
            if checkpoint_path and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(net, checkpoint_path, extra={"step": step})
    finally:
        if log_file:
            log_file.close()
    if checkpoint_path:
        save_checkpoint(net, checkpoint_path, extra={"step": cfg.steps})
    return TrainResult(net, records, state)


# --- inference ----------------------------------------------------------------------------


def _predict_chunk(net: Network, vol: np.ndarray, corners: Sequence, s: int) -> list:
    x = np.stack([vol[z : z + s, y : y + s, xx : xx + s] for z, y, xx in corners])
    with no_grad():
        logits = net.forward(Tensor(x), nn.EVAL)
    probs = softmax_array(logits.data.astype(np.float64))
    return list(probs)


def infer(
    net: Network,
    volume: Volume,
    patch_size: int,
    overlap_step: int,
    batch_size: int = 5,
    workers: int = 1,
) -> tuple:
    """Sliding-window prediction: returns ``(probabilities [D,H,W,K], labels [D,H,W])``.

    Windows are grouped into fixed batches of ``batch_size``; with
    ``workers > 1`` batches run concurrently but are stitched in window order,
    so the result does not depend on the worker count.
    """
    if patch_size % net.config.spatial_multiple:
        raise ConfigError(f"patch_size {patch_size} not divisible by {net.config.spatial_multiple}")
    corners = sliding_positions(volume.dims, patch_size, overlap_step)
    chunks = [corners[i : i + batch_size] for i in range(0, len(corners), batch_size)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda c: _predict_chunk(net, volume.data, c, patch_size), chunks))
    else:
        results = [_predict_chunk(net, volume.data, c, patch_size) for c in chunks]
    probs = [p for chunk in results for p in chunk]
    stitched = stitch(probs, corners, volume.dims, net.config.num_classes)
    return stitched, argmax_labels(stitched)


def infer_checkpoint(path, volume: Volume, patch_size: int, overlap_step: int, **kw) -> tuple:
    return infer(load_checkpoint(path), volume, patch_size, overlap_step, **kw)


# --- sweeps ------------------------------------------------------------------------------------

SWEEP_COLUMNS = ("value", "patches", "dice_CSF", "dice_GM", "dice_WM", "dice_avg", "error")


def _row(value, patches, report: Optional[SegmentationReport], error: str = "") -> dict:
    row = {"value": value, "patches": patches, "error": error}
    for name in ("CSF", "GM", "WM"):
        row[f"dice_{name}"] = math.nan
    row["dice_avg"] = math.nan
    if report is not None:
        for c in report.classes:
            row[f"dice_{c.name}"] = c.dice if c.dice is not None else math.nan
        row["dice_avg"] = report.avg_dice
    return row


def sweep(
    axis: str,
    values: Sequence[int],
    cfg: TrainConfig,
    train_data: Sequence[tuple],
    eval_volume: Volume,
    eval_labels: LabelVolume,
    net: Optional[Network] = None,
) -> list:
    """Evaluate segmentation quality across overlap steps or patch sizes.

    ``overlap``: one network (``net`` or trained once from ``cfg``) evaluated
    at every step size with patch size ``cfg.patch_size``.  ``patch_size``: a
    fresh network trained per value, evaluated with step
    ``min(cfg.overlap_step, value)``.  Failures are recorded per row.
    """
    cfg.validate()
    values = [int(v) for v in values]
    if axis == "overlap":
        bad = [v for v in values if not 1 <= v <= cfg.patch_size]
        if bad:
            raise ConfigError(f"overlap steps {bad} must lie in [1, {cfg.patch_size}]")
        if net is None:
            net = train(cfg, train_data).net
    elif axis == "patch_size":
        bad = [v for v in values if v < 4 or v % 4 or v > min(eval_volume.dims)]
        if bad:
            raise ConfigError(f"patch sizes {bad} must be multiples of 4 that fit the volume")
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected 'overlap' or 'patch_size'")

    rows = []
    for v in values:
        try:
            if axis == "overlap":
                s, t, model = cfg.patch_size, v, net
            else:
                s, t = v, min(cfg.overlap_step, v)
                model = train(dataclasses.replace(cfg, patch_size=v, overlap_step=t), train_data).net
            count = len(sliding_positions(eval_volume.dims, s, t))
            _, pred = infer(model, eval_volume, s, t, cfg.infer_batch)
            rows.append(_row(v, count, evaluate(pred, eval_labels.labels)))
        except Exception as exc:  # recorded, sweep continues
            log.warning("sweep value %s failed: %s", v, exc)
            rows.append(_row(v, 0, None, f"{type(exc).__name__}: {exc}"))
    return rows


def write_sweep(rows: list, table_path, plot_path=None) -> None:
    """Tab-separated table with columns ``SWEEP_COLUMNS``; optional whitespace ``.dat`` for plotting."""
    table_path = Path(table_path)
    table_path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(SWEEP_COLUMNS)]
    for r in rows:
        lines.append("\t".join(_cell(r[c]) for c in SWEEP_COLUMNS))
    table_path.write_text("\n".join(lines) + "\n")
    if plot_path is not None:
        dat = ["# value dice_avg patches"]
        dat += [f"{r['value']} {_cell(r['dice_avg'])} {r['patches']}" for r in rows if not r["error"]]
        Path(plot_path).write_text("\n".join(dat) + "\n")


def _cell(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v).replace("\t", " ")
