"""Segmentation metrics: Dice ratio and modified Hausdorff distance (MHD).

For MHD a binary ``D x H x W`` map is read as a set of 1D fibers along one
axis: vectorizing along ``D`` gives ``H * W`` vectors of length ``D``.  Every
fiber takes part, including all-zero ones.  ``mhd_3d`` averages the three
axis-wise values so the result does not depend on orientation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError, UndefinedMetricError

AXES = {"D": 0, "H": 1, "W": 2}

# Row block for pairwise fiber distances; bounds memory at block * n_fibers floats.
_ROW_BLOCK = 2048


def binarize(classmap: np.ndarray, class_id: int) -> np.ndarray:
    return np.asarray(classmap) == class_id


def _check_pair(p: np.ndarray, l: np.ndarray) -> None:
    if p.shape != l.shape:
        raise ShapeError(f"maps differ in shape: {p.shape} vs {l.shape}")


def dice_ratio(p: np.ndarray, l: np.ndarray) -> float:
    """``2 |P & L| / (|P| + |L|)``; undefined when both maps are empty."""
    p = np.asarray(p, dtype=bool)
    l = np.asarray(l, dtype=bool)
    _check_pair(p, l)
    total = int(p.sum()) + int(l.sum())
    if total == 0:
        raise UndefinedMetricError("Dice ratio undefined: both maps are empty")
    return 2.0 * int(np.logical_and(p, l).sum()) / total


def modified_hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    """MHD between two point sets given as rows of ``a`` and ``b``.

    ``max(d(A, B), d(B, A))`` with ``d(A, B)`` the mean over ``a`` of the
    Euclidean distance to the nearest row of ``b``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if len(a) == 0 or len(b) == 0:
        raise UndefinedMetricError("MHD undefined for an empty point set")
    return max(_directed(a, b), _directed(b, a))


def _directed(a: np.ndarray, b: np.ndarray) -> float:
    b_sq = (b * b).sum(axis=1)
    total = 0.0
    for start in range(0, len(a), _ROW_BLOCK):
        blk = a[start : start + _ROW_BLOCK]
        d2 = (blk * blk).sum(axis=1)[:, None] + b_sq[None, :] - 2.0 * blk @ b.T
        total += np.sqrt(np.maximum(d2.min(axis=1), 0.0)).sum()
    return total / len(a)


def _fibers(m: np.ndarray, axis: int) -> np.ndarray:
    """One row per transverse index pair, holding the map values along ``axis``."""
    return np.moveaxis(m, axis, -1).reshape(-1, m.shape[axis])


def _directed_binary(a: np.ndarray, b: np.ndarray) -> float:
    # For 0/1 vectors ||x - y||^2 = |x| + |y| - 2 x.y; float64 holds these small integers exactly.
    a_cnt = a.sum(axis=1)
    b_cnt = b.sum(axis=1)
    bt = b.T
    total = 0.0
    for start in range(0, len(a), _ROW_BLOCK):
        blk = a[start : start + _ROW_BLOCK]
        d2 = a_cnt[start : start + _ROW_BLOCK, None] + b_cnt[None, :] - 2 * (blk @ bt)
        total += np.sqrt(d2.min(axis=1)).sum()
    return total / len(a)


def mhd_directional(p: np.ndarray, l: np.ndarray, axis="D") -> float:
    """MHD between the fiber sets of ``p`` and ``l`` taken along ``axis``."""
    p = np.asarray(p, dtype=bool)
    l = np.asarray(l, dtype=bool)
    _check_pair(p, l)
    if p.ndim != 3:
        raise ShapeError(f"expected a 3D map, got shape {p.shape}")
    if not p.any() or not l.any():
        raise UndefinedMetricError("MHD undefined: a binary map has no foreground voxels")
    ax = AXES[axis] if isinstance(axis, str) else int(axis)
    fa = _fibers(p, ax).astype(np.float64)
    fb = _fibers(l, ax).astype(np.float64)
    return max(_directed_binary(fa, fb), _directed_binary(fb, fa))


def mhd_3d(p: np.ndarray, l: np.ndarray) -> float:
    """Mean of the three axis-wise MHD values."""
    return sum(mhd_directional(p, l, ax) for ax in "DHW") / 3.0


# --- reports ------------------------------------------------------------------------


@dataclass
class ClassScore:
    class_id: int
    name: str
    dice: Optional[float]
    mhd3d: Optional[float]
    undefined: bool = False


@dataclass
class SegmentationReport:
    classes: list = field(default_factory=list)

    @property
    def avg_dice(self) -> float:
        vals = [c.dice for c in self.classes if c.dice is not None]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def avg_mhd3d(self) -> float:
        vals = [c.mhd3d for c in self.classes if c.mhd3d is not None]
        return float(np.mean(vals)) if vals else math.nan

    def to_text(self) -> str:
        """Flat ``key<TAB>value`` lines in a fixed order."""
        lines = []
        for c in self.classes:
            lines.append(f"{c.name}.class_id\t{c.class_id}")
            lines.append(f"{c.name}.dice\t{_fmt(c.dice)}")
            lines.append(f"{c.name}.mhd3d\t{_fmt(c.mhd3d)}")
            lines.append(f"{c.name}.undefined\t{int(c.undefined)}")
        lines.append(f"average.dice\t{_fmt(self.avg_dice)}")
        lines.append(f"average.mhd3d\t{_fmt(self.avg_mhd3d)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SegmentationReport":
        rows = {}
        order = []
        for line in text.splitlines():
            if not line.strip():
                continue
            key, val = line.split("\t")
            name, metric = key.rsplit(".", 1)
            if name == "average":
                continue
            if name not in rows:
                rows[name] = {}
                order.append(name)
            rows[name][metric] = val
        classes = [
            ClassScore(
                class_id=int(rows[n]["class_id"]),
                name=n,
                dice=_parse(rows[n]["dice"]),
                mhd3d=_parse(rows[n]["mhd3d"]),
                undefined=rows[n]["undefined"] == "1",
            )
            for n in order
        ]
        return cls(classes)


def _fmt(v: Optional[float]) -> str:
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def _parse(s: str) -> Optional[float]:
    return None if s == "nan" else float(s)


DEFAULT_CLASS_NAMES = {0: "background", 1: "CSF", 2: "GM", 3: "WM"}


def evaluate(
    pred: np.ndarray,
    truth: np.ndarray,
    class_ids: Sequence[int] = (1, 2, 3),
    names: Optional[dict] = None,
) -> SegmentationReport:
    """Per-class Dice and 3D-MHD plus unweighted averages.

    Classes whose metrics are undefined are flagged and left out of the
    averages.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match ground truth {truth.shape}")
    names = names or DEFAULT_CLASS_NAMES
    out = []
    for cid in class_ids:
        p, l = binarize(pred, cid), binarize(truth, cid)
        try:
            dice = dice_ratio(p, l)
        except UndefinedMetricError:
            dice = None
        try:
            mhd = mhd_3d(p, l)
        except UndefinedMetricError:
            mhd = None
        out.append(
            ClassScore(cid, names.get(cid, f"class{cid}"), dice, mhd, undefined=dice is None or mhd is None)
        )
    return SegmentationReport(out)
