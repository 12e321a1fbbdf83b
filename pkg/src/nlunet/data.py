"""Synthetic phantoms, volume files, patch sampling and sliding-window stitching.

Intensity volumes are ``[D, H, W, C]`` float32 arrays, label volumes
``[D, H, W]`` uint8 arrays.  On disk a volume is a small text header plus a raw
little-endian payload next to it.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataError, ShapeError, VolumeIOError

NUM_PHANTOM_CLASSES = 4
CLASS_NAMES = ("background", "CSF", "GM", "WM")

# Class means per channel (background, CSF, GM, WM).  Channel 0 makes GM and
# WM nearly isointense; channel 1 orders the tissues the other way round.
CLASS_MEANS = np.array(
    [
        [0.0, 0.0],
        [0.30, 1.00],
        [0.60, 0.60],
        [0.70, 0.35],
    ],
    dtype=np.float64,
)

# Ellipsoidal radius thresholds: WM core, GM band, CSF rim.
_RADII = (0.50, 0.74, 0.95)


@dataclass
class Volume:
    data: np.ndarray  # [D, H, W, C] float32
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    @property
    def dims(self) -> tuple:
        return self.data.shape[:3]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def normalized(self) -> "Volume":
        """Per-channel z-score over the whole volume."""
        flat = self.data.reshape(-1, self.channels).astype(np.float64)
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        data = ((self.data - mean) / std).astype(np.float32)
        return Volume(data, mean.astype(np.float32), std.astype(np.float32))


@dataclass
class LabelVolume:
    labels: np.ndarray  # [D, H, W] uint8
    num_classes: int = NUM_PHANTOM_CLASSES

    @property
    def dims(self) -> tuple:
        return self.labels.shape

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise DataError(f"label {int(self.labels.max())} not below num_classes={self.num_classes}")


# --- phantoms ------------------------------------------------------------------------


def _smooth_field(rng: np.random.Generator, dims: tuple, sigma: float) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal(dims), sigma, mode="wrap")
    sd = f.std()
    return f / sd if sd > 0 else f


def generate_phantom(
    seed: int,
    dims: Sequence[int] = (64, 64, 64),
    num_classes: int = NUM_PHANTOM_CLASSES,
    noise_level: float = 0.05,
) -> tuple:
    """Two-channel labelled phantom built from nested, randomly perturbed shells.

    Labels: 0 background, 1 CSF rim, 2 GM band, 3 WM core.  Each channel's
    intensity is the class mean times a smooth bias field, plus smooth texture
    and white Gaussian noise with standard deviation ``noise_level``.
    """
    if num_classes != NUM_PHANTOM_CLASSES:
        raise ConfigError(f"phantoms have exactly {NUM_PHANTOM_CLASSES} classes, got {num_classes}")
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 8:
        raise ConfigError(f"phantom dims must be three extents >= 8, got {dims}")
    if noise_level < 0:
        raise ConfigError(f"noise_level must be >= 0, got {noise_level}")
    rng = np.random.default_rng(seed)

    center = rng.uniform(-0.08, 0.08, size=3)
    semi = rng.uniform(0.85, 1.0, size=3)
    grids = np.meshgrid(*[np.linspace(-1.0, 1.0, d) for d in dims], indexing="ij")
    r = np.sqrt(sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, semi)))

    sigma = max(dims) / 10.0
    labels = np.zeros(dims, dtype=np.uint8)
    # Outermost shell first so inner classes overwrite.
    for cls, radius in zip((1, 2, 3), reversed(_RADII)):
        wobble = 0.07 * _smooth_field(rng, dims, sigma)
        labels[r + wobble < radius] = cls

    frac = np.bincount(labels.ravel(), minlength=NUM_PHANTOM_CLASSES) / labels.size
    if frac.min() < 0.01:
        raise ConfigError(f"dims {dims} too small for a phantom: class fractions {np.round(frac, 4).tolist()}")

    channels = []
    for ch in range(CLASS_MEANS.shape[1]):
        bias = 1.0 + 0.05 * _smooth_field(rng, dims, 2 * sigma)
        texture = 0.02 * _smooth_field(rng, dims, 1.5)
        noise = noise_level * rng.standard_normal(dims)
        img = CLASS_MEANS[labels, ch] * bias + texture * (labels > 0) + noise
        channels.append(img)
    data = np.stack(channels, axis=-1).astype(np.float32)
    return Volume(data), LabelVolume(labels, num_classes)


# --- patches ---------------------------------------------------------------------------


def _check_patch(dims: Sequence[int], s: int) -> None:
    if s < 1 or any(s > d for d in dims):
        raise ConfigError(f"patch size {s} does not fit volume dims {tuple(dims)}")


def sample_corners(dims: Sequence[int], n: int, s: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` uniform random corners with ``0 <= c <= dim - s`` per axis."""
    _check_patch(dims, s)
    highs = np.array([d - s + 1 for d in dims])
    return rng.integers(0, highs, size=(n, 3))


def sample_patches(vol: Volume, labels: LabelVolume, n: int, s: int, rng: np.random.Generator) -> list:
    """Random aligned ``(image [s,s,s,C], labels [s,s,s])`` crops."""
    if vol.dims != labels.dims:
        raise ShapeError(f"volume dims {vol.dims} differ from label dims {labels.dims}")
    out = []
    for z, y, x in sample_corners(vol.dims, n, s, rng):
        sl = (slice(z, z + s), slice(y, y + s), slice(x, x + s))
        out.append((vol.data[sl], labels.labels[sl]))
    return out


def axis_offsets(dim: int, s: int, t: int) -> list:
    offs = list(range(0, dim - s + 1, t))
    if offs[-1] != dim - s:
        offs.append(dim - s)
    return offs


def sliding_positions(dims: Sequence[int], s: int, t: int) -> list:
    """Window corners stepping by ``t``, with a final window clamped to the far edge."""
    if not 1 <= t <= s:
        raise ConfigError(f"overlap step must satisfy 1 <= t <= s, got t={t}, s={s}")
    _check_patch(dims, s)
    return list(itertools.product(*(axis_offsets(d, s, t) for d in dims)))


def coverage_counts(dims: Sequence[int], s: int, t: int) -> np.ndarray:
    counts = np.zeros(tuple(dims), dtype=np.int32)
    for z, y, x in sliding_positions(dims, s, t):
        counts[z : z + s, y : y + s, x : x + s] += 1
    return counts


def stitch(prob_patches: Sequence[np.ndarray], corners: Sequence, dims: Sequence[int], k: int) -> np.ndarray:
    """Average overlapping per-patch probability maps into a ``[D, H, W, K]`` volume."""
    acc = np.zeros(tuple(dims) + (k,), dtype=np.float64)
    counts = np.zeros(tuple(dims), dtype=np.int32)
    for p, (z, y, x) in zip(prob_patches, corners):
        s = p.shape[0]
        acc[z : z + s, y : y + s, x : x + s] += p
        counts[z : z + s, y : y + s, x : x + s] += 1
    if counts.min() < 1:
        raise RuntimeError("internal: sliding windows left voxels uncovered")
    return (acc / counts[..., None]).astype(np.float32)


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    """Per-voxel argmax; ties go to the lowest class index."""
    return np.argmax(probs, axis=-1).astype(np.uint8)


# --- volume files ----------------------------------------------------------------------

_FORMAT = "nlunet-volume-1"


def _payload_path(header: Path) -> Path:
    return header.with_suffix(".raw")


def write_volume(path, vol) -> Path:
    """Write ``<path>`` (text header) and ``<path minus suffix>.raw`` (payload)."""
    path = Path(path)
    if isinstance(vol, LabelVolume):
        arr = np.ascontiguousarray(vol.labels, dtype=np.uint8)
        kind, dtype, channels = "label", "u8", 1
        extra = [f"num_classes {vol.num_classes}"]
    elif isinstance(vol, Volume):
        arr = np.ascontiguousarray(vol.data, dtype="<f4")
        kind, dtype, channels = "intensity", "f32", vol.channels
        extra = []
    else:
        raise TypeError(f"cannot write {type(vol).__name__}")
    payload = _payload_path(path)
    header = [
        f"format {_FORMAT}",
        f"kind {kind}",
        "dims " + " ".join(str(d) for d in arr.shape[:3]),
        f"channels {channels}",
        f"dtype {dtype}",
        "axis_order D H W C",
        "byte_order little",
        f"payload {payload.name}",
    ] + extra
    path.parent.mkdir(parents=True, exist_ok=True)
    payload.write_bytes(arr.tobytes())
    path.write_text("\n".join(header) + "\n")
    return path


def read_volume(path):
    """Read a volume written by :func:`write_volume`."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise VolumeIOError(f"cannot read volume header {path}: {exc}") from exc
    fields = {}
    for line in text.splitlines():
        if line.strip():
            key, _, val = line.partition(" ")
            fields[key] = val.strip()
    for key in ("format", "kind", "dims", "channels", "dtype", "payload"):
        if key not in fields:
            raise VolumeIOError(f"{path}: header missing field '{key}'")
    if fields["format"] != _FORMAT:
        raise VolumeIOError(f"{path}: unknown format '{fields['format']}'")
    try:
        dims = tuple(int(v) for v in fields["dims"].split())
        channels = int(fields["channels"])
    except ValueError as exc:
        raise VolumeIOError(f"{path}: malformed field 'dims' or 'channels'") from exc
    if len(dims) != 3 or min(dims) < 1 or channels < 1:
        raise VolumeIOError(f"{path}: invalid field 'dims' {fields['dims']!r} / 'channels' {channels}")
    dtype = {"f32": np.dtype("<f4"), "u8": np.dtype(np.uint8)}.get(fields["dtype"])
    if dtype is None:
        raise VolumeIOError(f"{path}: unsupported field 'dtype' {fields['dtype']!r}")

    payload = path.parent / fields["payload"]
    try:
        raw = payload.read_bytes()
    except OSError as exc:
        raise VolumeIOError(f"cannot read payload {payload}: {exc}") from exc
    expected = int(np.prod(dims)) * channels * dtype.itemsize
    if len(raw) != expected:
        raise VolumeIOError(f"{payload}: payload size {len(raw)} bytes does not match 'dims' (expected {expected})")
    arr = np.frombuffer(raw, dtype=dtype).copy()

    if fields["kind"] == "label":
        return LabelVolume(arr.reshape(dims), int(fields.get("num_classes", NUM_PHANTOM_CLASSES)))
    if fields["kind"] == "intensity":
        return Volume(arr.reshape(dims + (channels,)).astype(np.float32))
    raise VolumeIOError(f"{path}: unknown field 'kind' {fields['kind']!r}")


def payload_bytes(dims: Sequence[int], channels: int, dtype: str = "f32") -> int:
    return int(np.prod(dims)) * channels * (4 if dtype == "f32" else 1)
