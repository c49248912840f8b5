"""Procedural biased image datasets: shape defines the class, background colour is the bias.

Bias-aligned (BA) training images get their class's background colour;
bias-conflicting (BC) images get a colour drawn uniformly from the other
classes.  A small fraction of images in either group shows only a faint tint of
its colour over neutral grey; such images are what keeps the biased models'
candidate set from being purely bias-conflicting.  The alignment flag is
ground truth for evaluation only.  Training code receives a
:class:`TrainView`, which has no such field.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError

DATA_MAGIC = b"BGDATA01"
DATA_VERSION = 1
SEVERITY_GRID = (0.005, 0.01, 0.02, 0.05)

# Background colours, one per class.  Object colour is shared by all classes.
PALETTE = np.array(
    [
        [0.80, 0.25, 0.20],
        [0.20, 0.50, 0.80],
        [0.25, 0.70, 0.25],
        [0.80, 0.70, 0.15],
        [0.65, 0.25, 0.70],
        [0.15, 0.70, 0.70],
    ]
)
FOREGROUND = np.array([0.95, 0.95, 0.95])
NEUTRAL = np.array([0.5, 0.5, 0.5])
SHAPES_2 = ("disk", "cross")
SHAPES_6 = ("disk", "cross", "square", "triangle", "ring", "saltire")


@dataclass(frozen=True)
class DataConfig:
    classes: int = 2
    per_class_count: int = 2000
    severity: float = 0.01
    test_per_class: int = 500
    image_size: int = 32
    noise: float = 0.05
    max_shift: int = 3
    color_jitter: float = 0.05
    faint_fraction: float = 0.05
    faint_strength: tuple = (0.05, 0.25)

    def __post_init__(self):
        object.__setattr__(self, "faint_strength", tuple(float(v) for v in self.faint_strength))

    def validate(self):
        if not 0 < self.severity <= 0.5:
            raise ConfigError(f"severity must lie in (0, 0.5], got {self.severity}")
        if self.classes not in (2, 6):
            raise ConfigError(f"classes must be 2 or 6, got {self.classes}")
        if self.per_class_count < 100:
            raise ConfigError(f"per_class_count must be >= 100, got {self.per_class_count}")
        if self.test_per_class < 2:
            raise ConfigError("test_per_class must be >= 2")
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16")
        lo, hi = self.faint_strength
        if not 0 <= self.faint_fraction < 1 or not 0 <= lo <= hi <= 1:
            raise ConfigError(f"faint_fraction must lie in [0, 1) and 0 <= faint_strength <= 1, got "
                              f"{self.faint_fraction}, {self.faint_strength}")

    def bc_per_class(self):
        return int(round(self.severity * self.per_class_count))


@dataclass
class Split:
    ids: np.ndarray
    images: np.ndarray  # (N, H, W, 3)
    labels: np.ndarray
    bias_aligned: np.ndarray  # evaluation only

    def __len__(self):
        return len(self.ids)

    def view(self):
        return TrainView(self.ids, self.images, self.labels)


@dataclass(frozen=True)
class TrainView:
    """A split stripped of bias flags; the only form the training path accepts."""

    ids: np.ndarray
    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.ids)

    def index_of(self):
        return {int(i): k for k, i in enumerate(self.ids)}


@dataclass
class BiasedDataset:
    config: DataConfig
    seed: int
    train: Split
    test: Split
    _digest: str = field(default="", repr=False)

    @property
    def classes(self):
        return self.config.classes

    @property
    def severity(self):
        return self.config.severity

    def digest(self):
        if not self._digest:
            h = hashlib.sha256()
            for split in (self.train, self.test):
                for arr in (split.ids, split.labels, split.bias_aligned, split.images):
                    h.update(np.ascontiguousarray(arr).tobytes())
            self._digest = h.hexdigest()
        return self._digest


def _shape_mask(name, yy, xx, cy, cx):
    dy, dx = yy - cy, xx - cx
    if name == "disk":
        return dy**2 + dx**2 <= 7.0**2
    if name == "cross":
        return ((np.abs(dy) <= 2.5) & (np.abs(dx) <= 8.5)) | ((np.abs(dx) <= 2.5) & (np.abs(dy) <= 8.5))
    if name == "square":
        return (np.abs(dy) <= 6.0) & (np.abs(dx) <= 6.0)
    if name == "triangle":
        return (dy <= 6.0) & (dy >= -7.0) & (np.abs(dx) <= (dy + 7.0) * 0.6)
    if name == "ring":
        r2 = dy**2 + dx**2
        return (r2 <= 8.0**2) & (r2 >= 4.5**2)
    if name == "saltire":
        u, v = (dy + dx) / np.sqrt(2), (dy - dx) / np.sqrt(2)
        return ((np.abs(u) <= 2.2) & (np.abs(v) <= 8.5)) | ((np.abs(v) <= 2.2) & (np.abs(u) <= 8.5))
    raise ConfigError(f"unknown shape {name!r}")


def render(shape, background, shift, cfg, noise):
    """One HWC image in [0, 1]."""
    s = cfg.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    c = (s - 1) / 2.0
    mask = _shape_mask(shape, yy, xx, c + shift[0], c + shift[1])
    img = np.where(mask[..., None], FOREGROUND, background)
    return np.clip(img + noise, 0.0, 1.0)


def _draw_split(rng, cfg, n_per_class, n_bc, id_start, bc_positions="random"):
    shapes = SHAPES_2 if cfg.classes == 2 else SHAPES_6
    s = cfg.image_size
    total = n_per_class * cfg.classes
    images = np.empty((total, s, s, 3))
    labels = np.empty(total, dtype=np.int64)
    aligned = np.ones(total, dtype=bool)
    k = 0
    for y in range(cfg.classes):
        if bc_positions == "random":
            bc = set(rng.choice(n_per_class, size=n_bc, replace=False).tolist())
        else:
            bc = set(range(n_per_class - n_bc, n_per_class))
        others = [c for c in range(cfg.classes) if c != y]
        for j in range(n_per_class):
            is_bc = j in bc
            colour_class = others[rng.integers(len(others))] if is_bc else y
            # a few images only carry a faint tint of their colour over neutral grey
            strength = 1.0
            if rng.random() < cfg.faint_fraction:
                strength = rng.uniform(*cfg.faint_strength)
            base = strength * PALETTE[colour_class] + (1.0 - strength) * NEUTRAL
            background = base + rng.normal(0.0, cfg.color_jitter, size=3)
            shift = rng.integers(-cfg.max_shift, cfg.max_shift + 1, size=2)
            noise = rng.normal(0.0, cfg.noise, size=(s, s, 3))
            images[k] = render(shapes[y], background, shift, cfg, noise)
            labels[k] = y
            aligned[k] = not is_bc
            k += 1
    ids = np.arange(id_start, id_start + total, dtype=np.int64)
    return Split(ids, images, labels, aligned)


def generate(cfg=None, seed=0):
    cfg = cfg or DataConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    train = _draw_split(rng, cfg, cfg.per_class_count, cfg.bc_per_class(), 0)
    test = _draw_split(
        rng, cfg, cfg.test_per_class, cfg.test_per_class // 2, len(train), bc_positions="tail"
    )
    return BiasedDataset(cfg, int(seed), train, test)


# ---------------------------------------------------------------- file format
#
# header: magic[8] | version u32 | classes u32 | severity f64 | per_class u32 |
#         test_per_class u32 | n_train u32 | n_test u32 | seed u64 | size u32 |
#         noise f64 | max_shift u32 | color_jitter f64 | faint_fraction f64 |
#         faint_lo f64 | faint_hi f64
# record: id u64 | label u32 | aligned u8 | pixels f64[size*size*3]
# all little-endian; train records precede test records.

_HEADER = struct.Struct("<8sIIdIIIIQIdIdddd")
_RECORD_HEAD = struct.Struct("<QIB")


def export(dataset, path):
    cfg = dataset.config
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                DATA_MAGIC, DATA_VERSION, cfg.classes, cfg.severity, cfg.per_class_count,
                cfg.test_per_class, len(dataset.train), len(dataset.test), dataset.seed,
                cfg.image_size, cfg.noise, cfg.max_shift, cfg.color_jitter,
                cfg.faint_fraction, *cfg.faint_strength,
            )
        )
        for split in (dataset.train, dataset.test):
            for i in range(len(split)):
                fh.write(_RECORD_HEAD.pack(int(split.ids[i]), int(split.labels[i]), int(split.bias_aligned[i])))
                fh.write(split.images[i].astype("<f8").tobytes())


def load(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEADER.size:
        raise FormatError("dataset file truncated inside header", offset=len(buf))
    (magic, version, classes, severity, per_class, test_per_class, n_train, n_test, seed,
     size, noise, max_shift, jitter, faint, faint_lo, faint_hi) = _HEADER.unpack_from(buf, 0)
    if magic != DATA_MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}", offset=0)
    if version != DATA_VERSION:
        raise FormatError(
            f"dataset file version {version} does not match reader version {DATA_VERSION}", offset=8
        )
    cfg = DataConfig(classes, per_class, severity, test_per_class, size, noise, max_shift, jitter,
                     faint, (faint_lo, faint_hi))
    npix = size * size * 3
    rec = _RECORD_HEAD.size + 8 * npix
    expect = _HEADER.size + rec * (n_train + n_test)
    if len(buf) != expect:
        bad = min(len(buf), expect)
        raise FormatError(f"dataset file holds {len(buf)} bytes, header implies {expect}", offset=bad)
    off = _HEADER.size

    def read(n):
        nonlocal off
        ids = np.empty(n, dtype=np.int64)
        labels = np.empty(n, dtype=np.int64)
        aligned = np.empty(n, dtype=bool)
        images = np.empty((n, size, size, 3))
        for i in range(n):
            ids[i], labels[i], flag = _RECORD_HEAD.unpack_from(buf, off)
            if labels[i] >= classes or flag > 1:
                raise FormatError(f"corrupt record {i}: label {labels[i]}, flag {flag}", offset=off)
            aligned[i] = bool(flag)
            images[i] = np.frombuffer(buf, dtype="<f8", count=npix, offset=off + _RECORD_HEAD.size).reshape(size, size, 3)
            off += rec
        return Split(ids, images, labels, aligned)

    train = read(n_train)
    test = read(n_test)
    return BiasedDataset(cfg, int(seed), train, test)


class BatchSampler:
    """Epoch-wise shuffled mini-batches of positions into a split."""

    def __init__(self, n, batch_size, rng):
        if n < 1 or batch_size < 1:
            raise ConfigError(f"cannot sample batches of {batch_size} from {n} samples")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._perm = np.empty(0, dtype=np.int64)
        self._cursor = 0

    def next(self):
        if self._cursor + self.batch_size > len(self._perm):
            self._perm = self.rng.permutation(self.n)
            self._cursor = 0
        out = self._perm[self._cursor : self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return out

    def state(self):
        return self._perm.copy(), self._cursor

    def set_state(self, state):
        self._perm, self._cursor = state[0].copy(), state[1]


def random_flip(images, rng):
    """Horizontal flip of a random half (in expectation) of an NHWC batch."""
    flip = rng.random(len(images)) < 0.5
    out = images.copy()
    out[flip] = out[flip, :, ::-1]
    return out
