"""Small NHWC convolutional classifier split into an embedding and a head.

``embed`` is a stack of conv+relu blocks; ``classify`` is global average
pooling followed by a linear layer, so ``forward(x) == classify(embed(x))``.
Parameters live in one flat float64 vector; named entries are views into it.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, FormatError, InputError

CKPT_MAGIC = b"BGCONVN1"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    in_hw: int = 32
    in_ch: int = 3
    channels: tuple = (16, 32, 32)
    kernel: int = 3
    stride: int = 2
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    def embedding_shape(self):
        hw = self.in_hw
        pad = self.kernel // 2
        for _ in self.channels:
            hw = (hw + 2 * pad - self.kernel) // self.stride + 1
        return (hw, hw, self.channels[-1])

    def validate(self):
        if not self.channels:
            raise ConfigError("architecture needs at least one conv block")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.kernel < 1 or self.stride < 1 or self.in_hw < 1 or self.in_ch < 1:
            raise ConfigError(f"invalid architecture {self}")
        h, w, _ = self.embedding_shape()
        if h < 2 or w < 2:
            raise ConfigError(
                f"embedding is {h}x{w}; guidance needs at least 2x2 spatial positions"
            )

    def param_layout(self):
        """Ordered (name, shape) pairs; this order is the checkpoint order."""
        layout = []
        cin = self.in_ch
        for i, cout in enumerate(self.channels):
            layout.append((f"conv{i}.weight", (self.kernel, self.kernel, cin, cout)))
            layout.append((f"conv{i}.bias", (cout,)))
            cin = cout
        layout.append(("fc.weight", (cin, self.num_classes)))
        layout.append(("fc.bias", (self.num_classes,)))
        return layout


def _fan_in(name, shape):
    if name.endswith("bias"):
        return None
    return int(np.prod(shape[:-1]))


@dataclass
class ConvNet:
    arch: ArchConfig
    flat: np.ndarray
    _views: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.arch.validate()
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        expect = sum(int(np.prod(s)) for _, s in self.arch.param_layout())
        if self.flat.shape != (expect,):
            raise ConfigError(f"parameter vector has {self.flat.size} entries, arch needs {expect}")
        self._views = {}
        off = 0
        for name, shape in self.arch.param_layout():
            n = int(np.prod(shape))
            self._views[name] = self.flat[off : off + n].reshape(shape)
            off += n

    @property
    def params(self):
        return self._views

    @property
    def num_classes(self):
        return self.arch.num_classes

    def copy(self):
        return ConvNet(self.arch, self.flat.copy())

    def __deepcopy__(self, memo):
        # a plain deepcopy would detach the named views from the flat vector
        return self.copy()

    # -- differentiable parameter handles --------------------------------

    def param_tensors(self, tape=None):
        """Fresh leaf tensors over the current parameters (watched by ``tape``)."""
        out = {}
        for name, view in self._views.items():
            t = ad.Tensor(view)
            if tape is not None:
                tape.watch(t)
            out[name] = t
        return out

    def flatten_grads(self, tensors):
        return np.concatenate([tensors[name].grad.ravel() for name, _ in self.arch.param_layout()])

    def sgd_step(self, tensors, lr):
        self.flat -= lr * self.flatten_grads(tensors)

    # -- forward ----------------------------------------------------------

    def _p(self, params, name):
        return params[name] if params is not None else self._views[name]

    def embed(self, x, params=None):
        x = ad.as_tensor(x)
        a = self.arch
        if x.ndim == 3:
            x = ad.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1:] != (a.in_hw, a.in_hw, a.in_ch):
            raise InputError(f"expected images of shape (N, {a.in_hw}, {a.in_hw}, {a.in_ch}), got {x.shape}")
        # inputs in [0, 1] are centred to [-1, 1]
        h = ad.mul(ad.sub(x, 0.5), 2.0)
        for i in range(len(a.channels)):
            h = ad.conv2d(h, self._p(params, f"conv{i}.weight"), self._p(params, f"conv{i}.bias"),
                          stride=a.stride, padding="same")
            h = ad.relu(h)
        return h

    def classify(self, z, params=None):
        z = ad.as_tensor(z)
        emb = self.arch.embedding_shape()
        if z.shape[-3:] != emb or z.ndim not in (3, 4):
            raise InputError(f"feature map shape {z.shape} does not match embedding {emb}")
        pooled = ad.global_avg_pool(z)
        return ad.linear(pooled, self._p(params, "fc.weight"), self._p(params, "fc.bias"))

    def forward(self, x, params=None):
        return self.classify(self.embed(x, params), params)

    __call__ = forward

    def logits(self, images, batch_size=256):
        """Tape-free batched logits as a numpy array."""
        out = []
        for i in range(0, len(images), batch_size):
            out.append(self.forward(images[i : i + batch_size]).data)
        return np.concatenate(out) if out else np.zeros((0, self.num_classes))


def init(seed, arch=None):
    arch = arch or ArchConfig()
    arch.validate()
    rng = np.random.default_rng(seed)
    chunks = []
    fan = None
    for name, shape in arch.param_layout():
        f = _fan_in(name, shape)
        fan = f if f is not None else fan
        bound = 1.0 / np.sqrt(fan)
        chunks.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
    return ConvNet(arch, np.concatenate(chunks))


@dataclass
class ModelEnsemble:
    members: list

    def __post_init__(self):
        if len(self.members) % 2 == 0:
            raise ConfigError(f"ensemble size must be odd for majority voting, got {len(self.members)}")

    @property
    def count(self):
        return len(self.members)


# ---------------------------------------------------------------- checkpoints


def _arch_header(arch):
    return json.dumps(asdict(arch), sort_keys=True).encode()


def save_checkpoint(net, path):
    desc = _arch_header(net.arch)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(desc)))
        fh.write(desc)
        fh.write(struct.pack("<Q", net.flat.size))
        fh.write(net.flat.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 16:
        raise FormatError("checkpoint truncated inside header", offset=len(buf))
    if buf[:8] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:8]!r}", offset=0)
    version, dlen = struct.unpack_from("<II", buf, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"checkpoint version {version} unsupported (expected {CKPT_VERSION})", offset=8)
    off = 16
    if len(buf) < off + dlen + 8:
        raise FormatError("checkpoint truncated inside arch descriptor", offset=len(buf))
    try:
        arch = ArchConfig(**json.loads(buf[off : off + dlen]))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"unreadable arch descriptor: {exc}", offset=off) from None
    off += dlen
    (count,) = struct.unpack_from("<Q", buf, off)
    off += 8
    if len(buf) != off + 8 * count:
        raise FormatError(f"expected {count} parameters, file holds {(len(buf) - off) // 8}", offset=off)
    flat = np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(np.float64)
    return ConvNet(arch, flat)
