"""Dense float64 tensors with a reverse-mode differentiation tape.

Operations are only recorded while a :class:`Tape` is active (``with Tape() as
tape:``) and at least one input requires a gradient.  Outside a tape every op
is a plain numpy computation, which is what evaluation uses.

Images and feature maps are laid out NHWC.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, InputError

_TAPES: list["Tape"] = []


def _active_tape():
    return _TAPES[-1] if _TAPES else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def tape(self):
        return self._tape

    def detach(self):
        return Tensor(self.data.copy())

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise InputError("division by a tensor is not supported; multiply by a constant")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    A tape may be differentiated once.  A second :meth:`backward` or
    :meth:`gradient` call raises :class:`ContractError`; re-run the forward
    pass under a fresh tape instead.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def watch(self, tensor):
        """Mark ``tensor`` as a differentiable leaf on this tape."""
        tensor.requires_grad = True
        tensor._tape = self
        return tensor

    def record(self, out, parents, backward):
        out.requires_grad = True
        out._tape = self
        self.nodes.append(_Node(out, parents, backward))
        return out

    def _run(self, output, capture=()):
        if self.consumed:
            raise ContractError("tape already differentiated; re-run the forward pass")
        if not isinstance(output, Tensor) or output.size != 1:
            shape = getattr(output, "shape", None)
            raise InputError(f"backward needs a scalar output, got shape {shape}")
        if output._tape is not self:
            raise ContractError("output was not recorded on this tape")
        self.consumed = True
        wanted = {id(t) for t in capture}
        captured = {}
        grads = {id(output): np.ones_like(output.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            if id(node.out) in wanted:
                captured[id(node.out)] = g
            pgrads = node.backward(g)
            for parent, pg in zip(node.parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        # whatever is left belongs to leaves
        captured.update({k: v for k, v in grads.items() if k in wanted})
        return grads, captured

    def backward(self, output, params=()):
        """Populate ``.grad`` on every leaf in ``params`` (zeros if unreached)."""
        grads, captured = self._run(output, capture=params)
        for p in params:
            g = captured.get(id(p))
            p.grad = g if g is not None else np.zeros_like(p.data)
        return [p.grad for p in params]

    def gradient(self, output, wrt):
        """Return d(output)/d(t) for each tensor in ``wrt`` (leaves or intermediates)."""
        _, captured = self._run(output, capture=wrt)
        return [captured.get(id(t), np.zeros_like(t.data)) for t in wrt]


def backward(tape, output, params=()):
    return tape.backward(output, params)


def _make(data, parents, backward):
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, parents, backward)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, name):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), back)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def abs(x):  # noqa: A001
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,))


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ConfigError(f"reshape: cannot reshape {old} into {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims=False):  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (x,), back)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def max(x, axis=-1, keepdims=False):  # noqa: A001
    """Max along one axis; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    axis = axis % x.ndim
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)
    shape = x.shape

    def back(g):
        gx = np.zeros(shape)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(idx, axis), gk, axis=axis)
        return (gx,)

    return _make(out if keepdims else out.squeeze(axis), (x,), back)


def global_avg_pool(x):
    """(N, H, W, C) -> (N, C); also accepts a single (H, W, C) map."""
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise ConfigError(f"global_avg_pool expects HWC or NHWC, got shape {x.shape}")
    return mean(x, axis=(-3, -2))


# ---------------------------------------------------------------- linear maps


def matmul(x, w):
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ConfigError(f"matmul: shapes {x.shape} and {w.shape} do not conform")
    xd, wd = x.data, w.data

    def back(g):
        gx = g @ wd.T
        x2 = xd.reshape(-1, xd.shape[-1])
        gw = x2.T @ g.reshape(-1, wd.shape[1])
        return gx, gw

    return _make(xd @ wd, (x, w), back)


def linear(x, w, b=None):
    out = matmul(x, w)
    return out if b is None else add(out, b)


def _conv_geometry(h, w, k, stride, padding):
    if padding == "same":
        pad = k // 2
    elif padding == "valid":
        pad = 0
    else:
        raise ConfigError(f"conv2d: unknown padding {padding!r}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    return pad, ho, wo


def conv2d(x, w, b=None, stride=1, padding="same"):
    """NHWC convolution (cross-correlation) with a (kh, kw, cin, cout) kernel."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ConfigError(f"conv2d: input {x.shape} and kernel {w.shape} do not conform")
    kh, kw, cin, cout = w.shape
    if kh != kw:
        raise ConfigError(f"conv2d: only square kernels are supported, got {kh}x{kw}")
    n, h, wd_, _ = x.shape
    pad, ho, wo = _conv_geometry(h, wd_, kh, stride, padding)
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{wd_}")
    if pad:
        xp = np.zeros((n, h + 2 * pad, wd_ + 2 * pad, cin))
        xp[:, pad : pad + h, pad : pad + wd_] = x.data
    else:
        xp = x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    wm = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wm).reshape(n, ho, wo, cout)
    xshape, hp, wp = x.shape, xp.shape[1], xp.shape[2]

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        if not x.requires_grad:
            return None, gw
        gcols = (g2 @ wm.T).reshape(n, ho, wo, kh, kw, cin)
        gxp = np.zeros((n, hp, wp, cin))
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, :, i, j]
        gx = gxp[:, pad : pad + xshape[1], pad : pad + xshape[2]] if pad else gxp
        return gx, gw

    out = _make(out, (x, w), back)
    return out if b is None else add(out, b)


# ---------------------------------------------------------------- softmax family


def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)
    return _make(out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def pick(x, labels):
    """Row-wise gather: (N, C), (N,) -> (N,).  A 1-D ``x`` takes a scalar label."""
    x = as_tensor(x)
    if x.ndim == 1:
        lab = int(labels)
        shape = x.shape

        def back1(g):
            gx = np.zeros(shape)
            gx[lab] = g
            return (gx,)

        return _make(x.data[lab], (x,), back1)
    labels = np.asarray(labels)
    rows = np.arange(x.shape[0])
    shape = x.shape

    def back(g):
        gx = np.zeros(shape)
        gx[rows, labels] = g
        return (gx,)

    return _make(x.data[rows, labels], (x,), back)


def _check_labels(logits, labels):
    c = logits.shape[-1]
    if c < 2:
        raise InputError(f"need at least 2 classes, got logits of shape {logits.shape}")
    lab = np.asarray(labels)
    if logits.ndim == 1:
        if lab.ndim != 0:
            raise InputError("a single logit vector takes a scalar label")
    elif lab.shape != logits.shape[:1]:
        raise InputError(f"labels shape {lab.shape} does not match logits {logits.shape}")
    if np.any(lab < 0) or np.any(lab >= c):
        raise InputError(f"label out of range [0, {c}): {lab}")


def cross_entropy(logits, labels):
    """-log softmax(logits)[label]; per-sample vector for batched logits."""
    logits = as_tensor(logits)
    _check_labels(logits, labels)
    return mul(pick(log_softmax(logits), labels), -1.0)


def gce_loss(logits, labels, q=0.7):
    """Generalized cross entropy (1 - p_y**q) / q."""
    if not q > 0:
        raise ConfigError(f"GCE exponent q must be positive, got {q}")
    logits = as_tensor(logits)
    _check_labels(logits, labels)
    pq = exp(mul(pick(log_softmax(logits), labels), q))
    return mul(sub(1.0, pq), 1.0 / q)


def numeric_cross_entropy(logits, labels):
    """Plain-numpy per-sample CE, used outside any tape."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    return lse - shifted[np.arange(len(labels)), labels]


def numeric_softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
