"""Spatial intrinsic-feature guidance for a bias-contrastive pair (z, z_bn).

All map computations are numpy and treated as constants by the loss: only
``guide`` is differentiable, and only with respect to ``z``.  Every function
accepts a single map (h, w[, c]) or a leading batch axis.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, InputError

EPS = 1e-12


@dataclass
class GuidanceMaps:
    z: np.ndarray
    z_bn: np.ndarray
    e: np.ndarray
    e_bn: np.ndarray
    pairing: np.ndarray
    c_map: np.ndarray
    r_map: np.ndarray
    ie: np.ndarray
    g: np.ndarray


def _batched(a, core_ndim):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == core_ndim:
        return a[None], True
    if a.ndim == core_ndim + 1:
        return a, False
    raise InputError(f"expected {core_ndim}-D map (optionally batched), got shape {a.shape}")


def _unbatch(a, single):
    return a[0] if single else a


def gradcam_alpha(net, z, labels):
    """Spatial mean of d logit_y / d z over positions, per channel: (B, c)."""
    zt = ad.Tensor(np.asarray(z))
    params = {k: ad.Tensor(v.copy()) for k, v in net.params.items()}
    with ad.Tape() as tape:
        tape.watch(zt)
        logits = net.classify(zt, params)
        target = ad.sum(ad.pick(logits, labels))
        (gz,) = tape.gradient(target, [zt])
    return gz.mean(axis=(1, 2))


def normalize_map(raw):
    """Per-map max normalisation; maps whose max is <= EPS become all zeros."""
    raw, single = _batched(raw, 2)
    top = raw.reshape(len(raw), -1).max(axis=1)
    out = np.zeros_like(raw)
    ok = top > EPS
    out[ok] = raw[ok] / top[ok, None, None]
    return _unbatch(out, single)


def gradcam(net, z, y):
    """Grad-CAM maps of ``z`` for labels ``y``, max-normalised to [0, 1].

    ``z`` must be a tensor recorded on a live tape (the embedding of the
    current step).  The map itself is returned as a plain array.
    """
    if not isinstance(z, ad.Tensor) or z.tape is None or z.tape.consumed:
        raise ContractError("gradcam needs a feature tensor attached to a live tape")
    zd, single = _batched(z.data, 3)
    labels = np.atleast_1d(np.asarray(y))
    alpha = gradcam_alpha(net, zd, labels)
    raw = np.maximum(np.einsum("bhwc,bc->bhw", zd, alpha), 0.0)
    return _unbatch(normalize_map(raw), single)


def pair_products(z, z_bn):
    """D[b, n, i] = z[b, n] . z_bn[b, i] over flattened positions."""
    b, h, w, c = z.shape
    return np.einsum("bnc,bic->bni", z.reshape(b, h * w, c), z_bn.reshape(b, h * w, c))


def common_score(z, z_bn):
    """Returns (c_map, pairing).  ``pairing`` holds flat indices into z_bn's positions."""
    z, single = _batched(z, 3)
    z_bn, _ = _batched(z_bn, 3)
    if z.shape != z_bn.shape:
        raise InputError(f"common_score: z {z.shape} and z_bn {z_bn.shape} differ")
    b, h, w, _ = z.shape
    d = pair_products(z, z_bn)
    best = d.argmax(axis=2)
    num = np.take_along_axis(d, best[..., None], axis=2)[..., 0]
    top = d.reshape(b, -1).max(axis=1)
    ok = top > EPS
    c = np.zeros((b, h * w))
    c[ok] = num[ok] / top[ok, None]
    pairing = np.where(ok[:, None], best, np.arange(h * w)[None])
    return _unbatch(c.reshape(b, h, w), single), _unbatch(pairing.reshape(b, h, w), single)


def relative_exploitation(e, e_bn, pairing, tau=2.0):
    if not tau > 0:
        raise InputError(f"tau must be positive, got {tau}")
    e, single = _batched(e, 2)
    e_bn, _ = _batched(e_bn, 2)
    pairing = np.asarray(pairing)
    if single:
        pairing = pairing[None]
    b = len(e)
    matched = np.take_along_axis(e_bn.reshape(b, -1), pairing.reshape(b, -1), axis=1).reshape(e.shape)
    den = matched + e
    r = np.zeros_like(e)
    ok = den > EPS
    r[ok] = (2.0 * matched[ok] / den[ok]) ** tau
    return _unbatch(r, single)


def ie_weight(c_map, r_map):
    c_map, r_map = np.asarray(c_map), np.asarray(r_map)
    if c_map.shape != r_map.shape:
        raise InputError(f"ie_weight: c {c_map.shape} and r {r_map.shape} differ")
    return np.maximum(c_map * r_map, 1.0)


def guide(z, ie):
    """g = z * ie broadcast over channels; differentiable in z, ie is a constant."""
    z = ad.as_tensor(z)
    ie = np.asarray(ie, dtype=np.float64)
    if ie.shape != z.shape[:-1]:
        raise InputError(f"guide: ie {ie.shape} does not match z {z.shape}")
    return ad.mul(z, ie[..., None])


def compute(net, z, z_bn, y, tau=2.0):
    """Full chain for a batch of pairs; ``z`` and ``z_bn`` are live tape tensors."""
    e = gradcam(net, z, y)
    e_bn = gradcam(net, z_bn, y)
    c_map, pairing = common_score(z.data, z_bn.data)
    r_map = relative_exploitation(e, e_bn, pairing, tau)
    ie = ie_weight(c_map, r_map)
    g = guide(z, ie)
    return g, GuidanceMaps(z.data, z_bn.data, e, e_bn, pairing, c_map, r_map, ie, g.data)


# ---------------------------------------------------------------- map dump


def _write_pgm(path, m, scale=None):
    m = np.asarray(m, dtype=np.float64)
    top = scale if scale is not None else (m.max() if m.max() > 0 else 1.0)
    px = np.clip(np.round(255.0 * m / top), 0, 255).astype(np.uint8)
    h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(px.tobytes())


def dump_maps(maps, out_dir, prefix="pair"):
    """Write e, e_bn, c, r, ie of every pair in ``maps`` as PGM plus one CSV."""
    os.makedirs(out_dir, exist_ok=True)
    e, single = _batched(maps.e, 2)
    fields = {"e": e, "e_bn": _batched(maps.e_bn, 2)[0], "c": _batched(maps.c_map, 2)[0],
              "r": _batched(maps.r_map, 2)[0], "ie": _batched(maps.ie, 2)[0]}
    rows = ["pair,map,row,col,value"]
    written = []
    for k in range(len(e)):
        for name, arr in fields.items():
            path = os.path.join(out_dir, f"{prefix}{k:03d}_{name}.pgm")
            _write_pgm(path, arr[k])
            written.append(path)
            for (i, j), v in np.ndenumerate(arr[k]):
                rows.append(f"{k},{name},{i},{j},{v:.10g}")
    csv_path = os.path.join(out_dir, f"{prefix}_maps.csv")
    with open(csv_path, "w") as fh:
        fh.write("\n".join(rows) + "\n")
    written.append(csv_path)
    return written
