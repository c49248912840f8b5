"""Bias-negative (BN) score bookkeeping for the candidate set.

Each candidate keeps an EMA ``l`` of the biased model's CE loss, a reference
loss ``l_ref`` captured at its first appearance at or after ``t1``, and an EMA
``s`` of the gap ``l - l_ref``.  Candidates with ``s > 0`` form the dynamic
set D^BN.

Per-entry functions (``update_loss_ema`` and friends) are the reference
semantics; :class:`BnState` applies the same rules vectorised over a batch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError

log = logging.getLogger(__name__)

NORM_EPS = 1e-12


@dataclass(frozen=True)
class TrackerEntry:
    sample_id: int
    label: int
    l: float = math.nan  # noqa: E741
    l_ref: float = math.nan
    s: float = 0.0

    @property
    def observed(self):
        return not math.isnan(self.l)

    @property
    def has_reference(self):
        return not math.isnan(self.l_ref)


def update_loss_ema(entry, ce, alpha_l=0.1):
    if not (math.isfinite(ce) and ce >= 0):
        raise ContractError(f"CE of sample {entry.sample_id} is {ce}; expected finite and >= 0")
    if not entry.observed:
        return replace(entry, l=float(ce))
    return replace(entry, l=alpha_l * ce + (1.0 - alpha_l) * entry.l)


def set_reference(entry, step, t1):
    if step < t1:
        raise ContractError(f"reference loss requested at step {step} < t1={t1}")
    if entry.has_reference:
        return entry
    return replace(entry, l_ref=entry.l)


def update_bn_score(entry, alpha_s=0.9):
    if not entry.has_reference:
        raise ContractError(f"sample {entry.sample_id} has no reference loss")
    return replace(entry, s=alpha_s * (entry.l - entry.l_ref) + (1.0 - alpha_s) * entry.s)


def dbn_from_scores(scores):
    """Keys with strictly positive score."""
    return {k for k, v in scores.items() if v > 0}


def class_normalized_weights(scores, labels):
    """clip(s, 0) divided by the per-class maximum of clip(s, 0); 0 when that max <= eps."""
    s = np.maximum(np.asarray(scores, dtype=np.float64), 0.0)
    labels = np.asarray(labels)
    out = np.zeros_like(s)
    for c in np.unique(labels):
        m = labels == c
        top = s[m].max()
        if top > NORM_EPS:
            out[m] = s[m] / top
    return out


class BnState:
    """Vectorised tracker state over the candidate ids (fixed at construction)."""

    def __init__(self, ids, labels, alpha_l=0.1, alpha_s=0.9, t1=0):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.alpha_l = float(alpha_l)
        self.alpha_s = float(alpha_s)
        self.t1 = int(t1)
        n = len(self.ids)
        self.l = np.full(n, np.nan)
        self.l_ref = np.full(n, np.nan)
        self.s = np.zeros(n)
        self._pos = {int(i): k for k, i in enumerate(self.ids)}
        self.incidents = []

    def __len__(self):
        return len(self.ids)

    def __contains__(self, sample_id):
        return int(sample_id) in self._pos

    def positions(self, sample_ids):
        """Tracker positions of ``sample_ids``; -1 for ids outside the candidate set."""
        return np.array([self._pos.get(int(i), -1) for i in sample_ids], dtype=np.int64)

    def entry(self, sample_id):
        k = self._pos[int(sample_id)]
        return TrackerEntry(int(self.ids[k]), int(self.labels[k]), float(self.l[k]), float(self.l_ref[k]), float(self.s[k]))

    def observe(self, sample_ids, ce, step):
        """Apply one iteration's updates for the batch members that are candidates.

        Order per sample: loss EMA, then reference capture (first appearance at
        or after t1), then BN score.  A sample appearing twice in one batch is
        updated once per appearance, in batch order.
        """
        pos = self.positions(sample_ids)
        ce = np.asarray(ce, dtype=np.float64)
        for k, c, sid in zip(pos, ce, sample_ids):
            if k < 0:
                continue
            if not (np.isfinite(c) and c >= 0):
                self.incidents.append((int(step), int(sid), float(c)))
                log.warning("step %d: non-finite CE %r for sample %d; skipped", step, c, sid)
                continue
            if np.isnan(self.l[k]):
                self.l[k] = c
            else:
                self.l[k] = self.alpha_l * c + (1.0 - self.alpha_l) * self.l[k]
            if step >= self.t1:
                if np.isnan(self.l_ref[k]):
                    self.l_ref[k] = self.l[k]
                self.s[k] = self.alpha_s * (self.l[k] - self.l_ref[k]) + (1.0 - self.alpha_s) * self.s[k]

    def scores(self):
        return dict(zip(self.ids.tolist(), self.s.tolist()))

    def current_dbn(self):
        return self.ids[self.s > 0]

    def dbn_mask(self):
        return self.s > 0

    def loss_weights(self):
        return class_normalized_weights(self.s, self.labels)

    def loss_weight(self, sample_id):
        k = self._pos.get(int(sample_id))
        if k is None:
            return 0.0
        return float(self.loss_weights()[k])

    def snapshot(self):
        return {"l": self.l.copy(), "l_ref": self.l_ref.copy(), "s": self.s.copy()}

    def restore(self, snap):
        self.l, self.l_ref, self.s = snap["l"].copy(), snap["l_ref"].copy(), snap["s"].copy()
