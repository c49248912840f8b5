"""Loss terms of the guided objective and the schedules around them.

Per-sample losses are returned as vectors; the trainer averages them over
the mini-batch.  Weights ``w`` and ``s_w`` are plain arrays (constants).
"""

from __future__ import annotations

import logging

import numpy as np

from . import autodiff as ad
from .errors import ContractError

log = logging.getLogger(__name__)


def relative_difficulty(ce_b, ce_d):
    """w = ce_b / (ce_b + ce_d); 0.5 where both are zero."""
    ce_b = np.asarray(ce_b, dtype=np.float64)
    ce_d = np.asarray(ce_d, dtype=np.float64)
    den = ce_b + ce_d
    zero = den <= 0
    if np.any(zero):
        log.info("relative difficulty: %d sample(s) with zero CE under both models; w=0.5", int(zero.sum()))
    safe = np.where(zero, 1.0, den)
    return np.where(zero, 0.5, ce_b / safe)


def loss_main(w, logits_d, y):
    return ad.mul(ad.cross_entropy(logits_d, y), np.asarray(w, dtype=np.float64))


def pooled_l1(z, g):
    """Sum over channels of |GAP(z) - GAP(g)|, per sample."""
    diff = ad.sub(ad.global_avg_pool(z), ad.global_avg_pool(g))
    return ad.sum(ad.abs(diff), axis=-1)


def loss_guide_sim(s_w, z, g):
    return ad.mul(pooled_l1(z, g), np.asarray(s_w, dtype=np.float64))


def loss_guide_cls(w, net, g, y, params=None):
    return ad.mul(ad.cross_entropy(net.classify(g, params), y), np.asarray(w, dtype=np.float64))


def loss_guide(sim, cls, lambda_sim=0.1):
    return ad.add(ad.mul(sim, lambda_sim), cls)


def loss_bn(s_w, logits_bn, y_bn):
    return ad.mul(ad.cross_entropy(logits_bn, y_bn), np.asarray(s_w, dtype=np.float64))


def lambda_main(t, t2, total):
    """Linear ramp from 0 at ``t2`` to 1 at ``total``."""
    if t < t2:
        raise ContractError(f"lambda_main is defined from t2={t2} on, got t={t}")
    if total <= t2:
        return 1.0
    return float(min(max((t - t2) / (total - t2), 0.0), 1.0))


TIER_DBN, TIER_CAND, TIER_D = 0, 1, 2


class PairSampler:
    """Draws a same-label auxiliary sample for each input.

    Priority: D^BN (tier 0), then D^BN_cand (tier 1), then D (tier 2, excluding
    the input itself when the class has another member).  ``source`` trims the
    chain: ``"cand"`` starts at tier 1, ``"d"`` goes straight to tier 2.
    """

    def __init__(self, labels, cand_positions, num_classes, source="dbn"):
        self.labels = np.asarray(labels)
        self.source = source
        self.by_class = [np.flatnonzero(self.labels == c) for c in range(num_classes)]
        cand_positions = np.asarray(sorted(cand_positions), dtype=np.int64)
        self.cand_by_class = [cand_positions[self.labels[cand_positions] == c] for c in range(num_classes)]

    def sample(self, positions, dbn_positions, rng):
        """positions: dataset positions of the inputs.  Returns (aux positions, tiers)."""
        dbn_positions = np.asarray(dbn_positions, dtype=np.int64)
        dbn_by_class = {}
        out = np.empty(len(positions), dtype=np.int64)
        tiers = np.empty(len(positions), dtype=np.int64)
        for k, pos in enumerate(positions):
            y = int(self.labels[pos])
            if not len(self.by_class[y]):
                raise ContractError(f"no training sample has label {y}")
            pool = None
            tier = TIER_D
            if self.source == "dbn":
                if y not in dbn_by_class:
                    dbn_by_class[y] = dbn_positions[self.labels[dbn_positions] == y]
                if len(dbn_by_class[y]):
                    pool, tier = dbn_by_class[y], TIER_DBN
            if pool is None and self.source in ("dbn", "cand") and len(self.cand_by_class[y]):
                pool, tier = self.cand_by_class[y], TIER_CAND
            if pool is None:
                pool = self.by_class[y]
                if len(pool) > 1:
                    # uniform over the class minus the input itself
                    j = int(rng.integers(len(pool) - 1))
                    if j >= np.searchsorted(pool, pos):
                        j += 1
                    out[k] = pool[j]
                    tiers[k] = TIER_D
                    continue
            out[k] = pool[rng.integers(len(pool))]
            tiers[k] = tier
        return out, tiers
