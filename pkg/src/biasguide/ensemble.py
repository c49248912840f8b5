"""Biased-model ensemble and the two partitions it produces.

Members are trained briefly with GCE so they latch onto the easy bias.  The
bias-amplified set D^A holds samples that a strict majority of members predict
with ground-truth probability >= threshold.  The candidate set D^BN_cand holds
samples that a strict majority misclassify.  Neither rule reads bias flags:
the functions only accept a :class:`~biasguide.data.TrainView`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import models, optim
from .data import BatchSampler, TrainView, random_flip
from .errors import ConfigError, ContractError, FormatError

log = logging.getLogger(__name__)


def _require_view(d):
    if not isinstance(d, TrainView):
        raise ContractError(f"expected a bias-stripped TrainView, got {type(d).__name__}")


def member_seed(seed, k):
    return int(np.random.SeedSequence([int(seed), 101, k]).generate_state(1)[0])


def train_gce(net, d, iters, q, lr, batch_size, rng, flip=True, optimizer="sgd"):
    opt = optim.make(optimizer, lr)
    sampler = BatchSampler(len(d), batch_size, rng)
    for _ in range(iters):
        idx = sampler.next()
        x = random_flip(d.images[idx], rng) if flip else d.images[idx]
        with ad.Tape() as tape:
            p = net.param_tensors(tape)
            loss = ad.mean(ad.gce_loss(net.forward(x, p), d.labels[idx], q))
            tape.backward(loss, list(p.values()))
        opt.step(net, p)
    return net


def pretrain_biased(d, count=5, iters=300, q=0.7, seed=0, arch=None, lr=1e-2, batch_size=64, flip=True,
                    optimizer="sgd"):
    _require_view(d)
    if count < 1 or count % 2 == 0:
        raise ConfigError(f"ensemble count must be a positive odd number, got {count}")
    if iters < 1:
        raise ConfigError(f"pretraining iterations must be >= 1, got {iters}")
    if not q > 0:
        raise ConfigError(f"GCE q must be positive, got {q}")
    members = []
    for k in range(count):
        s = member_seed(seed, k)
        net = models.init(s, arch)
        train_gce(net, d, iters, q, lr, batch_size, np.random.default_rng(s), flip, optimizer)
        members.append(net)
    return models.ModelEnsemble(members)


def member_probabilities(ensemble, d):
    """(count, N) softmax probability of each sample's label under each member."""
    _require_view(d)
    rows = np.arange(len(d))
    out = []
    for net in ensemble.members:
        p = ad.numeric_softmax(net.logits(d.images))
        out.append(p[rows, d.labels])
    return np.stack(out)


def member_predictions(ensemble, d):
    """(count, N) argmax predictions; ties go to the lowest class index."""
    _require_view(d)
    return np.stack([np.argmax(net.logits(d.images), axis=1) for net in ensemble.members])


def amplified_mask(gt_probs, threshold=0.99):
    """gt_probs: (count, N).  Strict majority with p_y >= threshold."""
    if not 0.5 < threshold <= 1.0:
        raise ConfigError(f"amplified threshold must lie in (0.5, 1], got {threshold}")
    gt_probs = np.asarray(gt_probs)
    votes = (gt_probs >= threshold).sum(axis=0)
    return votes * 2 > gt_probs.shape[0]


def candidate_mask(preds, labels):
    """preds: (count, N).  Strict majority misclassifies."""
    preds = np.asarray(preds)
    wrong = (preds != np.asarray(labels)[None]).sum(axis=0)
    return wrong * 2 > preds.shape[0]


def build_amplified(ensemble, d, threshold=0.99):
    mask = amplified_mask(member_probabilities(ensemble, d), threshold)
    ids = d.ids[mask]
    if len(ids) == 0:
        log.warning("bias-amplified set is empty; the biased model will receive no updates")
    return set(ids.tolist())


def build_candidates(ensemble, d):
    mask = candidate_mask(member_predictions(ensemble, d), d.labels)
    ids = d.ids[mask]
    if len(ids) == 0:
        raise ContractError("candidate set is empty: no sample is misclassified by a majority of biased models")
    return set(ids.tolist())


@dataclass
class PartitionSet:
    d_a: set
    d_bn_cand: set
    source: str = ""

    def validate(self, d):
        all_ids = set(d.ids.tolist())
        if not (self.d_a <= all_ids and self.d_bn_cand <= all_ids):
            raise ContractError("partition contains ids not in the dataset")


def build_partitions(ensemble, d, threshold=0.99, source=""):
    return PartitionSet(build_amplified(ensemble, d, threshold), build_candidates(ensemble, d), source)


def write_partitions(parts, path):
    """Lines ``sample_id,partition`` sorted by partition then id."""
    with open(path, "w") as fh:
        fh.write("sample_id,partition\n")
        for name, ids in (("amplified", parts.d_a), ("candidate", parts.d_bn_cand)):
            for i in sorted(ids):
                fh.write(f"{i},{name}\n")


def read_partitions(path, source=""):
    d_a, cand = set(), set()
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "sample_id,partition":
            raise FormatError(f"unexpected partition header {header!r}", offset=0)
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                sid, name = line.split(",")
                sid = int(sid)
            except ValueError:
                raise FormatError(f"malformed partition line {lineno}: {line!r}") from None
            if name == "amplified":
                d_a.add(sid)
            elif name == "candidate":
                cand.add(sid)
            else:
                raise FormatError(f"unknown partition {name!r} on line {lineno}")
    return PartitionSet(d_a, cand, source)
