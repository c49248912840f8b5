"""Joint training loop for the biased model f_b and the debiased model f_d.

Per iteration ``t`` (1-based, ``t = 1 .. total_iters``):

1. draw a mini-batch from D and flip it;
2. f_b forward; its per-sample CE feeds the tracker (candidates only) and
   the relative difficulty ``w``; f_b then takes an SGD step on the batch
   members in D^A;
3. for ``t < t2`` f_d minimises ``mean(w * CE)``; from ``t2`` on it minimises
   the guided total using one same-label auxiliary sample per input.

``vanilla`` mode skips f_b entirely and trains f_d with plain CE.
``reweight_only`` never enters the guided phase.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import guidance as guidance_mod
from . import losses, models, optim
from .config import ExperimentConfig
from .data import BatchSampler, TrainView, random_flip
from .errors import ContractError, TrainingError
from .tracker import BnState

log = logging.getLogger(__name__)

STEP_FIELDS = (
    "step", "guided", "lambda_main", "main", "guide_sim", "guide_cls", "guide", "bn", "total",
    "w_mean", "s_w_mean", "n_amplified", "n_dbn", "tier0", "tier1", "tier2", "pair_x", "pair_bn", "pair_tier",
)


@dataclass
class TrainResult:
    f_d: models.ConvNet
    f_b: models.ConvNet | None
    tracker: BnState | None
    step_log: list = field(default_factory=list)
    tracker_log: list = field(default_factory=list)
    eval_log: list = field(default_factory=list)


def _streams(seed):
    ss = np.random.SeedSequence([int(seed), 202])
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def _guided_at(cfg, t):
    # t2 == total_iters leaves no guided steps at all
    return cfg.guided and cfg.t2 < cfg.total_iters and t >= cfg.t2


class Trainer:
    """Stateful loop; :meth:`fork` lets several modes share an identical prefix."""

    def __init__(self, cfg: ExperimentConfig, d: TrainView, partitions=None, arch=None,
                 guidance=guidance_mod, eval_fn=None, checkpoint_fn=None):
        cfg.validate()
        if not isinstance(d, TrainView):
            raise ContractError(f"trainer needs a bias-stripped TrainView, got {type(d).__name__}")
        self.cfg = cfg
        self.d = d
        self.arch = arch or models.ArchConfig(num_classes=int(d.labels.max()) + 1)
        self.guidance = guidance
        self.eval_fn = eval_fn
        self.checkpoint_fn = checkpoint_fn
        self.step = 0
        # the auxiliary batch flips from its own stream so guided runs keep the main flips
        rng_batch, rng_flip, rng_pair, rng_aux_flip = _streams(cfg.seed)
        self.rng_flip, self.rng_pair, self.rng_aux_flip = rng_flip, rng_pair, rng_aux_flip
        self.sampler = BatchSampler(len(d), cfg.batch_size, rng_batch)
        init_ss = np.random.SeedSequence([int(cfg.seed), 303]).generate_state(2)
        self.f_d = models.init(int(init_ss[0]), self.arch)
        self.opt_d = optim.make(cfg.optimizer, cfg.learning_rate)
        self.f_b = None
        self.tracker = None
        self.result = TrainResult(self.f_d, None, None)
        if cfg.mode == "vanilla":
            return
        if partitions is None:
            raise ContractError(f"mode {cfg.mode!r} needs D^A / D^BN_cand partitions")
        partitions.validate(d)
        self.f_b = models.init(int(init_ss[1]), self.arch)
        self.opt_b = optim.make(cfg.optimizer, cfg.learning_rate)
        index = d.index_of()
        self.in_amplified = np.zeros(len(d), dtype=bool)
        self.in_amplified[[index[i] for i in partitions.d_a]] = True
        cand_pos = np.array(sorted(index[i] for i in partitions.d_bn_cand), dtype=np.int64)
        self.tracker = BnState(d.ids[cand_pos], d.labels[cand_pos], cfg.alpha_l, cfg.alpha_s, cfg.t1)
        self.cand_pos = cand_pos
        self.pairs = losses.PairSampler(d.labels, cand_pos, self.arch.num_classes, cfg.pair_source)
        self.result = TrainResult(self.f_d, self.f_b, self.tracker)

    # -- branching ---------------------------------------------------------

    def fork(self, **changes):
        """Deep copy of the full state with some config fields replaced.

        Only fields that do not alter the steps already taken may change
        (mode between reweight_only/full, ablation switches, logging).
        """
        if self.cfg.mode == "vanilla" or changes.get("mode") == "vanilla":
            raise ContractError("vanilla runs do not share a prefix with reweighted runs")
        if _guided_at(self.cfg, self.step):
            raise ContractError("cannot fork after the guided phase has started")
        hooks = (self.eval_fn, self.checkpoint_fn, self.guidance)
        self.eval_fn = self.checkpoint_fn = self.guidance = None
        try:
            other = copy.deepcopy(self, memo={id(self.d): self.d})
        finally:
            self.eval_fn, self.checkpoint_fn, self.guidance = hooks
        other.eval_fn, other.checkpoint_fn, other.guidance = hooks
        other.cfg = dataclasses.replace(self.cfg, **changes).validate()
        other.pairs.source = other.cfg.pair_source
        other.result.f_d, other.result.f_b, other.result.tracker = other.f_d, other.f_b, other.tracker
        return other

    # -- loop ----------------------------------------------------------------

    def run(self, until=None):
        until = self.cfg.total_iters if until is None else until
        while self.step < until:
            self.step += 1
            self._iteration(self.step)
        return self.result

    def _iteration(self, t):
        cfg, d = self.cfg, self.d
        pos = self.sampler.next()
        y = d.labels[pos]
        x = random_flip(d.images[pos], self.rng_flip) if cfg.flip else d.images[pos]
        rec = {"step": t, "guided": 0, "lambda_main": 1.0, "guide_sim": 0.0, "guide_cls": 0.0,
               "guide": 0.0, "bn": 0.0, "s_w_mean": 0.0, "n_amplified": 0, "n_dbn": 0,
               "tier0": 0, "tier1": 0, "tier2": 0, "pair_x": -1, "pair_bn": -1, "pair_tier": -1}

        if cfg.mode == "vanilla":
            ce_b = None
        else:
            ce_b, n_amp = self._step_biased(x, y, pos)
            self.tracker.observe(d.ids[pos], ce_b, t)
            rec["n_amplified"] = n_amp

        with ad.Tape() as tape:
            p = self.f_d.param_tensors(tape)
            z = self.f_d.embed(x, p)
            ce_d = ad.cross_entropy(self.f_d.classify(z, p), y)
            w = np.ones(len(pos)) if ce_b is None else losses.relative_difficulty(ce_b, ce_d.data)
            main = ad.mul(ce_d, w)
            rec["w_mean"] = float(w.mean())
            if _guided_at(cfg, t):
                total = self._guided_terms(tape, p, x, y, pos, z, w, main, t, rec)
            else:
                total = ad.mean(main)
                rec["main"] = float(total.data)
            rec["total"] = float(total.data)
            if not np.isfinite(rec["total"]):
                raise TrainingError(f"non-finite loss at step {t}", dossier=dict(rec))
            tape.backward(total, list(p.values()))
        self.opt_d.step(self.f_d, p)

        if t % cfg.log_every == 0 or t == cfg.total_iters:
            self.result.step_log.append(rec)
        if self.tracker is not None and (t % cfg.tracker_log_every == 0 or t == cfg.total_iters):
            self.result.tracker_log.append((t, self.tracker.s.copy(), self.tracker.l.copy()))
        if self.eval_fn is not None and (t % cfg.eval_every == 0 or t == cfg.total_iters):
            self.result.eval_log.append((t, self.eval_fn(t, self.f_d)))
        if self.checkpoint_fn is not None and (t % cfg.checkpoint_every == 0 or t == cfg.total_iters):
            self.checkpoint_fn(t, self)

    def _step_biased(self, x, y, pos):
        amp = self.in_amplified[pos]
        with ad.Tape() as tape:
            p = self.f_b.param_tensors(tape)
            ce = ad.cross_entropy(self.f_b.forward(x, p), y)
            ce_b = ce.data.copy()
            n = int(amp.sum())
            if n:
                loss = ad.mul(ad.sum(ad.mul(ce, amp.astype(np.float64))), 1.0 / n)
                tape.backward(loss, list(p.values()))
        if n:
            self.opt_b.step(self.f_b, p)
        return ce_b, n

    def _guided_terms(self, tape, p, x, y, pos, z, w, main, t, rec):
        cfg, d = self.cfg, self.d
        lam = losses.lambda_main(t, cfg.t2, cfg.total_iters)
        dbn_mask = self.tracker.dbn_mask()
        aux, tiers = self.pairs.sample(pos, self.cand_pos[dbn_mask], self.rng_pair)
        x_bn = random_flip(d.images[aux], self.rng_aux_flip) if cfg.flip else d.images[aux]
        z_bn = self.f_d.embed(x_bn, p)
        logits_bn = self.f_d.classify(z_bn, p)
        g, _ = self.guidance.compute(self.f_d, z, z_bn, y, cfg.tau)

        if cfg.score_weight:
            weights = self.tracker.loss_weights()
            tpos = self.tracker.positions(d.ids[aux])
            s_w = np.where(tpos >= 0, weights[np.maximum(tpos, 0)], 0.0)
        else:
            s_w = np.ones(len(pos))

        sim = losses.loss_guide_sim(s_w, z, g)
        cls = losses.loss_guide_cls(w, self.f_d, g, y, p)
        guide = ad.mean(losses.loss_guide(sim, cls, cfg.lambda_sim))
        bn = ad.mean(losses.loss_bn(s_w, logits_bn, y))
        main_m = ad.mean(main)
        total = ad.mul(main_m, lam)
        if cfg.guide_loss:
            total = ad.add(total, guide)
        if cfg.bn_loss:
            total = ad.add(total, bn)

        rec.update(
            guided=1, lambda_main=lam, main=float(main_m.data),
            guide_sim=float(sim.data.mean()) if cfg.guide_loss else 0.0,
            guide_cls=float(cls.data.mean()) if cfg.guide_loss else 0.0,
            guide=float(guide.data) if cfg.guide_loss else 0.0,
            bn=float(bn.data) if cfg.bn_loss else 0.0,
            s_w_mean=float(s_w.mean()), n_dbn=int(dbn_mask.sum()),
            tier0=int((tiers == 0).sum()), tier1=int((tiers == 1).sum()), tier2=int((tiers == 2).sum()),
            pair_x=int(d.ids[pos[0]]), pair_bn=int(d.ids[aux[0]]), pair_tier=int(tiers[0]),
        )
        return total


def train(cfg, d, partitions=None, arch=None, **hooks):
    return Trainer(cfg, d, partitions, arch, **hooks).run()
