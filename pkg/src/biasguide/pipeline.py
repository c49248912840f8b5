"""Stage runner behind the CLI, plus an in-memory multi-mode harness.

On disk a run directory looks like::

    <out>/metrics.csv                      one row per (mode, seed, severity)
    <out>/datasets/data-<key>.bgd          shared by every run with the same data
    <out>/ensembles/ens-<key>/             member checkpoints + partitions.csv
    <out>/runs/<run_id>/manifest.json      stage flags, hashes, output paths
    <out>/runs/<run_id>/...                logs, checkpoints, plots, maps

Each stage has a key derived from the config sections it depends on.  A stage
whose recorded key matches is skipped unless ``force`` is set; a stage whose
upstream has not completed under the current keys raises
:class:`PreconditionError`.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import ensemble, evaluation, guidance, models, trainer
from .config import RunConfig
from .errors import FormatError, PreconditionError

log = logging.getLogger(__name__)

STAGES = ("generate", "pretrain", "train", "evaluate", "report")
MANIFEST_VERSION = 1


def _hash(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def stage_keys(cfg: RunConfig):
    d = cfg.to_dict()
    gen = _hash({"seed": d["seed"], "data": d["data"]})
    train_opts = {k: d["train"][k] for k in ("learning_rate", "optimizer", "batch_size", "flip")}
    pre = _hash({"generate": gen, "model": d["model"], "ensemble": d["ensemble"], "opts": train_opts,
                 "vanilla": cfg.experiment.mode == "vanilla"})
    full = _hash({"pretrain": pre, "config": d})
    return {"generate": gen, "pretrain": pre, "train": full, "evaluate": full, "report": full}


def run_id(cfg: RunConfig):
    pct = f"{100.0 * cfg.data.severity:g}".replace(".", "p")
    return f"{cfg.experiment.tag()}-seed{cfg.seed}-sev{pct}"


@dataclass
class RunManifest:
    run_id: str
    config_hash: str
    dataset_hash: str = ""
    stages: dict = field(default_factory=dict)  # name -> {"key": ..., "done": bool}
    outputs: dict = field(default_factory=dict)  # name -> path relative to the out dir
    version: int = MANIFEST_VERSION

    def done(self, stage, key):
        rec = self.stages.get(stage)
        return bool(rec and rec.get("done") and rec.get("key") == key)

    def mark(self, stage, key):
        self.stages[stage] = {"key": key, "done": True}
        # anything downstream is stale once an upstream stage re-runs
        for later in STAGES[STAGES.index(stage) + 1 :]:
            if later in self.stages:
                self.stages[later]["done"] = False

    def save(self, path):
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest {path} is not valid JSON: {exc.msg}", offset=exc.pos) from None
        if raw.get("version") != MANIFEST_VERSION:
            raise FormatError(f"manifest {path} has version {raw.get('version')}, expected {MANIFEST_VERSION}")
        return cls(**raw)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    return str(v)


def pretrain_ensemble(view, cfg: RunConfig):
    e = cfg.experiment
    members = ensemble.pretrain_biased(
        view, e.ensemble_count, e.ensemble_iters, e.q, e.seed, cfg.arch(), e.learning_rate,
        e.batch_size, e.flip, e.optimizer,
    )
    parts = ensemble.build_partitions(members, view, e.amplified_threshold, source="ensemble")
    return members, parts


def make_eval_fn(test_split, num_classes):
    def eval_fn(step, net):
        return evaluation.evaluate(net, test_split, num_classes)

    return eval_fn


class Pipeline:
    """Runs the stages of one configuration inside ``out_dir``."""

    def __init__(self, cfg: RunConfig, out_dir, force=False):
        self.cfg = cfg.validate()
        self.out = os.path.abspath(out_dir)
        self.force = force
        self.keys = stage_keys(cfg)
        self.run_id = run_id(cfg)
        self.run_dir = os.path.join(self.out, "runs", self.run_id)
        self.manifest_path = os.path.join(self.run_dir, "manifest.json")
        os.makedirs(self.run_dir, exist_ok=True)
        if os.path.exists(self.manifest_path):
            self.manifest = RunManifest.load(self.manifest_path)
            self.manifest.config_hash = self.keys["train"]
        else:
            self.manifest = RunManifest(self.run_id, self.keys["train"])
        with open(os.path.join(self.run_dir, "config.json"), "w") as fh:
            fh.write(cfg.dumps())

    # -- bookkeeping ---------------------------------------------------------

    def _path(self, *parts):
        return os.path.join(self.out, *parts)

    def _rel(self, path):
        return os.path.relpath(path, self.out)

    def _abs(self, name):
        return os.path.join(self.out, self.manifest.outputs[name])

    def _require(self, stage):
        if not self.manifest.done(stage, self.keys[stage]):
            raise PreconditionError(stage)

    def _skip(self, stage):
        if self.manifest.done(stage, self.keys[stage]) and not self.force:
            log.info("%s: up to date for %s", stage, self.run_id)
            return True
        return False

    def _finish(self, stage, **outputs):
        self.manifest.mark(stage, self.keys[stage])
        self.manifest.outputs.update({k: self._rel(v) for k, v in outputs.items()})
        self.manifest.save(self.manifest_path)

    def _dataset(self):
        return data_mod.load(self._abs("dataset"))

    # -- stages ----------------------------------------------------------------

    def generate(self):
        if self._skip("generate"):
            return False
        path = self._path("datasets", f"data-{self.keys['generate']}.bgd")
        os.makedirs(os.path.dirname(path), exist_ok=True)
        if self.force or not os.path.exists(path):
            ds = data_mod.generate(self.cfg.data, self.cfg.seed)
            data_mod.export(ds, path + ".tmp")
            os.replace(path + ".tmp", path)
        else:
            ds = data_mod.load(path)
        self.manifest.dataset_hash = ds.digest()
        self._finish("generate", dataset=path)
        return True

    def pretrain(self):
        self._require("generate")
        if self._skip("pretrain"):
            return False
        if self.cfg.experiment.mode == "vanilla":
            log.info("pretrain: vanilla mode trains no biased models")
            self._finish("pretrain")
            return True
        ens_dir = self._path("ensembles", f"ens-{self.keys['pretrain']}")
        parts_path = os.path.join(ens_dir, "partitions.csv")
        if self.force or not os.path.exists(parts_path):
            view = self._dataset().train.view()
            members, parts = pretrain_ensemble(view, self.cfg)
            os.makedirs(ens_dir, exist_ok=True)
            for k, net in enumerate(members.members):
                models.save_checkpoint(net, os.path.join(ens_dir, f"member{k}.ckpt"))
            ensemble.write_partitions(parts, parts_path)
        self._finish("pretrain", partitions=parts_path)
        return True

    def train(self):
        self._require("generate")
        self._require("pretrain")
        if self._skip("train"):
            return False
        cfg = self.cfg
        ds = self._dataset()
        view = ds.train.view()
        parts = None
        if cfg.experiment.mode != "vanilla":
            parts = ensemble.read_partitions(self._abs("partitions"), source="ensemble")
        ckpt_dir = os.path.join(self.run_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)

        def checkpoint_fn(t, tr):
            models.save_checkpoint(tr.f_d, os.path.join(ckpt_dir, f"f_d-{t:06d}.ckpt"))
            if tr.f_b is not None:
                models.save_checkpoint(tr.f_b, os.path.join(ckpt_dir, f"f_b-{t:06d}.ckpt"))

        started = time.perf_counter()
        result = trainer.Trainer(cfg.experiment, view, parts, cfg.arch(),
                                 eval_fn=make_eval_fn(ds.test, cfg.data.classes),
                                 checkpoint_fn=checkpoint_fn).run()
        log.info("train: %s finished %d steps in %.1fs", self.run_id, cfg.experiment.total_iters,
                 time.perf_counter() - started)
        outputs = self._write_train_outputs(ds, result)
        self._finish("train", **outputs)
        return True

    def _write_train_outputs(self, ds, result):
        rd = self.run_dir
        out = {}
        out["step_log"] = os.path.join(rd, "step_log.csv")
        _write_csv(out["step_log"], trainer.STEP_FIELDS,
                   [[_fmt(r[k]) for k in trainer.STEP_FIELDS] for r in result.step_log])
        out["eval_log"] = os.path.join(rd, "eval_log.csv")
        nc = self.cfg.data.classes
        _write_csv(out["eval_log"], ["step", "overall", "class_avg", "ba", "bc"] + [f"class{c}" for c in range(nc)],
                   [[t, _fmt(m.overall_acc), _fmt(m.class_avg_acc), _fmt(m.ba_acc), _fmt(m.bc_acc)]
                    + [_fmt(v) for v in m.per_class_acc] for t, m in result.eval_log])
        out["f_d"] = os.path.join(rd, "f_d.ckpt")
        models.save_checkpoint(result.f_d, out["f_d"])
        if result.tracker is not None:
            tr = result.tracker
            flags = dict(zip(ds.train.ids.tolist(), ds.train.bias_aligned.tolist()))
            is_bc = [int(not flags[int(i)]) for i in tr.ids]
            rows = []
            for t, s, l in result.tracker_log:
                for k in range(len(tr)):
                    rows.append([t, int(tr.ids[k]), int(tr.labels[k]), is_bc[k], _fmt(l[k]), _fmt(s[k])])
            out["tracker_log"] = os.path.join(rd, "tracker_log.csv")
            _write_csv(out["tracker_log"], ["step", "sample_id", "label", "is_bc_eval_only", "l", "s"], rows)
            out["tracker_final"] = os.path.join(rd, "tracker_final.csv")
            _write_csv(out["tracker_final"], ["sample_id", "label", "l", "l_ref", "s"],
                       [[int(tr.ids[k]), int(tr.labels[k]), _fmt(tr.l[k]), _fmt(tr.l_ref[k]), _fmt(tr.s[k])]
                        for k in range(len(tr))])
            out["f_b"] = os.path.join(rd, "f_b.ckpt")
            models.save_checkpoint(result.f_b, out["f_b"])
        return out

    def _read_eval_log(self):
        with open(self._abs("eval_log"), newline="") as fh:
            rows = list(csv.DictReader(fh))
        nc = self.cfg.data.classes
        out = []
        for r in rows:
            m = evaluation.Metrics(float(r["overall"]), [float(r[f"class{c}"]) for c in range(nc)],
                                   float(r["class_avg"]), float(r["bc"]), float(r["ba"]))
            out.append((int(r["step"]), m))
        return out

    def _read_tracker_final(self):
        with open(self._abs("tracker_final"), newline="") as fh:
            rows = list(csv.DictReader(fh))
        ids = np.array([int(r["sample_id"]) for r in rows], dtype=np.int64)
        s = np.array([float(r["s"]) for r in rows])
        return ids, s

    def evaluate(self):
        self._require("train")
        if self._skip("evaluate"):
            return False
        ds = self._dataset()
        flags = dict(zip(ds.train.ids.tolist(), ds.train.bias_aligned.tolist()))
        auc = float("nan")
        outputs = {}
        if "tracker_final" in self.manifest.outputs and self.cfg.experiment.mode != "vanilla":
            ids, s = self._read_tracker_final()
            auc = evaluation.roc_auc(s, [not flags[int(i)] for i in ids])
            parts = ensemble.read_partitions(self._abs("partitions"))
            comp = evaluation.dbn_composition(parts, ids[s > 0], flags)
            outputs["dbn_composition"] = os.path.join(self.run_dir, "dbn_composition.csv")
            _write_csv(outputs["dbn_composition"], list(comp), [[_fmt(v) for v in comp.values()]])
        e = self.cfg.experiment
        summary = evaluation.summarize(e.tag(), e.seed, 100.0 * self.cfg.data.severity,
                                       self._read_eval_log(), auc)
        row = summary.row()
        outputs["summary"] = os.path.join(self.run_dir, "summary.json")
        with open(outputs["summary"], "w") as fh:
            json.dump({k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in row.items()},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
        outputs["metrics"] = self._path("metrics.csv")
        evaluation.upsert_metrics_row(outputs["metrics"], row)
        self._finish("evaluate", **outputs)
        return True

    def report(self):
        self._require("evaluate")
        if self._skip("report"):
            return False
        tracker_rows = []
        if "tracker_log" in self.manifest.outputs and self.cfg.experiment.mode != "vanilla":
            with open(self._abs("tracker_log"), newline="") as fh:
                for r in csv.DictReader(fh):
                    tracker_rows.append({"step": int(r["step"]), "is_bc": r["is_bc_eval_only"] == "1",
                                         "s": float(r["s"])})
        hist = self._read_eval_log()
        series = [(self.cfg.experiment.tag(), [t for t, _ in hist], [m.class_avg_acc for _, m in hist])]
        bn_svg, acc_svg = evaluation.emit_plots(self.run_dir, tracker_rows, series)
        outputs = {"bn_trajectory": bn_svg, "accuracy": acc_svg}
        maps = self._guidance_maps()
        if maps is not None:
            written = guidance.dump_maps(maps, os.path.join(self.run_dir, "maps"))
            outputs["maps"] = written[-1]
        self._finish("report", **outputs)
        return True

    def _guidance_maps(self):
        """Maps for one same-label pair per class under the final f_d, or None."""
        if self.cfg.experiment.mode == "vanilla":
            return None
        ds = self._dataset()
        net = models.load_checkpoint(self._abs("f_d"))
        ids, s = self._read_tracker_final()
        parts = ensemble.read_partitions(self._abs("partitions"))
        index = {int(i): k for k, i in enumerate(ds.train.ids)}
        labels = ds.train.labels
        xs, xbns, ys = [], [], []
        for c in range(self.cfg.data.classes):
            members = [int(k) for k in np.flatnonzero(labels == c)]
            anchors = [k for k in members if int(ds.train.ids[k]) not in parts.d_bn_cand] or members
            # prefer a D^BN partner, then any candidate, then any other sample of the class
            pool = [index[int(i)] for i in ids[s > 0] if labels[index[int(i)]] == c]
            pool = pool or [index[i] for i in sorted(parts.d_bn_cand) if labels[index[i]] == c]
            pool = [k for k in pool if k != anchors[0]] or [k for k in members if k != anchors[0]]
            if not pool:
                continue
            xs.append(anchors[0])
            xbns.append(pool[0])
            ys.append(c)
        if not xs:
            return None
        with ad.Tape() as tape:
            p = net.param_tensors(tape)
            z = net.embed(ds.train.images[xs], p)
            z_bn = net.embed(ds.train.images[xbns], p)
            _, maps = guidance.compute(net, z, z_bn, np.array(ys), self.cfg.experiment.tau)
        return maps

    def run_all(self):
        for stage in STAGES:
            getattr(self, stage.replace("-", "_"))()
        return self._abs("metrics")


# ---------------------------------------------------------------- in-memory suite


@dataclass
class VariantResult:
    tag: str
    summary: evaluation.RunSummary
    bn_auc: float
    composition: dict | None
    seconds: float
    step_log: list
    # ensemble pretraining plus the common prefix, paid once for all reweighted variants
    shared_seconds: float = 0.0


def run_suite(cfg: RunConfig, variants, dataset=None):
    """Train several modes on one dataset/ensemble and return their results.

    ``variants`` maps a label to ExperimentConfig overrides (``mode`` plus any
    ablation switch).  Reweighted variants share the ensemble and the training
    prefix up to step t2 - 1, which is identical across them; vanilla runs on
    its own.  Each result equals what an independent run would produce.
    """
    cfg.validate()
    ds = dataset or data_mod.generate(cfg.data, cfg.seed)
    view = ds.train.view()
    flags = dict(zip(ds.train.ids.tolist(), ds.train.bias_aligned.tolist()))
    eval_fn = make_eval_fn(ds.test, cfg.data.classes)
    sev = 100.0 * cfg.data.severity
    results = {}
    shared = {k: v for k, v in variants.items() if v.get("mode", cfg.experiment.mode) != "vanilla"}
    for label, over in variants.items():
        if label in shared:
            continue
        t0 = time.perf_counter()
        e = replace(cfg.experiment, **over)
        res = trainer.Trainer(e, view, None, cfg.arch(), eval_fn=eval_fn).run()
        summary = evaluation.summarize(e.tag(), e.seed, sev, res.eval_log)
        results[label] = VariantResult(e.tag(), summary, float("nan"), None, time.perf_counter() - t0,
                                       res.step_log)
    if shared:
        t0 = time.perf_counter()
        _, parts = pretrain_ensemble(view, cfg)
        base_cfg = replace(cfg.experiment, mode="reweight_only")
        base = trainer.Trainer(base_cfg, view, parts, cfg.arch(), eval_fn=eval_fn)
        base.run(base_cfg.t2 - 1)
        prefix = time.perf_counter() - t0
        for label, over in shared.items():
            t1 = time.perf_counter()
            branch = base.fork(**over)
            res = branch.run()
            e = branch.cfg
            tr = res.tracker
            auc = evaluation.roc_auc(tr.s, [not flags[int(i)] for i in tr.ids])
            comp = evaluation.dbn_composition(parts, tr.current_dbn(), flags)
            summary = evaluation.summarize(e.tag(), e.seed, sev, res.eval_log, auc)
            results[label] = VariantResult(e.tag(), summary, auc, comp, time.perf_counter() - t1,
                                           res.step_log, prefix)
    return results
