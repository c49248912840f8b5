"""Unbiased-test metrics, D^BN composition, CSV tables and SVG plots.

This is the only module (besides the data generator) that reads the
evaluation-only bias flags.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import svgplot
from .errors import ConfigError, InputError

METRIC_COLUMNS = ("mode", "seed", "severity", "overall", "class_avg", "ba", "bc", "bn_auc", "best_step",
                  "final_overall", "final_class_avg")


@dataclass
class Metrics:
    overall_acc: float
    per_class_acc: list
    class_avg_acc: float
    bc_acc: float
    ba_acc: float
    bn_auc: float = math.nan

    def as_dict(self):
        return {"overall": self.overall_acc, "class_avg": self.class_avg_acc, "ba": self.ba_acc,
                "bc": self.bc_acc, "bn_auc": self.bn_auc}


def _pct(mask):
    return 100.0 * float(mask.mean()) if mask.size else math.nan


def metrics_from_predictions(pred, labels, bias_aligned, num_classes):
    pred, labels, bias_aligned = np.asarray(pred), np.asarray(labels), np.asarray(bias_aligned, dtype=bool)
    if len(labels) == 0:
        raise ConfigError("test set is empty")
    correct = pred == labels
    per_class = []
    for c in range(num_classes):
        m = labels == c
        if not m.any():
            raise ConfigError(f"class {c} is absent from the test set")
        per_class.append(_pct(correct[m]))
    return Metrics(
        overall_acc=_pct(correct),
        per_class_acc=per_class,
        class_avg_acc=float(np.mean(per_class)),
        bc_acc=_pct(correct[~bias_aligned]),
        ba_acc=_pct(correct[bias_aligned]),
    )


def evaluate(net, test_split, num_classes=None):
    num_classes = num_classes or net.num_classes
    pred = np.argmax(net.logits(test_split.images), axis=1)
    return metrics_from_predictions(pred, test_split.labels, test_split.bias_aligned, num_classes)


def roc_auc(scores, positive):
    """Probability that a random positive outscores a random negative (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    pos, neg = scores[positive], scores[~positive]
    if len(pos) == 0 or len(neg) == 0:
        return math.nan
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def bn_auc(tracker, flags_by_id):
    """AUC of the final BN score separating BC (positive) from BA candidates."""
    is_bc = np.array([not flags_by_id[int(i)] for i in tracker.ids])
    return roc_auc(tracker.s, is_bc)


def dbn_composition(partitions, dbn_final, flags_by_id):
    """BA/BC counts excluded from D^BN_cand and retained in D^BN relative to D."""
    cand = set(int(i) for i in partitions.d_bn_cand)
    dbn = set(int(i) for i in dbn_final)
    if not dbn <= cand:
        raise InputError("final D^BN is not a subset of D^BN_cand")
    d_ba = sum(1 for v in flags_by_id.values() if v)
    d_bc = len(flags_by_id) - d_ba
    cand_ba = sum(1 for i in cand if flags_by_id[i])
    dbn_ba = sum(1 for i in dbn if flags_by_id[i])
    cand_bc, dbn_bc = len(cand) - cand_ba, len(dbn) - dbn_ba
    return {
        "cand_ba": cand_ba, "cand_bc": cand_bc, "dbn_ba": dbn_ba, "dbn_bc": dbn_bc,
        "excluded_ba": cand_ba - dbn_ba, "excluded_bc": cand_bc - dbn_bc,
        "dbn_over_d_ba_pct": 100.0 * dbn_ba / d_ba if d_ba else math.nan,
        "dbn_over_d_bc_pct": 100.0 * dbn_bc / d_bc if d_bc else math.nan,
        "cand_ba_frac": cand_ba / len(cand) if cand else math.nan,
        "dbn_ba_frac": dbn_ba / len(dbn) if dbn else math.nan,
    }


@dataclass
class RunSummary:
    mode: str
    seed: int
    severity: float
    best: Metrics
    best_step: int
    final: Metrics
    history: list = field(default_factory=list)  # (step, class_avg)

    def row(self):
        return {
            "mode": self.mode, "seed": self.seed, "severity": self.severity,
            "overall": self.best.overall_acc, "class_avg": self.best.class_avg_acc,
            "ba": self.best.ba_acc, "bc": self.best.bc_acc, "bn_auc": self.final.bn_auc,
            "best_step": self.best_step, "final_overall": self.final.overall_acc,
            "final_class_avg": self.final.class_avg_acc,
        }


def summarize(mode, seed, severity, eval_log, bn_auc_value=math.nan):
    """Pick the best evaluation by class-average accuracy (earliest on ties)."""
    if not eval_log:
        raise InputError("no evaluations were recorded")
    best_step, best = max(eval_log, key=lambda se: (se[1].class_avg_acc, -se[0]))
    final_step, final = eval_log[-1]
    final.bn_auc = bn_auc_value
    return RunSummary(mode, seed, severity, best, best_step, final,
                      [(s, m.class_avg_acc) for s, m in eval_log])


def _cell(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4f}"
    return str(v)


def write_metrics_csv(rows, path):
    rows = sorted(rows, key=lambda r: (str(r["mode"]), int(r["seed"]), float(r["severity"])))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_cell(r[c]) for c in METRIC_COLUMNS])


def read_metrics_csv(path):
    if not os.path.exists(path):
        return []
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"] = int(r["seed"])
        r["best_step"] = int(r["best_step"])
        for c in ("severity", "overall", "class_avg", "ba", "bc", "bn_auc", "final_overall", "final_class_avg"):
            r[c] = float(r[c])
    return rows


def upsert_metrics_row(path, row):
    """Replace the row with the same (mode, seed, severity), keeping the file sorted."""
    rows = [r for r in read_metrics_csv(path)
            if (r["mode"], r["seed"], round(r["severity"], 6)) != (row["mode"], row["seed"], round(row["severity"], 6))]
    rows.append(row)
    write_metrics_csv(rows, path)


# ---------------------------------------------------------------- plots


def bn_group_trajectories(tracker_rows, every=500):
    """Mean BN score per group ('BA', 'BC') every ``every`` steps.

    ``tracker_rows`` are dicts with keys step, is_bc, s.  Steps before any
    reference capture carry s == 0 and are averaged as such.
    """
    by_step = {}
    for r in tracker_rows:
        if r["step"] % every:
            continue
        by_step.setdefault(r["step"], {"BA": [], "BC": []})["BC" if r["is_bc"] else "BA"].append(r["s"])
    steps = sorted(by_step)
    out = []
    for group in ("BA", "BC"):
        ys = [float(np.mean(by_step[s][group])) if by_step[s][group] else math.nan for s in steps]
        out.append((group, steps, ys))
    return out


def emit_plots(out_dir, tracker_rows=(), accuracy_series=(), every=500):
    """Write bn_trajectory.svg and accuracy.svg; returns their paths."""
    os.makedirs(out_dir, exist_ok=True)
    traj = bn_group_trajectories(tracker_rows, every) if tracker_rows else []
    bn_path = os.path.join(out_dir, "bn_trajectory.svg")
    with open(bn_path, "w") as fh:
        fh.write(svgplot.line_plot(traj, title="BN score of candidates", xlabel="iteration",
                                   ylabel="mean BN score"))
    acc_path = os.path.join(out_dir, "accuracy.svg")
    with open(acc_path, "w") as fh:
        fh.write(svgplot.line_plot(list(accuracy_series), title="Unbiased test accuracy",
                                   xlabel="iteration", ylabel="class-average accuracy (%)"))
    return bn_path, acc_path
