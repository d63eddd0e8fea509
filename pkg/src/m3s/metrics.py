"""Confusion matrices, one-vs-rest multiclass metrics and complexity counters.

Confusion matrices put ground truth on rows and predictions on columns.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, EmptyMatrix, LengthMismatch
from .spectra import N_CLASSES, Subtype

CLASS_NAMES = [c.name for c in Subtype]


def confusion(preds, truths, n_classes=N_CLASSES):
    preds, truths = np.asarray(preds, dtype=int), np.asarray(truths, dtype=int)
    if preds.shape != truths.shape:
        raise LengthMismatch(f"{preds.size} predictions vs {truths.size} labels")
    if preds.size == 0:
        raise EmptyInput("no predictions to tally")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truths, preds), 1)
    return cm


def _ratio(num, den):
    """num / den with 0/0 -> 0; also returns which entries were undefined."""
    num, den = np.asarray(num, dtype=np.float64), np.asarray(den, dtype=np.float64)
    undefined = den == 0
    out = np.divide(num, den, out=np.zeros_like(num), where=~undefined)
    return out, undefined


@dataclass
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    specificity: float
    f1: float
    per_class: dict
    weighted: dict
    confusion: np.ndarray
    undefined: dict = field(default_factory=dict)
    flops: int | None = None
    params: int | None = None

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "specificity": self.specificity,
            "f1": self.f1,
            "weighted": self.weighted,
            "per_class": self.per_class,
            "confusion": self.confusion.tolist(),
            "undefined": self.undefined,
            "flops": self.flops,
            "params": self.params,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self):
        lines = [f"{'class':<6}{'P':>8}{'R':>8}{'S':>8}{'F1':>8}{'support':>9}"]
        for name in CLASS_NAMES:
            pc = self.per_class[name]
            lines.append(f"{name:<6}{pc['precision']:>8.4f}{pc['recall']:>8.4f}"
                         f"{pc['specificity']:>8.4f}{pc['f1']:>8.4f}{pc['support']:>9d}")
        lines.append(f"{'macro':<6}{self.precision:>8.4f}{self.recall:>8.4f}{self.specificity:>8.4f}{self.f1:>8.4f}")
        lines.append(f"accuracy {self.accuracy:.4f}")
        if self.params is not None:
            lines.append(f"params {self.params}  flops {self.flops}")
        return "\n".join(lines)


def compute_metrics(cm) -> MetricReport:
    """Accuracy plus macro (and support-weighted) one-vs-rest P/R/S/F1.

    Ratios with a zero denominator count as 0 and are listed in ``undefined``.
    """
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        raise EmptyMatrix("confusion matrix is empty")
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = total - tp - fp - fn
    precision, p_undef = _ratio(tp, tp + fp)
    recall, r_undef = _ratio(tp, tp + fn)
    specificity, s_undef = _ratio(tn, tn + fp)
    f1, f_undef = _ratio(2 * precision * recall, precision + recall)
    support = cm.sum(axis=1)
    names = CLASS_NAMES[: cm.shape[0]]
    per_class = {
        name: {"tp": int(tp[k]), "fp": int(fp[k]), "fn": int(fn[k]), "tn": int(tn[k]),
               "precision": float(precision[k]), "recall": float(recall[k]),
               "specificity": float(specificity[k]), "f1": float(f1[k]), "support": int(support[k])}
        for k, name in enumerate(names)
    }
    w = support / total
    undefined = {metric: [names[k] for k in np.flatnonzero(mask)]
                 for metric, mask in (("precision", p_undef), ("recall", r_undef),
                                      ("specificity", s_undef), ("f1", f_undef)) if mask.any()}
    return MetricReport(
        accuracy=float(np.trace(cm) / total),
        precision=float(precision.mean()),
        recall=float(recall.mean()),
        specificity=float(specificity.mean()),
        f1=float(f1.mean()),
        per_class=per_class,
        weighted={"precision": float(w @ precision), "recall": float(w @ recall),
                  "specificity": float(w @ specificity), "f1": float(w @ f1)},
        confusion=cm,
        undefined=undefined,
    )


def write_confusion_csv(cm, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["truth\\pred"] + CLASS_NAMES)
        for name, row in zip(CLASS_NAMES, np.asarray(cm)):
            writer.writerow([name] + [int(v) for v in row])


# ------------------------------------------------------------------ complexity

def count_params(model):
    """Trainable scalars, weight matrix included.

    Accepts an M3S model or a single layer.
    """
    params = model.all_params() if hasattr(model, "all_params") else model.params()
    return int(sum(p.value.size for p in params))


def count_flops(model, input_shapes=None):
    """``2 * MACs`` over conv and dense forward passes.

    For a conv layer MACs = C_out * H' * W' * C_in * f^2; for dense, n_in * n_out.
    ``input_shapes`` defaults to ``(1, s, s)`` per configured scale for M3S
    models; single layers need an explicit ``(C, H, W)`` or ``(n,)`` shape.
    """
    if hasattr(model, "branches"):
        shapes = input_shapes or [(1, s, s) for s in model.config.scales]
        macs = sum(b.macs(tuple(shape)) for b, shape in zip(model.branches, shapes))
        macs += model.head.macs((model.head.in_features,))
        return int(2 * macs)
    return int(2 * model.macs(tuple(input_shapes)))
