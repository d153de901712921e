"""Confusion-matrix metrics with micro and macro averaging."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataValidationError


@dataclass
class MetricsReport:
    confusion: np.ndarray
    accuracy: float
    micro: dict
    macro: dict
    per_class: list
    task: str = ""
    zero_division: list = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return self.confusion.shape[0]

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "n_classes": self.n_classes,
            "confusion": self.confusion.tolist(),
            "accuracy": self.accuracy,
            "micro": dict(self.micro),
            "macro": dict(self.macro),
            "per_class": [dict(c) for c in self.per_class],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        return cls(np.array(d["confusion"], dtype=np.int64), d["accuracy"], d["micro"], d["macro"],
                   d["per_class"], d.get("task", ""))

    def __eq__(self, other):
        if not isinstance(other, MetricsReport):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def confusion_matrix(preds, labels, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.size != labels.size:
        raise DataValidationError(f"{preds.size} predictions for {labels.size} labels")
    if preds.size == 0:
        raise DataValidationError("cannot evaluate an empty prediction set")
    for name, v in (("predictions", preds), ("labels", labels)):
        if v.min() < 0 or v.max() >= n_classes:
            raise DataValidationError(f"{name} must lie in [0, {n_classes})")
    return np.bincount(labels * n_classes + preds, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def _ratio(num, den, flag, tag):
    if den == 0:
        flag.append(tag)
        return 0.0
    return num / den


def evaluate(preds, labels, n_classes: int, task: str = "") -> MetricsReport:
    cm = confusion_matrix(preds, labels, n_classes)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    flags = []
    per_class = []
    for k in range(n_classes):
        p = _ratio(int(tp[k]), int(tp[k] + fp[k]), flags, (k, "p"))
        r = _ratio(int(tp[k]), int(tp[k] + fn[k]), flags, (k, "r"))
        f1 = _ratio(2 * p * r, p + r, flags, (k, "f1"))
        per_class.append({"class": k, "p": p, "r": r, "f1": f1})
    total = int(cm.sum())
    # pooled counts: every error is one FP and one FN, so micro P = R = F1 = accuracy
    s_tp, s_fp, s_fn = int(tp.sum()), int(fp.sum()), int(fn.sum())
    mp = _ratio(s_tp, s_tp + s_fp, flags, ("micro", "p"))
    mr = _ratio(s_tp, s_tp + s_fn, flags, ("micro", "r"))
    mf = _ratio(2 * mp * mr, mp + mr, flags, ("micro", "f1"))
    macro = {m: float(np.mean([c[m] for c in per_class])) for m in ("p", "r", "f1")}
    return MetricsReport(cm, s_tp / total, {"p": mp, "r": mr, "f1": mf}, macro, per_class, task, flags)


def report_render(report: MetricsReport, format: str = "table", class_names=None) -> str:
    if format == "json":
        return report.to_json()
    if format != "table":
        raise ValueError(f"unknown format {format!r}")
    names = list(class_names) if class_names else [str(k) for k in range(report.n_classes)]
    rows = [f"{'':<10}{'Precision':>11}{'Recall':>9}{'F1':>9}{'Accuracy':>10}"]
    rows.append(f"{'Micro':<10}{report.micro['p']:>11.4f}{report.micro['r']:>9.4f}"
                f"{report.micro['f1']:>9.4f}{report.accuracy:>10.4f}")
    rows.append(f"{'Macro':<10}{report.macro['p']:>11.4f}{report.macro['r']:>9.4f}"
                f"{report.macro['f1']:>9.4f}{report.accuracy:>10.4f}")
    rows.append("")
    rows.append(f"{'Class':<10}{'Precision':>11}{'Recall':>9}{'F1':>9}{'Support':>10}")
    support = report.confusion.sum(axis=1)
    for c, name in zip(report.per_class, names):
        rows.append(f"{name:<10}{c['p']:>11.4f}{c['r']:>9.4f}{c['f1']:>9.4f}{int(support[c['class']]):>10d}")
    return "\n".join(rows) + "\n"
