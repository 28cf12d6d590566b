"""Patch-to-scan, whole-scan and total accuracy, plus per-class reports.

For scan ``s`` let ``c_s`` be the number of its test patches predicted as
``s`` and ``n_s`` its number of test patches. Then::

    patch-to-scan accuracy  = sum_s c_s / sum_s n_s
    whole-scan accuracy     = mean_s (c_s / n_s)
    total accuracy          = patch-to-scan * whole-scan
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .dataset import NUM_SCANS, DatasetManifest, PatchDataset, PreprocessConfig
from .errors import EvaluationError

EVAL_FORMAT = "path24-eval-result/1"


@dataclass
class PredictionSet:
    """Ground truth and predicted scan for each test patch."""

    entries: list
    num_classes: int = NUM_SCANS

    def __post_init__(self):
        self.entries = [(pid, int(t), int(p)) for pid, t, p in self.entries]
        self._true = np.fromiter((t for _, t, _ in self.entries), dtype=np.int64, count=len(self.entries))
        self._pred = np.fromiter((p for _, _, p in self.entries), dtype=np.int64, count=len(self.entries))
        bad = (self._true < 0) | (self._true >= self.num_classes) | (self._pred < 0) | (self._pred >= self.num_classes)
        if bad.any():
            pid, t, p = self.entries[int(np.argmax(bad))]
            raise EvaluationError(
                f"entry {pid!r} has labels ({t}, {p}) outside [0, {self.num_classes - 1}]"
            )

    @classmethod
    def from_labels(cls, true, pred, num_classes: int = NUM_SCANS, patch_ids=None):
        true, pred = list(true), list(pred)
        if len(true) != len(pred):
            raise EvaluationError(f"{len(true)} true labels but {len(pred)} predictions")
        ids = patch_ids if patch_ids is not None else range(len(true))
        return cls(list(zip(ids, true, pred)), num_classes)

    def __len__(self):
        return len(self.entries)

    @property
    def true(self) -> np.ndarray:
        return self._true

    @property
    def pred(self) -> np.ndarray:
        return self._pred

    @property
    def class_counts(self) -> np.ndarray:
        """Test patches per scan."""
        return np.bincount(self._true, minlength=self.num_classes)

    def correct_per_class(self) -> np.ndarray:
        true, pred = self.true, self.pred
        return np.bincount(true[true == pred], minlength=self.num_classes)


def _require_entries(preds: PredictionSet):
    if len(preds) == 0:
        raise EvaluationError("prediction set is empty")


def patch_to_scan_accuracy(preds: PredictionSet) -> float:
    _require_entries(preds)
    return int(preds.correct_per_class().sum()) / len(preds)


def whole_scan_accuracy(preds: PredictionSet) -> float:
    """Per-scan accuracy averaged with equal weight for every scan."""
    _require_entries(preds)
    counts = preds.class_counts
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise EvaluationError(f"no test patches for scan(s) {missing.tolist()}; whole-scan accuracy undefined")
    return float(np.mean(preds.correct_per_class() / counts))


def total_accuracy(eta_p: float, eta_w: float) -> float:
    for name, v in (("patch-to-scan", eta_p), ("whole-scan", eta_w)):
        if not 0.0 <= v <= 1.0:
            raise EvaluationError(f"{name} accuracy {v} outside [0, 1]")
    return eta_p * eta_w


def confusion_matrix(preds: PredictionSet) -> np.ndarray:
    """Counts indexed ``[true, predicted]``."""
    _require_entries(preds)
    k = preds.num_classes
    flat = np.bincount(preds.true * k + preds.pred, minlength=k * k)
    return flat.reshape(k, k)


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    precision_undefined: bool = False
    recall_undefined: bool = False


@dataclass
class ClassificationReport:
    per_class: list
    macro_precision: float
    macro_recall: float
    macro_f1: float

    def to_dict(self) -> dict:
        return {
            "per_class": [vars(c).copy() for c in self.per_class],
            "macro": {"precision": self.macro_precision, "recall": self.macro_recall, "f1": self.macro_f1},
        }


def classification_report(confusion) -> ClassificationReport:
    """Precision, recall and F1 per class from a ``[true, predicted]`` matrix.

    Zero denominators give 0 with the matching ``*_undefined`` flag set. F1
    is formed from the unrounded precision and recall.
    """
    m = np.asarray(confusion)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise EvaluationError(f"confusion matrix must be square, got shape {m.shape}")
    tp = np.diag(m)
    col = m.sum(axis=0)
    row = m.sum(axis=1)
    per_class = []
    for c in range(m.shape[0]):
        p = tp[c] / col[c] if col[c] else 0.0
        r = tp[c] / row[c] if row[c] else 0.0
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        per_class.append(ClassMetrics(float(p), float(r), float(f1), int(row[c]),
                                      precision_undefined=not col[c], recall_undefined=not row[c]))
    return ClassificationReport(
        per_class,
        float(np.mean([c.precision for c in per_class])),
        float(np.mean([c.recall for c in per_class])),
        float(np.mean([c.f1 for c in per_class])),
    )


def round_half_up(value: float, places: int = 2) -> float:
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(value)).quantize(q, rounding=ROUND_HALF_UP))


def as_percent(value: float) -> str:
    """Ratio rendered as a percentage with two decimals, rounded half-up."""
    return f"{round_half_up(value * 100, 2):.2f}"


@dataclass
class EvalResult:
    eta_p: float
    eta_w: float
    eta_total: float
    confusion: np.ndarray
    report: ClassificationReport
    misclassified_count: int
    n_tot: int
    class_counts: list = field(default_factory=list)
    predictions: Optional[PredictionSet] = None

    @property
    def per_class(self) -> list:
        return self.report.per_class

    def to_dict(self) -> dict:
        d = {
            "format": EVAL_FORMAT,
            "eta_p": self.eta_p,
            "eta_w": self.eta_w,
            "eta_total": self.eta_total,
            "n_tot": self.n_tot,
            "misclassified_count": self.misclassified_count,
            "class_counts": list(self.class_counts),
            "confusion": np.asarray(self.confusion).tolist(),
            **self.report.to_dict(),
        }
        if self.predictions is not None:
            d["predictions"] = [
                {"patch_id": str(pid), "true": t, "pred": p} for pid, t, p in self.predictions.entries
            ]
        return d

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "EvalResult":
        per_class = [ClassMetrics(**c) for c in d["per_class"]]
        macro = d["macro"]
        report = ClassificationReport(per_class, macro["precision"], macro["recall"], macro["f1"])
        preds = None
        if "predictions" in d:
            preds = PredictionSet([(e["patch_id"], e["true"], e["pred"]) for e in d["predictions"]],
                                  num_classes=len(d["confusion"]))
        return cls(d["eta_p"], d["eta_w"], d["eta_total"], np.array(d["confusion"], dtype=np.int64),
                   report, d["misclassified_count"], d["n_tot"], d["class_counts"], preds)


def evaluate_predictions(preds: PredictionSet) -> EvalResult:
    eta_p = patch_to_scan_accuracy(preds)
    eta_w = whole_scan_accuracy(preds)
    cm = confusion_matrix(preds)
    return EvalResult(
        eta_p=eta_p,
        eta_w=eta_w,
        eta_total=total_accuracy(eta_p, eta_w),
        confusion=cm,
        report=classification_report(cm),
        misclassified_count=int(len(preds) - np.trace(cm)),
        n_tot=len(preds),
        class_counts=preds.class_counts.tolist(),
        predictions=preds,
    )


def predict_records(model, records: Sequence, config: PreprocessConfig, batch_size: int = 32,
                    num_workers: int = 0) -> np.ndarray:
    """Argmax class for each record, in record order."""
    dataset = PatchDataset(records, config)
    loader = torch.utils.data.DataLoader(dataset, batch_size=batch_size, shuffle=False,
                                         num_workers=num_workers)
    model.eval()
    out = []
    with torch.no_grad():
        for x, _ in loader:
            out.append(model(x).argmax(dim=1).cpu().numpy())
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate_test_set(model, manifest: DatasetManifest, config: Optional[PreprocessConfig] = None,
                      batch_size: int = 32, num_classes: Optional[int] = None) -> EvalResult:
    """Predict every test record of ``manifest`` and score the predictions.

    ``config`` defaults to the preprocessing the model was trained with.
    Scans without test patches are rejected before any inference runs.
    """
    config = config or getattr(model, "preprocess", None) or PreprocessConfig(manifest.color_mode)
    if num_classes is None:
        head = getattr(model, "head_config", None)
        num_classes = head.num_classes if head is not None else NUM_SCANS
    records = manifest.subset("test")
    if not records:
        raise EvaluationError("manifest has no test records")
    present = {r.label for r in records}
    missing = sorted(set(range(num_classes)) - present)
    if missing:
        raise EvaluationError(f"test split has no patches for scan(s) {missing}")
    pred = predict_records(model, records, config, batch_size)
    paths = [Path(r.path).resolve() for r in records]
    base = _common_root(paths)
    ids = [str(p.relative_to(base)) if base else str(p) for p in paths]
    preds = PredictionSet.from_labels([r.label for r in records], pred, num_classes, ids)
    return evaluate_predictions(preds)


def _common_root(paths):
    try:
        return Path(os.path.commonpath([str(p.parent) for p in paths]))
    except ValueError:
        return None


def format_report_table(result: EvalResult) -> str:
    """Plain-text summary: accuracies, then precision/recall/F1/support per scan."""
    lines = [
        f"patch-to-scan accuracy (%): {as_percent(result.eta_p)}",
        f"whole-scan accuracy (%):    {as_percent(result.eta_w)}",
        f"total accuracy (%):         {as_percent(result.eta_total)}",
        f"misclassified: {result.misclassified_count} of {result.n_tot}",
        "",
        f"{'Class':<8}{'Precision':>10}{'Recall':>10}{'F1-score':>10}{'Support':>10}",
    ]
    for k, c in enumerate(result.per_class):
        lines.append(f"{'s' + str(k):<8}{round_half_up(c.precision):>10.2f}{round_half_up(c.recall):>10.2f}"
                     f"{round_half_up(c.f1):>10.2f}{c.support:>10d}")
    r = result.report
    lines.append(f"{'macro':<8}{round_half_up(r.macro_precision):>10.2f}{round_half_up(r.macro_recall):>10.2f}"
                 f"{round_half_up(r.macro_f1):>10.2f}{result.n_tot:>10d}")
    return "\n".join(lines) + "\n"


def plot_confusion(confusion, path, title: str = "Confusion matrix") -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    m = np.asarray(confusion)
    k = m.shape[0]
    fig, ax = plt.subplots(figsize=(max(4, 0.4 * k + 2), max(4, 0.4 * k + 1.5)))
    im = ax.imshow(m, cmap="Blues")
    ax.set_xlabel("predicted scan")
    ax.set_ylabel("true scan")
    ax.set_title(title)
    ax.set_xticks(range(k))
    ax.set_yticks(range(k))
    ax.tick_params(labelsize=7)
    threshold = m.max() / 2 if m.size else 0
    for i in range(k):
        for j in range(k):
            if m[i, j]:
                ax.text(j, i, str(m[i, j]), ha="center", va="center", fontsize=6,
                        color="white" if m[i, j] > threshold else "black")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
