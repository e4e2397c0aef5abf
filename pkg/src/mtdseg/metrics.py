"""Confusion-matrix accumulation and segmentation scores (IoU, F1, OA, Cohen's kappa).

Rows of the confusion matrix index ground truth, columns index predictions.
All scores are fractions in memory and percentages only when serialized.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractViolation, DataError, EvaluationError, ReportError

logger = logging.getLogger(__name__)

MIOU_CONSISTENCY_TOL = 0.005  # absolute, in percentage points


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # (C, C) int64

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ContractViolation(f"confusion matrix must be square, got {c.shape}")
        if (c < 0).any():
            raise ContractViolation("confusion matrix has negative entries")
        object.__setattr__(self, "counts", c.astype(np.int64, copy=False))

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ContractViolation("cannot merge confusion matrices of different class counts")
        return ConfusionMatrix(self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, pred, label, ignore_value: int = 255,
               tile: str | None = None) -> ConfusionMatrix:
    """Return ``cm`` plus the pixel counts of one (pred, label) pair."""
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise ContractViolation(f"pred {pred.shape} and label {label.shape} differ in shape")
    n = cm.num_classes
    keep = label != ignore_value
    gt = label[keep].astype(np.int64)
    pr = pred[keep].astype(np.int64)
    bad = (gt < 0) | (gt >= n) | (pr < 0) | (pr >= n)
    if bad.any():
        where = f" in tile {tile!r}" if tile else ""
        raise DataError(f"class id outside [0, {n}) and not ignore_value{where}: "
                        f"{sorted(set(np.concatenate([gt[bad], pr[bad]]).tolist()))[:5]}")
    counts = np.bincount(gt * n + pr, minlength=n * n).reshape(n, n)
    return ConfusionMatrix(cm.counts + counts)


def _present(cm: ConfusionMatrix) -> np.ndarray:
    c = cm.counts
    return (c.sum(0) + c.sum(1)) > 0


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """TP / (TP + FP + FN) per class; NaN where the class never occurs."""
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    denom = c.sum(0) + c.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / denom, np.nan)


def f1_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """2TP / (2TP + FP + FN) per class; NaN where the class never occurs."""
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    denom = c.sum(0) + c.sum(1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, 2 * tp / denom, np.nan)


def overall_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise EvaluationError("overall accuracy of an empty confusion matrix")
    return float(np.trace(cm.counts)) / cm.total


def kappa(cm: ConfusionMatrix) -> tuple[float, bool]:
    """Cohen's kappa and a degeneracy flag (True when chance agreement is 1)."""
    total = cm.total
    if total == 0:
        raise EvaluationError("kappa of an empty confusion matrix")
    c = cm.counts.astype(np.float64)
    oa = np.trace(c) / total
    pre = float((c.sum(1) * c.sum(0)).sum()) / float(total) ** 2
    if pre >= 1.0:
        return 0.0, True
    return float((oa - pre) / (1.0 - pre)), False


@dataclass
class MetricsReport:
    iou_per_class: list[float]
    f1_per_class: list[float] | None
    miou: float
    mf1: float
    oa: float | None
    kappa: float
    class_names: list[str]
    name: str = ""
    absent_classes: list[int] = field(default_factory=list)
    kappa_degenerate: bool = False

    def summary(self) -> str:
        """Table-style ``mIoU / mF1 / Kappa`` string, e.g. ``76.99 / 83.22 / 0.8044``."""
        return f"{self.miou * 100:.2f} / {self.mf1 * 100:.2f} / {self.kappa:.4f}"

    def to_dict(self) -> dict:
        def pct(v):
            return None if v is None or math.isnan(v) else round(v * 100, 2)

        d = {
            "name": self.name,
            "class_names": list(self.class_names),
            "iou": {k: pct(v) for k, v in zip(self.class_names, self.iou_per_class)},
            "f1": None if self.f1_per_class is None else
                  {k: pct(v) for k, v in zip(self.class_names, self.f1_per_class)},
            "miou": pct(self.miou),
            "mf1": pct(self.mf1),
            "oa": pct(self.oa),
            "kappa": round(self.kappa, 4),
            "absent_classes": list(self.absent_classes),
            "kappa_degenerate": self.kappa_degenerate,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        def frac(v):
            return math.nan if v is None else v / 100.0

        names = list(d["class_names"])
        try:
            iou = [frac(d["iou"][k]) for k in names]
            f1 = None if d.get("f1") is None else [frac(d["f1"][k]) for k in names]
        except KeyError as e:
            raise ReportError(f"report {d.get('name', '?')!r} lacks class {e}") from None
        return cls(iou_per_class=iou, f1_per_class=f1, miou=frac(d["miou"]),
                   mf1=frac(d["mf1"]), oa=None if d.get("oa") is None else frac(d["oa"]),
                   kappa=float(d["kappa"]), class_names=names, name=d.get("name", ""),
                   absent_classes=list(d.get("absent_classes", [])),
                   kappa_degenerate=bool(d.get("kappa_degenerate", False)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def csv_header(self) -> list[str]:
        return ["name", *self.class_names, "mIoU", "mF1", "Kappa"]

    def csv_row(self) -> list[str]:
        cells = ["" if math.isnan(v) else f"{v * 100:.2f}" for v in self.iou_per_class]
        return [self.name, *cells, f"{self.miou * 100:.2f}", f"{self.mf1 * 100:.2f}",
                f"{self.kappa:.4f}"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.csv_header())
        w.writerow(self.csv_row())
        return buf.getvalue()

    def save(self, stem: Path) -> tuple[Path, Path]:
        """Write ``<stem>.json`` and ``<stem>.csv``."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        js, cs = stem.with_suffix(".json"), stem.with_suffix(".csv")
        js.write_text(self.to_json() + "\n")
        cs.write_text(self.to_csv())
        return js, cs


def summarize(cm: ConfusionMatrix, class_names: Sequence[str] | None = None,
              name: str = "") -> MetricsReport:
    if class_names is None:
        class_names = [str(i) for i in range(cm.num_classes)]
    if len(class_names) != cm.num_classes:
        raise ContractViolation("class_names length does not match the confusion matrix")
    iou = iou_per_class(cm)
    f1 = f1_per_class(cm)
    present = _present(cm)
    absent = [int(i) for i in np.flatnonzero(~present)]
    if absent:
        logger.warning("classes absent from evaluation, excluded from means: %s",
                       [class_names[i] for i in absent])
    k, degenerate = kappa(cm)
    return MetricsReport(
        iou_per_class=iou.tolist(),
        f1_per_class=f1.tolist(),
        miou=float(np.nanmean(iou)) if present.any() else math.nan,
        mf1=float(np.nanmean(f1)) if present.any() else math.nan,
        oa=overall_accuracy(cm),
        kappa=k,
        class_names=list(class_names),
        name=name,
        absent_classes=absent,
        kappa_degenerate=degenerate,
    )


def report_from_iou_row(name: str, class_names: Sequence[str], iou_pct: Sequence[float],
                        mf1_pct: float, kappa_value: float,
                        miou_pct: float | None = None) -> MetricsReport:
    """Build a report from a published table row (percent IoUs, stated mF1 and kappa).

    When ``miou_pct`` is omitted the class mean is used.
    """
    iou = [v / 100.0 for v in iou_pct]
    miou = float(np.mean(iou)) if miou_pct is None else miou_pct / 100.0
    return MetricsReport(iou_per_class=iou, f1_per_class=None, miou=miou, mf1=mf1_pct / 100.0,
                         oa=None, kappa=kappa_value, class_names=list(class_names), name=name)


def check_consistency(report: MetricsReport) -> list[str]:
    """Warnings for a report whose class mean disagrees with its stated mIoU."""
    vals = [v for v in report.iou_per_class if not math.isnan(v)]
    if not vals:
        return []
    mean_pct = float(np.mean(vals)) * 100
    if abs(mean_pct - report.miou * 100) > MIOU_CONSISTENCY_TOL:
        return [f"{report.name or '<unnamed>'}: per-class IoU mean {mean_pct:.3f} "
                f"!= stated mIoU {report.miou * 100:.3f}"]
    return []


def render_table(reports: Iterable[MetricsReport], fmt: str = "markdown") -> tuple[str, list[str]]:
    """Render reports as a publication-style table. Returns (text, consistency warnings)."""
    reports = list(reports)
    if not reports:
        raise ReportError("no reports to render")
    names = reports[0].class_names
    for r in reports[1:]:
        if r.class_names != names:
            raise ReportError(f"class list of {r.name!r} differs from {reports[0].name!r}")
    warnings = [w for r in reports for w in check_consistency(r)]
    for w in warnings:
        logger.warning(w)

    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(reports[0].csv_header())
        for r in reports:
            w.writerow(r.csv_row())
        return buf.getvalue(), warnings
    if fmt != "markdown":
        raise ReportError(f"unknown table format {fmt!r}")

    def best(values):
        finite = [v for v in values if not math.isnan(v)]
        return max(finite) if finite else math.nan

    best_iou = [best([r.iou_per_class[i] for r in reports]) for i in range(len(names))]
    best_miou = best([r.miou for r in reports])
    best_mf1 = best([r.mf1 for r in reports])
    best_kappa = best([r.kappa for r in reports])

    def cell(text, is_best):
        return f"**{text}**" if is_best and len(reports) > 1 else text

    lines = ["| Model | " + " | ".join(names) + " | mIoU / mF1 / Kappa |",
             "|---" * (len(names) + 2) + "|"]
    for r in reports:
        cells = []
        for i, v in enumerate(r.iou_per_class):
            cells.append("-" if math.isnan(v) else cell(f"{v * 100:.2f}", v == best_iou[i]))
        summary = " / ".join([
            cell(f"{r.miou * 100:.2f}", r.miou == best_miou),
            cell(f"{r.mf1 * 100:.2f}", r.mf1 == best_mf1),
            cell(f"{r.kappa:.4f}", r.kappa == best_kappa),
        ])
        lines.append(f"| {r.name} | " + " | ".join(cells) + f" | {summary} |")
    return "\n".join(lines) + "\n", warnings
