"""Hard-mask evaluation: confusion matrix, per-class IoU/Dice and reports."""

from __future__ import annotations

import csv
import io
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

ISAID_CATEGORIES = [
    ("PL", "Plane"),
    ("BD", "Baseball Diamond"),
    ("BR", "Bridge"),
    ("GTF", "Ground Track Field"),
    ("SV", "Small Vehicle"),
    ("LV", "Large Vehicle"),
    ("SH", "Ship"),
    ("TC", "Tennis Court"),
    ("BC", "Basketball Court"),
    ("ST", "Storage Tank"),
    ("SBF", "Soccer Field"),
    ("RA", "Roundabout"),
    ("HA", "Harbor"),
    ("SP", "Swimming Pool"),
    ("HC", "Helicopter"),
]


class MetricsError(ValueError):
    pass


class ConfusionMatrix:
    """``counts[t, p]`` = number of pixels with truth ``t`` predicted as ``p``."""

    def __init__(self, num_classes: int, counts: Optional[np.ndarray] = None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = counts

    def accumulate(self, truth, pred) -> "ConfusionMatrix":
        truth, pred = np.asarray(truth), np.asarray(pred)
        if truth.shape != pred.shape:
            raise MetricsError(f"truth shape {truth.shape} != prediction shape {pred.shape}")
        c = self.num_classes
        for name, arr in (("truth", truth), ("prediction", pred)):
            if arr.size and (arr.min() < 0 or arr.max() >= c):
                raise MetricsError(f"{name} contains class indices outside [0, {c})")
        flat = truth.astype(np.int64).ravel() * c + pred.astype(np.int64).ravel()
        self.counts += np.bincount(flat, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise MetricsError("cannot merge matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp_fp_fn(self):
        tp = np.diag(self.counts)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        return tp, fp, fn


def accumulate(cm: ConfusionMatrix, truth, pred) -> ConfusionMatrix:
    return cm.accumulate(truth, pred)


def per_class_iou(cm: ConfusionMatrix) -> List[Optional[float]]:
    """TP / (TP + FP + FN); ``None`` for classes absent from truth and prediction."""
    tp, fp, fn = cm.tp_fp_fn()
    denom = tp + fp + fn
    return [float(tp[c] / denom[c]) if denom[c] else None for c in range(cm.num_classes)]


def per_class_dice(cm: ConfusionMatrix) -> List[Optional[float]]:
    """2 TP / (2 TP + FP + FN); ``None`` when undefined."""
    tp, fp, fn = cm.tp_fp_fn()
    denom = 2 * tp + fp + fn
    return [float(2 * tp[c] / denom[c]) if denom[c] else None for c in range(cm.num_classes)]


def mean_foreground(values: Sequence[Optional[float]]) -> float:
    """Mean over defined entries with index >= 1; background never counts."""
    fg = [v for v in values[1:] if v is not None]
    if not fg:
        raise MetricsError("no defined foreground classes to average")
    return float(sum(fg) / len(fg))


def class_names(num_classes: int) -> List[str]:
    """Foreground display names (background excluded)."""
    if num_classes == len(ISAID_CATEGORIES) + 1:
        return [abbr for abbr, _ in ISAID_CATEGORIES]
    return [f"class{i}" for i in range(1, num_classes)]


def _pct(v: Optional[float]) -> str:
    return "" if v is None else f"{100.0 * v:.1f}"


def render_report(iou: Sequence[Optional[float]], dice: Sequence[Optional[float]],
                  metadata: Optional[Mapping[str, object]] = None) -> Dict[str, str]:
    """Build the CSV and aligned text tables.

    Values are percentages with one decimal.  ``metadata`` may carry
    ``method``, ``params``, ``flops`` and ``inference_time`` for the efficiency
    table, and ``class_names`` to override the default foreground names.
    """
    if len(iou) != len(dice):
        raise MetricsError("IoU and Dice arrays differ in length")
    meta = dict(metadata or {})
    names = list(meta.get("class_names") or class_names(len(iou)))
    miou = _safe_mean(iou)
    mdice = _safe_mean(dice)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "iou", "dice"])
    for name, i, d in zip(names, iou[1:], dice[1:]):
        w.writerow([name, _pct(i), _pct(d)])
    w.writerow(["miou", _pct(miou), ""])
    w.writerow(["mdice", "", _pct(mdice)])

    method = str(meta.get("method", "UNet CNN"))
    params = meta.get("params")
    cols = ["Method", "#params", "mIoU", "mDice"] + names
    row = [method, _fmt_count(params), _pct(miou), _pct(mdice)] + [_pct(v) for v in iou[1:]]
    lines = ["IoU per Category in %", _align([cols, row])]

    eff_cols = ["Model Name", "# of Parameters", "FLOPS", "Inference Time*"]
    flops = meta.get("flops")
    latency = meta.get("inference_time")
    eff_row = [
        method,
        _fmt_count(params),
        "-" if flops is None else f"{float(flops) / 1e9:.2f} G",
        "-" if latency is None else f"{float(latency):.2f}s",
    ]
    lines += ["", "Inference efficiency", _align([eff_cols, eff_row])]
    if latency is not None:
        lines.append(f"* Inference Time calculated on {meta.get('inference_images', 6)} images")
    return {"csv": buf.getvalue(), "text": "\n".join(lines) + "\n"}


def _safe_mean(values):
    try:
        return mean_foreground(values)
    except MetricsError:
        return None


def _fmt_count(n) -> str:
    if n is None:
        return "-"
    n = int(n)
    if n >= 1_000_000:
        return f"{n / 1e6:.1f}M"
    if n >= 1_000:
        return f"{n / 1e3:.1f}K"
    return str(n)


def _align(rows: List[List[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(cell.rjust(wd) for cell, wd in zip(r, widths)).rstrip() for r in rows)


def parse_report_csv(text: str) -> Dict[str, object]:
    """Inverse of the CSV part of :func:`render_report` (percentages)."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["class", "iou", "dice"]:
        raise MetricsError("not a report CSV")
    out: Dict[str, object] = {"classes": {}}
    conv = lambda s: float(s) if s else None  # noqa: E731
    for name, i, d in rows[1:]:
        if name == "miou":
            out["miou"] = conv(i)
        elif name == "mdice":
            out["mdice"] = conv(d)
        else:
            out["classes"][name] = (conv(i), conv(d))
    return out
