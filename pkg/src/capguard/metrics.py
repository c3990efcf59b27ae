"""Pixel-level coverage metrics between attention regions and lesion masks,
plus the attribute-vs-performance correlation analysis.

Undefined ratios (empty denominators) are represented as None and excluded
from every aggregate, never coerced to 0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class PixelConfusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class AttrReport:
    """Per-sample attention-coverage metrics.

    max_prob is carried for downstream monitoring features; it is not part
    of the exported CSV schema.
    """

    id: str
    att_sensitivity: float | None
    att_fpr: float | None
    mean_iou: float | None
    lesion_ratio: float | None
    predicted: int
    truth: int | None = None
    max_prob: float | None = None

    @property
    def correct(self) -> bool | None:
        if self.truth is None:
            return None
        return self.predicted == self.truth


def confusion_pixels(region: np.ndarray, lesion: np.ndarray) -> PixelConfusion:
    """Count pixel agreement between an attention region and a lesion mask."""
    region = np.asarray(region, dtype=bool)
    lesion = np.asarray(lesion, dtype=bool)
    if region.shape != lesion.shape:
        raise ValueError(f"shape mismatch: {region.shape} vs {lesion.shape}")
    return PixelConfusion(
        tp=int((region & lesion).sum()),
        fp=int((region & ~lesion).sum()),
        tn=int((~region & ~lesion).sum()),
        fn=int((~region & lesion).sum()),
    )


def att_sensitivity(c: PixelConfusion) -> float | None:
    """tp / (tp + fn): share of lesion pixels the attention covered."""
    if c.tp + c.fn == 0:
        return None
    return c.tp / (c.tp + c.fn)


def att_fpr(c: PixelConfusion) -> float | None:
    """fp / (fp + tn): share of healthy pixels the attention spilled onto."""
    if c.fp + c.tn == 0:
        return None
    return c.fp / (c.fp + c.tn)


def mean_iou(c: PixelConfusion) -> float | None:
    """Mean of lesion-class and background-class IoU.

    A class whose union is empty contributes nothing; if both unions are
    empty the value is undefined.
    """
    ious = []
    if c.tp + c.fp + c.fn > 0:
        ious.append(c.tp / (c.tp + c.fp + c.fn))
    if c.tn + c.fp + c.fn > 0:
        ious.append(c.tn / (c.tn + c.fp + c.fn))
    if not ious:
        return None
    return sum(ious) / len(ious)


def lesion_ratio(lesion: np.ndarray) -> float:
    lesion = np.asarray(lesion, dtype=bool)
    return float(lesion.sum()) / lesion.size


def pearson(xs, ys) -> float | None:
    """Pearson product-moment correlation; None when either side is constant."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("pearson needs two equal-length vectors")
    if len(xs) < 2:
        raise ValueError("pearson needs at least 2 points")
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    vx = (dx * dx).sum()
    vy = (dy * dy).sum()
    if vx == 0 or vy == 0:
        return None
    return float((dx * dy).sum() / np.sqrt(vx * vy))


def _macro_f1(preds: np.ndarray, truths: np.ndarray) -> float | None:
    """Macro-averaged F1 over the classes present in preds or truths."""
    scores = []
    for c in np.union1d(preds, truths):
        tp = int(((preds == c) & (truths == c)).sum())
        fp = int(((preds == c) & (truths != c)).sum())
        fn = int(((preds != c) & (truths == c)).sum())
        if 2 * tp + fp + fn == 0:
            continue
        scores.append(2 * tp / (2 * tp + fp + fn))
    if not scores:
        return None
    return sum(scores) / len(scores)


@dataclass(frozen=True)
class CorrelationTable:
    attribute: str
    bin_attr_means: tuple[float, ...]
    bin_accuracy: tuple[float, ...]
    bin_macro_f1: tuple[float, ...]
    r_accuracy: float | None
    r_macro_f1: float | None
    r_point_biserial: float | None


def correlate_attributes(reports, attribute: str,
                         bins: int = 10) -> CorrelationTable:
    """Relate one coverage attribute to predictive performance.

    Reports are sorted by the attribute and split into *bins* near-equal
    bins; each bin yields a mean attribute value, an accuracy, and a macro
    F1, and the bin columns are correlated (Pearson).  The per-sample
    point-biserial correlation (attribute vs 0/1 correctness) comes along
    as a secondary figure.  Reports with an undefined attribute value are
    excluded up front.
    """
    if bins < 2:
        raise ValueError("need at least 2 bins")
    rows = []
    for rep in reports:
        if rep.correct is None:
            raise ValueError(f"{rep.id}: correlation needs a true label")
        value = getattr(rep, attribute)
        if value is None:
            continue
        rows.append((value, rep.id, rep.predicted, rep.truth, rep.correct))
    if len(rows) < bins:
        raise ValueError(f"{len(rows)} usable reports for {bins} bins")

    rows.sort(key=lambda r: (r[0], r[1]))
    values = np.array([r[0] for r in rows])
    preds = np.array([r[2] for r in rows])
    truths = np.array([r[3] for r in rows])
    correct = np.array([r[4] for r in rows], dtype=np.float64)

    attr_means, accs, f1s = [], [], []
    for idx in np.array_split(np.arange(len(rows)), bins):
        attr_means.append(float(values[idx].mean()))
        accs.append(float(correct[idx].mean()))
        f1 = _macro_f1(preds[idx], truths[idx])
        f1s.append(f1 if f1 is not None else 0.0)

    return CorrelationTable(
        attribute=attribute,
        bin_attr_means=tuple(attr_means),
        bin_accuracy=tuple(accs),
        bin_macro_f1=tuple(f1s),
        r_accuracy=pearson(attr_means, accs),
        r_macro_f1=pearson(attr_means, f1s),
        r_point_biserial=pearson(values, correct),
    )


# ---------------------------------------------------------------------------
# CSV export.  Header is a fixed external contract; floats are written with
# repr so they parse back bit-identical.
# ---------------------------------------------------------------------------

CSV_HEADER = ("id", "att_sensitivity", "att_fpr", "mean_iou",
              "lesion_ratio", "predicted", "truth", "correct")


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_reports_csv(reports, path) -> None:
    """Write AttrReports sorted by sample id with the fixed header."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for rep in sorted(reports, key=lambda r: r.id):
            writer.writerow([
                _cell(rep.id),
                _cell(rep.att_sensitivity),
                _cell(rep.att_fpr),
                _cell(rep.mean_iou),
                _cell(rep.lesion_ratio),
                _cell(rep.predicted),
                _cell(rep.truth),
                _cell(rep.correct),
            ])


def read_reports_csv(path) -> list[AttrReport]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        out = []
        for row in reader:
            rec = dict(zip(CSV_HEADER, row))
            rep = AttrReport(
                id=rec["id"],
                att_sensitivity=float(rec["att_sensitivity"]) if rec["att_sensitivity"] else None,
                att_fpr=float(rec["att_fpr"]) if rec["att_fpr"] else None,
                mean_iou=float(rec["mean_iou"]) if rec["mean_iou"] else None,
                lesion_ratio=float(rec["lesion_ratio"]) if rec["lesion_ratio"] else None,
                predicted=int(rec["predicted"]),
                truth=int(rec["truth"]) if rec["truth"] else None,
            )
            stated = {"": None, "1": True, "0": False}[rec["correct"]]
            if stated != rep.correct:
                raise ValueError(f"{path}: {rep.id}: correct column contradicts labels")
            out.append(rep)
    return out
