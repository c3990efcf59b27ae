"""Selective prediction: a linear SVM meta-classifier over per-class
probabilities and coverage metrics decides whether to release the base
prediction or abstain for human review.

Training is deterministic hinge-loss subgradient descent with step
1/(lambda*t) over z-scored features; the decision rule is select=1 iff
w.z + b >= 0 (inclusive).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GATE_VERSION = "capguard-gate-v1"


class _AbstainType:
    """Sentinel for the abstain outcome; a single shared instance."""

    __slots__ = ()

    def __repr__(self) -> str:
        return "ABSTAIN"


ABSTAIN = _AbstainType()


@dataclass(frozen=True)
class FeatureVector:
    """Gate input: [p_0..p_{C-1}, max prob, att_sensitivity, att_fpr].

    Undefined coverage metrics are imputed to 0 and flagged.
    """

    values: np.ndarray
    imputed: bool = False

    @property
    def num_classes(self) -> int:
        return len(self.values) - 3


@dataclass(frozen=True)
class GateModel:
    weights: np.ndarray
    bias: float
    means: np.ndarray
    stds: np.ndarray
    lam: float
    epochs: int
    seed: int


@dataclass(frozen=True)
class GateDecision:
    select: int
    released: object  # class index or ABSTAIN

    def __post_init__(self):
        if self.select not in (0, 1):
            raise ValueError(f"select must be 0 or 1, got {self.select}")
        if (self.released is ABSTAIN) != (self.select == 0):
            raise ValueError("released must be ABSTAIN exactly when select=0")


def build_features(report, probs) -> FeatureVector:
    """Assemble the fixed-order gate features for one sample."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or len(probs) < 2:
        raise ValueError("probs must be a vector of >= 2 class probabilities")
    imputed = report.att_sensitivity is None or report.att_fpr is None
    sens = 0.0 if report.att_sensitivity is None else report.att_sensitivity
    fpr = 0.0 if report.att_fpr is None else report.att_fpr
    values = np.concatenate([probs, [probs.max(), sens, fpr]])
    return FeatureVector(values=values, imputed=imputed)


def _standardize_stats(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    means = matrix.mean(axis=0)
    stds = matrix.std(axis=0)
    stds = np.where(stds == 0, 1.0, stds)  # constant features pass through as 0
    return means, stds


def fit_gate(features, labels, lam: float = 1e-3, epochs: int = 200,
             seed: int = 0) -> GateModel:
    """Train the meta-classifier on (feature, correct) pairs.

    labels: truthy = the base prediction was correct (the gate should
    select), falsy = incorrect.  Needs at least two samples of each label.
    Shuffling is drawn per (seed, epoch), so the fit is reproducible.

    The bias is learned as the weight of an internal constant feature, so
    it shares the regularizer and the iterates stay bounded; a separately
    stepped unregularized bias would take a 1/lambda jump on the first
    update and swamp the fit.
    """
    matrix = np.stack([f.values for f in features]).astype(np.float64)
    y = np.where(np.asarray(labels, dtype=bool), 1.0, -1.0)
    if len(y) != len(matrix):
        raise ValueError("features and labels disagree in length")
    pos = int((y > 0).sum())
    neg = int((y < 0).sum())
    if pos < 2 or neg < 2:
        raise ValueError(
            f"need >= 2 samples of each label, got {pos} correct / {neg} incorrect"
        )
    if lam <= 0 or epochs < 1:
        raise ValueError("lam must be > 0 and epochs >= 1")

    means, stds = _standardize_stats(matrix)
    z = (matrix - means) / stds
    aug = np.concatenate([z, np.ones((len(z), 1))], axis=1)

    w = np.zeros(aug.shape[1])
    t = 0
    for epoch in range(epochs):
        order = np.random.default_rng((seed, epoch)).permutation(len(aug))
        for i in order:
            t += 1
            step = 1.0 / (lam * t)
            if y[i] * (w @ aug[i]) < 1.0:
                w = (1.0 - step * lam) * w + step * y[i] * aug[i]
            else:
                w = (1.0 - step * lam) * w
    return GateModel(weights=w[:-1], bias=float(w[-1]), means=means,
                     stds=stds, lam=lam, epochs=epochs, seed=seed)


def predict_select(model: GateModel, feature: FeatureVector) -> int:
    """1 iff the standardized margin is >= 0 (inclusive at zero)."""
    z = (feature.values - model.means) / model.stds
    return 1 if model.weights @ z + model.bias >= 0.0 else 0


def gate(select: int, predicted_class: int) -> GateDecision:
    """Release the base prediction on select=1, abstain on select=0."""
    if select == 1:
        return GateDecision(select=1, released=predicted_class)
    return GateDecision(select=0, released=ABSTAIN)


def evaluate_gate(model: GateModel, features, corrects):
    """Selective-prediction quality on a labeled runtime set.

    Returns (acc_on_accurate, acc_on_inaccurate): the fraction of
    base-correct samples the gate releases, and the fraction of
    base-incorrect samples it holds back.  A column with no samples is
    None.
    """
    selects = np.array([predict_select(model, f) for f in features])
    corrects = np.asarray(corrects, dtype=bool)
    if len(selects) != len(corrects):
        raise ValueError("features and labels disagree in length")
    acc = None
    if corrects.any():
        acc = float((selects[corrects] == 1).mean())
    inacc = None
    if (~corrects).any():
        inacc = float((selects[~corrects] == 0).mean())
    return acc, inacc


# ---------------------------------------------------------------------------
# Serialization.
# ---------------------------------------------------------------------------

def save_gate(model: GateModel, path) -> None:
    doc = {
        "version": GATE_VERSION,
        "weights": model.weights.tolist(),
        "bias": model.bias,
        "means": model.means.tolist(),
        "stds": model.stds.tolist(),
        "lam": model.lam,
        "epochs": model.epochs,
        "seed": model.seed,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_gate(path) -> GateModel:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != GATE_VERSION:
        raise ValueError(f"{path}: unsupported gate model version")
    return GateModel(
        weights=np.array(doc["weights"], dtype=np.float64),
        bias=doc["bias"],
        means=np.array(doc["means"], dtype=np.float64),
        stds=np.array(doc["stds"], dtype=np.float64),
        lam=doc["lam"],
        epochs=doc["epochs"],
        seed=doc["seed"],
    )


def write_features_csv(features, path) -> None:
    """Feature vectors as CSV; floats use repr so they read back identical."""
    if not features:
        raise ValueError("no feature vectors to write")
    num_classes = features[0].num_classes
    header = [f"p{c}" for c in range(num_classes)]
    header += ["max_prob", "att_sensitivity", "att_fpr", "imputed"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for f in features:
            if f.num_classes != num_classes:
                raise ValueError("mixed class counts in feature list")
            writer.writerow([repr(float(v)) for v in f.values]
                            + ["1" if f.imputed else "0"])


def read_features_csv(path) -> list[FeatureVector]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[-4:] != ["max_prob", "att_sensitivity",
                                             "att_fpr", "imputed"]:
            raise ValueError(f"{path}: unexpected feature CSV header")
        out = []
        for row in reader:
            values = np.array([float(v) for v in row[:-1]], dtype=np.float64)
            out.append(FeatureVector(values=values, imputed=row[-1] == "1"))
    return out
