"""Offline calibration and runtime drift monitoring over coverage metrics.

Calibration fits per-metric empirical quantile intervals on the correct-
prediction subset and keeps that subset's (sensitivity, fpr, max-prob)
values as the drift reference.  At runtime, windows of fresh metric values
are compared against the reference with ECDF distance statistics and
permutation-bootstrap p-values; a Gaussian-blur corruption generator
produces the degraded inputs used to exercise the monitor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FEATURES = ("att_sensitivity", "att_fpr", "max_prob")
STATISTIC_NAMES = ("ks", "kuiper", "cvm", "ad", "w1")

CALIBRATION_VERSION = "capguard-calibration-v1"
DRIFT_VERSION = "capguard-drift-v1"

MIN_WINDOW = 10


# ---------------------------------------------------------------------------
# ECDF and two-sample distance statistics.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Ecdf:
    """Right-continuous empirical CDF: F(x) = fraction of sample <= x."""

    support: np.ndarray  # sorted distinct sample values
    cumfrac: np.ndarray  # F evaluated at each support point

    def __call__(self, x):
        idx = np.searchsorted(self.support, np.asarray(x, dtype=np.float64),
                              side="right")
        return np.where(idx > 0, self.cumfrac[np.maximum(idx - 1, 0)], 0.0)


def ecdf(sample) -> Ecdf:
    sample = np.asarray(sample, dtype=np.float64)
    if sample.size == 0:
        raise ValueError("ecdf of an empty sample")
    support, counts = np.unique(sample, return_counts=True)
    return Ecdf(support=support, cumfrac=np.cumsum(counts) / sample.size)


@dataclass(frozen=True)
class DistStats:
    ks: float
    kuiper: float
    cvm: float
    ad: float
    w1: float

    def get(self, name: str) -> float:
        if name not in STATISTIC_NAMES:
            raise ValueError(f"unknown statistic {name!r}")
        return getattr(self, name)


def dist_stats(a, b) -> DistStats:
    """Two-sample ECDF distances over the pooled support.

    ks      sup |F_a - F_b|
    kuiper  sup (F_a - F_b) + sup (F_b - F_a), each sup floored at 0
    cvm     (mn/N^2) * sum over pooled points of (F_a - F_b)^2
    ad      like cvm but weighted by 1/(H(1-H)), H the pooled ECDF,
            scaled by mn/N; the H=1 endpoint drops out
    w1      integral of |F_a - F_b| dx
    """
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("dist_stats requires two nonempty samples")
    m, n = a.size, b.size
    big_n = m + n
    support = np.union1d(a, b)
    hi_a = np.searchsorted(a, support, side="right")
    hi_b = np.searchsorted(b, support, side="right")
    fa = hi_a / m
    fb = hi_b / n
    diff = fa - fb

    ks = float(np.abs(diff).max())
    kuiper = float(max(diff.max(), 0.0) + max(-diff.min(), 0.0))

    count_a = hi_a - np.searchsorted(a, support, side="left")
    count_b = hi_b - np.searchsorted(b, support, side="left")
    pooled_count = count_a + count_b
    cvm = float(m * n / big_n**2 * np.sum(pooled_count * diff**2))

    h = (m * fa + n * fb) / big_n
    inner = h < 1.0
    ad = float(m * n / big_n * np.sum(
        pooled_count[inner] / big_n * diff[inner]**2
        / (h[inner] * (1.0 - h[inner]))
    ))

    if support.size > 1:
        w1 = float(np.sum(np.abs(diff[:-1]) * np.diff(support)))
    else:
        w1 = 0.0
    return DistStats(ks=ks, kuiper=kuiper, cvm=cvm, ad=ad, w1=w1)


def bootstrap_pvalue(statistic: str, a, b, resamples: int, seed: int) -> float:
    """Permutation-bootstrap p-value for one distance statistic.

    Pools a and b, re-splits at the original sizes `resamples` times, and
    returns (1 + #{resampled >= observed}) / (resamples + 1).  Each
    resample draws its own generator from (seed, index), so the result is
    independent of evaluation order.
    """
    if resamples < 100:
        raise ValueError(f"need >= 100 resamples, got {resamples}")
    observed = dist_stats(a, b).get(statistic)
    pooled = np.concatenate([
        np.asarray(a, dtype=np.float64).ravel(),
        np.asarray(b, dtype=np.float64).ravel(),
    ])
    m = np.asarray(a).size
    exceed = 0
    for i in range(resamples):
        rng = np.random.default_rng((seed, i))
        perm = rng.permutation(pooled.size)
        stat = dist_stats(pooled[perm[:m]], pooled[perm[m:]]).get(statistic)
        if stat >= observed:
            exceed += 1
    return (1 + exceed) / (resamples + 1)


# ---------------------------------------------------------------------------
# Density estimation.
# ---------------------------------------------------------------------------

def silverman_bandwidth(values) -> float:
    """Silverman's rule for one axis: 0.9 * min(sd, IQR/1.34) * n^(-1/5)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return 1e-6
    sd = float(values.std(ddof=1))
    q1, q3 = np.quantile(values, [0.25, 0.75])
    spread = min(sd, (q3 - q1) / 1.34)
    return max(0.9 * spread * values.size ** (-1 / 5), 1e-6)


def kde_density(points, bandwidth: float, query) -> float:
    """Isotropic 2-D Gaussian kernel density at one query point.

    density = (1 / (n * 2*pi*h^2)) * sum_i exp(-||q - x_i||^2 / (2 h^2))
    """
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        raise ValueError("kde_density of an empty sample")
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError("points must be an [n, 2] array")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    query = np.asarray(query, dtype=np.float64)
    d2 = ((points - query) ** 2).sum(axis=1)
    total = np.exp(-d2 / (2.0 * bandwidth**2)).sum()
    return float(total / (points.shape[0] * 2.0 * np.pi * bandwidth**2))


# ---------------------------------------------------------------------------
# Corruption generator.
# ---------------------------------------------------------------------------

def gaussian_blur(image, level: float) -> np.ndarray:
    """Separable Gaussian blur at a percent intensity level.

    sigma = (level/100) * 5 pixels, kernel radius = ceil(3*sigma), with
    reflect padding.  Level 0 returns the image bit-identical.
    """
    if not 0 <= level <= 100:
        raise ValueError(f"blur level must be in [0, 100], got {level}")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("expected a 2-d grayscale image")
    if image.min() < 0 or image.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    if level == 0:
        return image.copy()

    sigma = level / 100.0 * 5.0
    radius = math.ceil(3.0 * sigma)
    if radius >= min(image.shape):
        raise ValueError(
            f"kernel radius {radius} too large for image {image.shape}"
        )
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-offsets**2 / (2.0 * sigma**2))
    kernel /= kernel.sum()

    from numpy.lib.stride_tricks import sliding_window_view

    padded = np.pad(image, ((0, 0), (radius, radius)), mode="reflect")
    tmp = sliding_window_view(padded, kernel.size, axis=1) @ kernel
    padded = np.pad(tmp, ((radius, radius), (0, 0)), mode="reflect")
    out = sliding_window_view(padded, kernel.size, axis=0) @ kernel
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Calibration.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationModel:
    """Quantile confidence bounds plus the offline reference sample."""

    gamma: float
    bounds: dict[str, tuple[float, float]]  # att_sensitivity, att_fpr
    reference: dict[str, np.ndarray]  # columns for FEATURES
    bandwidths: dict[str, float]


def fit_calibration(reports, gamma: float = 0.95,
                    min_count: int = 20) -> CalibrationModel:
    """Calibrate per-metric confidence intervals on correct predictions.

    Only reports with correct == True and both coverage metrics defined
    enter the fit; the bounds are the empirical (1-gamma)/2 and
    1-(1-gamma)/2 quantiles (linear-interpolated order statistics).
    """
    if not 0 < gamma < 1:
        raise ValueError(f"gamma must be in (0, 1), got {gamma}")
    rows = []
    for rep in reports:
        if rep.correct is None:
            raise ValueError(f"{rep.id}: calibration needs true labels")
        if not rep.correct:
            continue
        if rep.att_sensitivity is None or rep.att_fpr is None:
            continue
        if rep.max_prob is None:
            raise ValueError(f"{rep.id}: report lacks max_prob")
        rows.append((rep.att_sensitivity, rep.att_fpr, rep.max_prob))
    if len(rows) < min_count:
        raise ValueError(
            f"calibration needs >= {min_count} usable correct reports, "
            f"got {len(rows)}"
        )
    columns = {
        name: np.array([row[i] for row in rows])
        for i, name in enumerate(FEATURES)
    }
    lo_q = (1.0 - gamma) / 2.0
    hi_q = 1.0 - lo_q
    bounds = {
        name: tuple(float(v) for v in np.quantile(columns[name], [lo_q, hi_q]))
        for name in ("att_sensitivity", "att_fpr")
    }
    bandwidths = {name: silverman_bandwidth(columns[name]) for name in FEATURES}
    return CalibrationModel(gamma=gamma, bounds=bounds,
                            reference=columns, bandwidths=bandwidths)


def in_ci(model: CalibrationModel, report) -> bool | None:
    """Whether both coverage metrics fall inside their bounds (inclusive).

    Undefined metrics make the answer undefined (None), counted separately
    by callers.
    """
    sens = report.att_sensitivity
    fpr = report.att_fpr
    if sens is None or fpr is None:
        return None
    s_lo, s_hi = model.bounds["att_sensitivity"]
    f_lo, f_hi = model.bounds["att_fpr"]
    return bool(s_lo <= sens <= s_hi and f_lo <= fpr <= f_hi)


# ---------------------------------------------------------------------------
# Drift checking.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DriftReport:
    """Distance statistics and bootstrap p-values per monitored feature.

    The p-values test the single designated statistic; the alarm applies a
    Bonferroni correction across features.
    """

    feature_stats: dict[str, DistStats]
    pvalues: dict[str, float]
    window_size: int
    alarm: bool
    alpha: float
    statistic: str
    resamples: int
    seed: int


def _feature_values(reports, name: str) -> np.ndarray:
    values = [getattr(rep, name) for rep in reports]
    defined = np.array([v for v in values if v is not None], dtype=np.float64)
    if defined.size == 0:
        raise ValueError(f"no defined values for feature {name!r}")
    return defined


def drift_check(model: CalibrationModel, reports, alpha: float = 0.05,
                resamples: int = 500, seed: int = 0,
                statistic: str = "ks") -> DriftReport:
    """Compare a runtime window against the calibration reference.

    Each feature is tested marginally; undefined values are dropped per
    feature.  Alarm fires when any feature's bootstrap p-value drops below
    alpha divided by the number of features.
    """
    reports = list(reports)
    if len(reports) < MIN_WINDOW:
        raise ValueError(
            f"drift window needs >= {MIN_WINDOW} reports, got {len(reports)}"
        )
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if statistic not in STATISTIC_NAMES:
        raise ValueError(f"unknown statistic {statistic!r}")

    feature_stats = {}
    pvalues = {}
    for offset, name in enumerate(FEATURES):
        window = _feature_values(reports, name)
        reference = model.reference[name]
        feature_stats[name] = dist_stats(reference, window)
        pvalues[name] = bootstrap_pvalue(
            statistic, reference, window, resamples, seed + offset
        )
    threshold = alpha / len(FEATURES)
    return DriftReport(
        feature_stats=feature_stats,
        pvalues=pvalues,
        window_size=len(reports),
        alarm=any(p < threshold for p in pvalues.values()),
        alpha=alpha,
        statistic=statistic,
        resamples=resamples,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Serialization.  JSON keeps Python floats exact, so both files round-trip
# bit-for-bit.
# ---------------------------------------------------------------------------

def save_calibration(model: CalibrationModel, path) -> None:
    doc = {
        "version": CALIBRATION_VERSION,
        "gamma": model.gamma,
        "bounds": {k: list(v) for k, v in model.bounds.items()},
        "reference": {k: v.tolist() for k, v in model.reference.items()},
        "bandwidths": dict(model.bandwidths),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_calibration(path) -> CalibrationModel:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != CALIBRATION_VERSION:
        raise ValueError(f"{path}: unsupported calibration version")
    return CalibrationModel(
        gamma=doc["gamma"],
        bounds={k: (v[0], v[1]) for k, v in doc["bounds"].items()},
        reference={k: np.array(v, dtype=np.float64)
                   for k, v in doc["reference"].items()},
        bandwidths=doc["bandwidths"],
    )


def save_drift_report(report: DriftReport, path) -> None:
    doc = {
        "version": DRIFT_VERSION,
        "alarm": report.alarm,
        "alpha": report.alpha,
        "statistic": report.statistic,
        "resamples": report.resamples,
        "seed": report.seed,
        "window_size": report.window_size,
        "pvalues": dict(report.pvalues),
        "feature_stats": {
            name: {s: stats.get(s) for s in STATISTIC_NAMES}
            for name, stats in report.feature_stats.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_drift_report(path) -> DriftReport:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != DRIFT_VERSION:
        raise ValueError(f"{path}: unsupported drift report version")
    return DriftReport(
        feature_stats={
            name: DistStats(**stats)
            for name, stats in doc["feature_stats"].items()
        },
        pvalues=doc["pvalues"],
        window_size=doc["window_size"],
        alarm=doc["alarm"],
        alpha=doc["alpha"],
        statistic=doc["statistic"],
        resamples=doc["resamples"],
        seed=doc["seed"],
    )
