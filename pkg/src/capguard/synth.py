"""Synthetic fixtures: micro-net datasets over smooth blob images, plus
planted-signal regimes for calibration and gate evaluation.

The planted regimes exist because the toolkit's qualitative claims
(confidence-interval accuracy gaps, selective-prediction quality under
degradation) are only checkable against distributions with a known
ground-truth link between coverage metrics and correctness.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .gate import build_features
from .metrics import AttrReport
from .micronet import (
    backward_class,
    forward,
    init_micronet,
    load_params,
    save_params,
)
from .tensorstore import (
    DatasetManifest,
    SampleRecord,
    save_manifest,
    save_mask,
    write_tensor,
)


def blob_image(rng: np.random.Generator, side: int) -> np.ndarray:
    """A smooth [0,1] grayscale image: a few Gaussian bumps, rescaled."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    img = np.zeros((side, side))
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0.2 * side, 0.8 * side, size=2)
        spread = rng.uniform(0.10 * side, 0.30 * side)
        img += rng.uniform(0.5, 1.0) * np.exp(
            -((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * spread**2)
        )
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo)


def lesion_mask_from(image: np.ndarray, quantile: float = 0.7) -> np.ndarray:
    """Bright-region mask: pixels above the given intensity quantile."""
    return image > np.quantile(image, quantile)


def make_micro_dataset(directory, seed: int, n: int, side: int = 16,
                       num_filters: int = 4, num_classes: int = 3,
                       correct_rate: float = 0.8, with_labels: bool = True,
                       with_masks: bool = True) -> Path:
    """Write a complete micro-net dataset (tensors, masks, manifest).

    True labels are planted: equal to the net's prediction with probability
    correct_rate, otherwise a uniformly drawn other class.  Returns the
    manifest path; the generating net's parameters land in <dir>/model.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    net = init_micronet(seed, side=side, num_filters=num_filters,
                        num_classes=num_classes)
    save_params(net, directory / "model")
    # Recompute everything from the stored (float32-rounded) parameters so
    # the dataset is exactly reproducible from the files on disk.
    net = load_params(directory / "model")

    records = []
    for i in range(n):
        sid = f"s{i:04d}"
        # Round to the stored precision before deriving anything, so the
        # tensors on disk are exactly reproducible from the stored image.
        image = blob_image(rng, side).astype(np.float32).astype(np.float64)
        image_ref = f"{sid}_image.gct"
        write_tensor(image.astype(np.float32), directory / image_ref)

        trace = forward(net, image)
        activation_ref = f"{sid}_act.gct"
        write_tensor(trace.activations.astype(np.float32),
                     directory / activation_ref)
        gradient_refs = []
        for c in range(num_classes):
            ref = f"{sid}_grad{c}.gct"
            write_tensor(backward_class(net, image, c).astype(np.float32),
                         directory / ref)
            gradient_refs.append(ref)

        mask_ref = None
        if with_masks:
            mask_ref = f"{sid}_mask.png"
            save_mask(lesion_mask_from(image), directory / mask_ref)

        predicted = int(np.argmax(trace.probs))
        true_class = None
        if with_labels:
            if rng.random() < correct_rate:
                true_class = predicted
            else:
                others = [c for c in range(num_classes) if c != predicted]
                true_class = int(rng.choice(others))

        records.append(SampleRecord(
            id=sid,
            num_classes=num_classes,
            probs=tuple(float(p) for p in trace.probs),
            predicted_class=predicted,
            true_class=true_class,
            activation_ref=activation_ref,
            gradient_refs=tuple(gradient_refs),
            mask_ref=mask_ref,
            image_ref=image_ref,
        ))

    manifest_path = directory / "manifest.json"
    save_manifest(
        DatasetManifest(image_height=side, image_width=side, samples=records),
        manifest_path,
    )
    return manifest_path


def sensitivity_linked_reports(seed: int, n: int) -> list[AttrReport]:
    """Reports where correctness probability rises steeply with sensitivity.

    Sensitivity is uniform on [0.05, 0.95]; P(correct) follows a sigmoid
    centered at 0.5, so correct predictions concentrate at high coverage.
    Max probability is drawn independently, making it a weak signal by
    construction.
    """
    rng = np.random.default_rng(seed)
    reports = []
    for i in range(n):
        sens = float(rng.uniform(0.05, 0.95))
        p_correct = 0.05 + 0.9 / (1.0 + math.exp(-(sens - 0.5) / 0.05))
        correct = bool(rng.random() < p_correct)
        reports.append(AttrReport(
            id=f"f{i:05d}",
            att_sensitivity=sens,
            att_fpr=float(rng.uniform(0.05, 0.35)),
            mean_iou=0.5,
            lesion_ratio=0.3,
            predicted=1,
            truth=1 if correct else 0,
            max_prob=float(rng.uniform(0.34, 0.95)),
        ))
    return reports


_CURVE_X = np.tile([[-1.0, 2.0, -1.0]], (3, 1))
_CURVE_Y = _CURVE_X.T
_CHECKER = np.array([[1.0, -1.0, 1.0], [-1.0, 1.0, -1.0], [1.0, -1.0, 1.0]])


def oriented_net(rng: np.random.Generator, side: int = 16,
                 gain: float = 18.0, jitter: float = 0.05):
    """A micro net with curvature filters: confident on oscillatory input.

    Unlike a randomly initialized net, its logits track the image's
    band energy, so smoothing corruptions produce a clean monotone
    confidence decline — the behavior drift monitoring presumes of a
    trained classifier.
    """
    from .micronet import MicroNet

    conv_w = np.stack([_CURVE_X, _CURVE_Y, _CHECKER])
    conv_w = conv_w * (1 + jitter * rng.standard_normal(conv_w.shape))
    dense_w = gain * np.eye(3) * (1 + jitter * rng.standard_normal((3, 3)))
    return MicroNet(conv_w=conv_w, conv_b=np.zeros(3), dense_w=dense_w,
                    dense_b=np.zeros(3), side=side)


def textured_image(rng: np.random.Generator, side: int, kind: int,
                   frequency: int = 5) -> np.ndarray:
    """An oscillatory test image (vertical, horizontal, or product wave).

    The waves have zero derivative at the borders, so they are
    eigenfunctions of reflect-padded smoothing: blurring only attenuates
    them, never distorts them, and the attenuation grows strictly with
    the blur width.
    """
    j = np.arange(side)
    wave = np.cos(np.pi * frequency * j / (side - 1))
    if kind == 0:
        tex = np.tile(wave, (side, 1))
    elif kind == 1:
        tex = np.tile(wave[:, None], (1, side))
    else:
        tex = np.outer(wave, wave)
    return np.clip(0.5 + rng.uniform(0.2, 0.4) * tex, 0.0, 1.0)


def gate_samples(seed: int, n: int, level: float = 0.0):
    """Feature/correctness pairs with separated correct/incorrect clusters.

    The corruption *level* (blur percent) lowers base accuracy and nudges
    the correct cluster toward the incorrect one, mimicking degradation
    while keeping the two populations linearly separable.  Returns
    (features, corrects).
    """
    rng = np.random.default_rng(seed)
    base_acc = 0.85 - 0.003 * level
    features, corrects = [], []
    for i in range(n):
        correct = bool(rng.random() < base_acc)
        if correct:
            sens = rng.normal(0.80 - 0.0015 * level, 0.06)
            fpr = rng.normal(0.12 + 0.0008 * level, 0.04)
            maxp = rng.normal(0.82 - 0.002 * level, 0.05)
        else:
            sens = rng.normal(0.42, 0.08)
            fpr = rng.normal(0.32, 0.07)
            maxp = rng.normal(0.58, 0.07)
        sens = float(np.clip(sens, 0.0, 1.0))
        fpr = float(np.clip(fpr, 0.0, 1.0))
        maxp = float(np.clip(maxp, 0.45, 0.99))
        split = rng.uniform(0.3, 0.7)
        probs = np.array([maxp, (1 - maxp) * split, (1 - maxp) * (1 - split)])
        report = AttrReport(
            id=f"g{i:05d}",
            att_sensitivity=sens,
            att_fpr=fpr,
            mean_iou=0.5,
            lesion_ratio=0.3,
            predicted=0,
            truth=0 if correct else 1,
            max_prob=maxp,
        )
        features.append(build_features(report, probs))
        corrects.append(correct)
    return features, corrects
