"""Per-sample analysis chain: tensors (stored or live) -> per-class CAMs
-> fused class map -> coverage metrics.

CAMs are upsampled to the manifest's evaluation resolution and then
min-max normalized before fusion, so every class map enters fuse() on a
commensurable [0,1] scale.
"""

from __future__ import annotations

import numpy as np

from .cam import alpha_weights, grad_cam, minmax_normalize, upsample_bilinear
from .gcapm import (
    DEFAULT_TAU,
    GcapmMap,
    argmax_map,
    fuse,
    predicted_region,
    uniform_weights,
)
from .metrics import (
    AttrReport,
    att_fpr,
    att_sensitivity,
    confusion_pixels,
    lesion_ratio,
    mean_iou,
)
from .micronet import MicroNet, backward_class, forward
from .tensorstore import DatasetManifest, SampleRecord, load_mask, read_tensor

WEIGHT_MODES = ("softmax", "uniform")


def class_cams(net: MicroNet, image: np.ndarray):
    """Raw per-class activation maps for a live micro net.

    Returns (cams [C, S-2, S-2], forward trace).
    """
    trace = forward(net, image)
    cams = [
        grad_cam(trace.activations,
                 alpha_weights(backward_class(net, image, c)))
        for c in range(net.num_classes)
    ]
    return np.stack(cams), trace


def fuse_sample(cams, probs, out_h: int, out_w: int,
                tau: float = DEFAULT_TAU,
                weight_mode: str = "softmax") -> GcapmMap:
    """Upsample, normalize, weight-fuse, and argmax the per-class maps."""
    if weight_mode not in WEIGHT_MODES:
        raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}")
    prepared = np.stack([
        minmax_normalize(upsample_bilinear(cam, out_h, out_w)) for cam in cams
    ])
    if weight_mode == "softmax":
        weights = np.asarray(probs, dtype=np.float64)
    else:
        weights = uniform_weights(len(cams))
    return argmax_map(fuse(prepared, weights, tau))


def _build_report(sample_id: str, gmap: GcapmMap, predicted: int,
                  truth, max_prob: float, mask) -> AttrReport:
    if mask is None:
        sens = fpr = miou = ratio = None
    else:
        if mask.shape != (gmap.height, gmap.width):
            raise ValueError(
                f"{sample_id}: mask {mask.shape} does not match map "
                f"{(gmap.height, gmap.width)}"
            )
        conf = confusion_pixels(predicted_region(gmap, predicted), mask)
        sens = att_sensitivity(conf)
        fpr = att_fpr(conf)
        miou = mean_iou(conf)
        ratio = lesion_ratio(mask)
    return AttrReport(
        id=sample_id,
        att_sensitivity=sens,
        att_fpr=fpr,
        mean_iou=miou,
        lesion_ratio=ratio,
        predicted=predicted,
        truth=truth,
        max_prob=max_prob,
    )


def analyze_image(net: MicroNet, image: np.ndarray, sample_id: str,
                  mask=None, truth=None, out_shape=None,
                  tau: float = DEFAULT_TAU, weight_mode: str = "softmax"):
    """Full chain for one in-memory image.  Returns (AttrReport, GcapmMap)."""
    cams, trace = class_cams(net, image)
    if out_shape is None:
        out_shape = mask.shape if mask is not None else image.shape
    predicted = int(np.argmax(trace.probs))
    gmap = fuse_sample(cams, trace.probs, out_shape[0], out_shape[1],
                       tau=tau, weight_mode=weight_mode)
    return (
        _build_report(sample_id, gmap, predicted, truth,
                      float(trace.probs.max()), mask),
        gmap,
    )


def analyze_record(manifest: DatasetManifest, rec: SampleRecord,
                   tau: float = DEFAULT_TAU, weight_mode: str = "softmax"):
    """Full chain for one manifest record backed by tensor files."""
    if rec.cam_refs is not None:
        cams = np.stack([
            read_tensor(manifest.resolve(ref)) for ref in rec.cam_refs
        ])
    else:
        acts = read_tensor(manifest.resolve(rec.activation_ref))
        cams = np.stack([
            grad_cam(acts, alpha_weights(read_tensor(manifest.resolve(ref))))
            for ref in rec.gradient_refs
        ])
    gmap = fuse_sample(cams, rec.probs, manifest.image_height,
                       manifest.image_width, tau=tau, weight_mode=weight_mode)
    mask = load_mask(manifest.resolve(rec.mask_ref)) if rec.mask_ref else None
    report = _build_report(rec.id, gmap, rec.predicted_class, rec.true_class,
                           rec.max_prob, mask)
    return report, gmap
