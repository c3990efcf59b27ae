"""Fusion of per-class activation maps into a global probabilistic map.

Each pixel gets a weighted score per class, score_c = w_c * cam_c(h,w);
pixels whose best score stays under a background threshold carry no class,
all others get the normalized score vector P(c|cam(h,w)) and a winning
class index (lowest index on ties).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

BACKGROUND = -1

DEFAULT_TAU = 0.05


@dataclass(frozen=True)
class ProbField:
    """Per-pixel class probabilities plus a foreground flag.

    probs has shape [H, W, C]; rows at background pixels are all zero.
    """

    probs: np.ndarray
    foreground: np.ndarray

    @property
    def height(self) -> int:
        return self.probs.shape[0]

    @property
    def width(self) -> int:
        return self.probs.shape[1]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[2]


@dataclass(frozen=True)
class GcapmMap:
    """Per-pixel winning class index; BACKGROUND (-1) where no class won."""

    classes: np.ndarray  # [H, W] int32
    num_classes: int

    @property
    def height(self) -> int:
        return self.classes.shape[0]

    @property
    def width(self) -> int:
        return self.classes.shape[1]


def uniform_weights(num_classes: int) -> np.ndarray:
    return np.full(num_classes, 1.0 / num_classes)


def fuse(cams, weights, tau: float = DEFAULT_TAU) -> ProbField:
    """Combine C normalized maps into a per-pixel class-probability field.

    Weights are normalized to sum to 1 internally, so any positive rescaling
    of the weight vector leaves the result unchanged.  A pixel is background
    when its best weighted score falls below tau, or when every score is
    exactly zero (there is no distribution to normalize).
    """
    cams = np.asarray(cams, dtype=np.float64)
    if cams.ndim != 3:
        raise ValueError("expected C stacked maps of identical dimensions")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (cams.shape[0],):
        raise ValueError(
            f"{len(weights)} weights for {cams.shape[0]} class maps"
        )
    if (weights < 0).any():
        raise ValueError("class weights must be nonnegative")
    total_w = weights.sum()
    if total_w <= 0:
        raise ValueError("class weights must not all be zero")
    if tau < 0:
        raise ValueError("background threshold must be >= 0")
    if cams.min() < 0 or cams.max() > 1:
        raise ValueError("maps must be normalized to [0, 1] before fusion")

    scores = (weights / total_w)[:, None, None] * cams  # [C, H, W]
    pixel_sum = scores.sum(axis=0)
    foreground = (scores.max(axis=0) >= tau) & (pixel_sum > 0)

    probs = np.zeros(cams.shape[1:] + (cams.shape[0],))
    fg = foreground.nonzero()
    probs[fg] = scores[:, fg[0], fg[1]].T / pixel_sum[fg][:, None]
    return ProbField(probs=probs, foreground=foreground)


def argmax_map(field: ProbField) -> GcapmMap:
    """Winning class per pixel (lowest index on ties); background preserved."""
    classes = np.argmax(field.probs, axis=2).astype(np.int32)
    classes[~field.foreground] = BACKGROUND
    return GcapmMap(classes=classes, num_classes=field.num_classes)


def predicted_region(gmap: GcapmMap, predicted_class: int) -> np.ndarray:
    """Boolean mask of pixels the map assigns to *predicted_class*."""
    if not 0 <= predicted_class < gmap.num_classes:
        raise ValueError(
            f"class {predicted_class} out of range [0, {gmap.num_classes})"
        )
    return gmap.classes == predicted_class


# ---------------------------------------------------------------------------
# Rendering.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Palette:
    background: tuple[int, int, int]
    classes: tuple[tuple[int, int, int], ...]


# Distinct, readable colors for small class counts; cycled beyond 8.
_BASE_COLORS = (
    (230, 25, 75), (60, 180, 75), (0, 130, 200), (255, 225, 25),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
)


def default_palette(num_classes: int) -> Palette:
    colors = tuple(_BASE_COLORS[c % len(_BASE_COLORS)] for c in range(num_classes))
    return Palette(background=(0, 0, 0), classes=colors)


def save_palette(palette: Palette, path) -> None:
    doc = {
        "background": list(palette.background),
        "classes": [list(c) for c in palette.classes],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_palette(path) -> Palette:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    background = tuple(int(v) for v in doc["background"])
    classes = tuple(tuple(int(v) for v in c) for c in doc["classes"])
    for rgb in (background, *classes):
        if len(rgb) != 3 or any(not 0 <= v <= 255 for v in rgb):
            raise ValueError(f"{path}: invalid RGB triple {rgb}")
    return Palette(background=background, classes=classes)


def render(gmap: GcapmMap, palette: Palette, png_path) -> None:
    """Write the class map as an indexed-color PNG plus a legend sidecar.

    The sidecar is `<png_path>.legend.txt`, one line per color.  Output
    bytes depend only on the map and palette.
    """
    if len(palette.classes) < gmap.num_classes:
        raise ValueError(
            f"palette has {len(palette.classes)} colors for "
            f"{gmap.num_classes} classes"
        )
    png_path = Path(png_path)
    img = np.empty((gmap.height, gmap.width, 3), dtype=np.uint8)
    img[:] = palette.background
    for c in range(gmap.num_classes):
        img[gmap.classes == c] = palette.classes[c]
    Image.fromarray(img, mode="RGB").save(png_path, format="PNG")

    lines = [f"background: #{bytes(palette.background).hex()}"]
    lines += [
        f"class {c}: #{bytes(palette.classes[c]).hex()}"
        for c in range(gmap.num_classes)
    ]
    legend_path = png_path.with_name(png_path.name + ".legend.txt")
    legend_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
