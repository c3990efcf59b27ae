"""
Rendering fused class-activation maps
======================================

Builds a tiny synthetic dataset, runs the analysis pipeline on every
sample, and writes one indexed PNG per image showing which class owns
each pixel (background pixels use the reserved entry of the palette).
"""

from pathlib import Path

import numpy as np

from capguard.gcapm import default_palette, render, save_palette
from capguard.pipeline import analyze_record
from capguard.synth import make_micro_dataset
from capguard.tensorstore import load_manifest

out_dir = Path(__file__).parent / "output" / "render_maps"
out_dir.mkdir(parents=True, exist_ok=True)

# ---- build a dataset of Gaussian-blob images with a random micro net ----
data_dir = out_dir / "dataset"
manifest_path = make_micro_dataset(data_dir, seed=7, n=12, side=16)
manifest = load_manifest(manifest_path)
num_classes = len(manifest.samples[0].probs)
print(f"dataset: {len(manifest.samples)} samples, "
      f"{manifest.image_height}x{manifest.image_width}, "
      f"{num_classes} classes")

# ---- analyze each record and render its class map ----
palette = default_palette(num_classes)
save_palette(palette, out_dir / "palette.json")

print(f"{'id':<8} {'pred':>4} {'true':>4} {'sens':>6} {'fpr':>6} pixels-per-class")
for rec in manifest.samples:
    report, gmap = analyze_record(manifest, rec)
    render(gmap, palette, out_dir / f"{rec.id}.png")
    counts = np.bincount(gmap.classes[gmap.classes >= 0].ravel(),
                         minlength=gmap.num_classes)
    sens = "-" if report.att_sensitivity is None else f"{report.att_sensitivity:.3f}"
    fpr = "-" if report.att_fpr is None else f"{report.att_fpr:.3f}"
    print(f"{rec.id:<8} {report.predicted:>4} {report.truth:>4} "
          f"{sens:>6} {fpr:>6} {counts.tolist()}")

print(f"\nwrote {len(manifest.samples)} PNGs and palette.json to {out_dir}")
