"""Command-line front end for the exporter.

Flags mirror the export specification one to one: a saved torch module, the
target layer name, the class count, a preprocessing choice, and an output
directory, followed by the image files to export.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from capguard_exporter.hookdump import (
    ExportError,
    ExportSpec,
    PREPROCESSORS,
    export_dataset,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capguard-export",
        description="dump layer activations and per-class logit gradients "
                    "into a monitoring dataset",
    )
    parser.add_argument("--model", required=True, type=Path,
                        help="torch.save()d module (pickled, trusted source)")
    parser.add_argument("--layer", required=True,
                        help="named module whose output is the target layer")
    parser.add_argument("--classes", required=True, type=int,
                        help="number of classes in the model head")
    parser.add_argument("--preprocess", default="tensor",
                        choices=sorted(PREPROCESSORS),
                        help="how image files become model inputs")
    parser.add_argument("--out", required=True, type=Path,
                        help="output directory for tensors and manifest")
    parser.add_argument("images", nargs="+", type=Path,
                        help="image files to export")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        model = torch.load(args.model, weights_only=False)
        if not isinstance(model, torch.nn.Module):
            raise ExportError(
                f"{args.model} does not contain a torch module "
                f"(got {type(model).__name__})"
            )
        spec = ExportSpec(model=model, layer=args.layer,
                          num_classes=args.classes, out_dir=args.out,
                          preprocess=args.preprocess)
        manifest_path = export_dataset(spec, args.images)
    except (ExportError, ValueError, OSError) as exc:
        print(f"capguard-export: {exc}", file=sys.stderr)
        return 1
    print(manifest_path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
