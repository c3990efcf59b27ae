"""Command-line workflow for the two-stage monitoring procedure.

Subcommands: offline-fit (calibration + gate models from a labeled
dataset), runtime-gate (per-sample release/abstain decisions),
drift-check (runtime window vs calibration reference), corrupt (blurred
derived dataset), and render (class-map PNGs).

Exit codes: 0 success or no alarm, 1 usage/data error, 2 drift alarm.
All commands are deterministic under a fixed seed and config; rows and
samples are processed in sample-id order.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gate import (
    ABSTAIN,
    build_features,
    fit_gate,
    gate as apply_gate,
    load_gate,
    predict_select,
    save_gate,
)
from .gcapm import DEFAULT_TAU, default_palette, render, save_palette
from .metrics import write_reports_csv
from .micronet import backward_class, forward, load_params
from .monitor import (
    drift_check,
    fit_calibration,
    gaussian_blur,
    in_ci,
    load_calibration,
    save_calibration,
    save_drift_report,
)
from .pipeline import WEIGHT_MODES, analyze_record
from .tensorstore import (
    DatasetManifest,
    SampleRecord,
    load_manifest,
    read_tensor,
    save_manifest,
    write_tensor,
)

LOG = logging.getLogger("capguard.cli")

_METRIC_FIELDS = ("att_sensitivity", "att_fpr", "mean_iou", "lesion_ratio")
_MAX_UNDEFINED_FRACTION = 0.2
_PATH_KEYS = ("manifest", "out", "model", "calibration", "gate")
_NUMERIC_DEFAULTS = {
    "tau": DEFAULT_TAU,
    "gamma": 0.95,
    "level": 0.0,
    "bootstrap": 500,
    "seed": 0,
    "weights": "softmax",
}
_CONFIG_KEYS = _PATH_KEYS + tuple(_NUMERIC_DEFAULTS)

DECISION_HEADER = ("id", "predicted", "att_sensitivity", "att_fpr",
                   "in_ci", "select", "released")


class UsageError(Exception):
    """Bad flags, bad config, or unusable input data (exit code 1)."""


@dataclass(frozen=True)
class RunConfig:
    manifest: str | None
    out: str | None
    model: str | None
    calibration: str | None
    gate: str | None
    tau: float
    gamma: float
    level: float
    bootstrap: int
    seed: int
    weights: str


# ---------------------------------------------------------------------------
# Configuration: JSON file plus flag overrides; flags win.
# ---------------------------------------------------------------------------

def _resolve_config(args: argparse.Namespace) -> RunConfig:
    merged: dict = dict(_NUMERIC_DEFAULTS)
    merged.update({key: None for key in _PATH_KEYS})
    if args.config is not None:
        config_path = Path(args.config)
        if not config_path.is_file():
            raise UsageError(f"config file not found: {config_path}")
        try:
            doc = json.loads(config_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{config_path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise UsageError(f"{config_path}: config must be a JSON object")
        for key, value in doc.items():
            if key not in _CONFIG_KEYS:
                raise UsageError(f"{config_path}: unknown config key {key!r}")
            merged[key] = value
    for key in _CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value

    try:
        cfg = RunConfig(
            manifest=merged["manifest"],
            out=merged["out"],
            model=merged["model"],
            calibration=merged["calibration"],
            gate=merged["gate"],
            tau=float(merged["tau"]),
            gamma=float(merged["gamma"]),
            level=float(merged["level"]),
            bootstrap=int(merged["bootstrap"]),
            seed=int(merged["seed"]),
            weights=str(merged["weights"]),
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config value: {exc}") from exc

    if cfg.tau < 0:
        raise UsageError(f"tau must be >= 0, got {cfg.tau}")
    if not 0 < cfg.gamma < 1:
        raise UsageError(f"gamma must be in (0, 1), got {cfg.gamma}")
    if not 0 <= cfg.level <= 100:
        raise UsageError(f"level must be in [0, 100], got {cfg.level}")
    if cfg.bootstrap < 100:
        raise UsageError(f"bootstrap must be >= 100, got {cfg.bootstrap}")
    if cfg.weights not in WEIGHT_MODES:
        raise UsageError(f"weights must be one of {WEIGHT_MODES}")
    return cfg


def _require(cfg: RunConfig, key: str, *, directory: bool = False) -> Path:
    value = getattr(cfg, key)
    if value is None:
        raise UsageError(f"--{key} is required for this command")
    path = Path(value)
    exists = path.is_dir() if directory else path.is_file()
    if not exists:
        kind = "directory" if directory else "file"
        raise UsageError(f"{key} {kind} not found: {path}")
    return path


def _out_dir(cfg: RunConfig) -> Path:
    if cfg.out is None:
        raise UsageError("--out is required for this command")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sorted_samples(manifest: DatasetManifest) -> list[SampleRecord]:
    return sorted(manifest.samples, key=lambda rec: rec.id)


def _analyze_all(manifest: DatasetManifest, cfg: RunConfig):
    """(record, report) pairs in id order."""
    pairs = []
    for rec in _sorted_samples(manifest):
        report, _ = analyze_record(manifest, rec, tau=cfg.tau,
                                   weight_mode=cfg.weights)
        pairs.append((rec, report))
    return pairs


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ---------------------------------------------------------------------------
# Commands.
# ---------------------------------------------------------------------------

def cmd_offline_fit(cfg: RunConfig) -> int:
    manifest = load_manifest(_require(cfg, "manifest"))
    if not manifest.samples:
        raise UsageError("offline fit needs a nonempty manifest")
    if any(rec.true_class is None for rec in manifest.samples):
        raise UsageError("labels required for offline fit")

    pairs = _analyze_all(manifest, cfg)
    reports = [report for _, report in pairs]
    for name in _METRIC_FIELDS:
        undefined = sum(getattr(r, name) is None for r in reports) / len(reports)
        if undefined > _MAX_UNDEFINED_FRACTION:
            raise UsageError(
                f"{name} undefined for {undefined:.0%} of samples "
                f"(limit {_MAX_UNDEFINED_FRACTION:.0%}); refusing to calibrate"
            )

    out = _out_dir(cfg)
    written: list[Path] = []
    try:
        reports_path = out / "reports.csv"
        write_reports_csv(reports, reports_path)
        written.append(reports_path)

        calibration = fit_calibration(reports, gamma=cfg.gamma)
        calibration_path = out / "calibration.txt"
        save_calibration(calibration, calibration_path)
        written.append(calibration_path)

        features = [build_features(report, rec.probs) for rec, report in pairs]
        labels = [report.correct for report in reports]
        model = fit_gate(features, labels, seed=cfg.seed)
        gate_path = out / "gate.txt"
        save_gate(model, gate_path)
        written.append(gate_path)
    except Exception:
        for path in written:
            path.unlink(missing_ok=True)
        raise
    LOG.info("offline fit: %d reports -> %s", len(reports), out)
    return 0


def cmd_runtime_gate(cfg: RunConfig) -> int:
    manifest = load_manifest(_require(cfg, "manifest"))
    calibration = load_calibration(_require(cfg, "calibration"))
    model = load_gate(_require(cfg, "gate"))
    if manifest.samples:
        num_classes = manifest.samples[0].num_classes
        if len(model.weights) != num_classes + 3:
            raise UsageError(
                f"gate model expects {len(model.weights) - 3} classes, "
                f"manifest has {num_classes}"
            )

    out = _out_dir(cfg)
    rows = []
    abstained = 0
    for rec, report in _analyze_all(manifest, cfg):
        flag = in_ci(calibration, report)
        select = predict_select(model, build_features(report, rec.probs))
        decision = apply_gate(select, rec.predicted_class)
        released = ("HUMAN_REVIEW" if decision.released is ABSTAIN
                    else decision.released)
        abstained += decision.select == 0
        rows.append([
            rec.id,
            rec.predicted_class,
            _cell(report.att_sensitivity),
            _cell(report.att_fpr),
            _cell(flag),
            select,
            released,
        ])

    decisions_path = out / "decisions.csv"
    with open(decisions_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(DECISION_HEADER)
        writer.writerows(rows)
    LOG.info("runtime gate: %d samples, %d abstained -> %s",
             len(rows), abstained, decisions_path)
    return 0


def cmd_drift_check(cfg: RunConfig) -> int:
    manifest = load_manifest(_require(cfg, "manifest"))
    calibration = load_calibration(_require(cfg, "calibration"))
    reports = [report for _, report in _analyze_all(manifest, cfg)]
    drift = drift_check(calibration, reports, resamples=cfg.bootstrap,
                        seed=cfg.seed)
    out = _out_dir(cfg)
    save_drift_report(drift, out / "drift.json")
    if drift.alarm:
        LOG.warning("drift alarm: p-values %s", drift.pvalues)
        print("capguard: drift alarm", file=sys.stderr)
        return 2
    LOG.info("no drift: p-values %s", drift.pvalues)
    return 0


def cmd_corrupt(cfg: RunConfig) -> int:
    manifest = load_manifest(_require(cfg, "manifest"))
    net = load_params(_require(cfg, "model", directory=True))
    out = _out_dir(cfg)

    records = []
    for rec in _sorted_samples(manifest):
        if rec.image_ref is None:
            raise UsageError(f"{rec.id}: corrupt requires image tensors")
        image = read_tensor(manifest.resolve(rec.image_ref)).astype(np.float64)
        blurred = gaussian_blur(image, cfg.level)
        write_tensor(blurred.astype(np.float32), out / rec.image_ref)

        trace = forward(net, blurred)
        activation_ref = rec.activation_ref or f"{rec.id}_act.gct"
        write_tensor(trace.activations.astype(np.float32),
                     out / activation_ref)
        gradient_refs = rec.gradient_refs or tuple(
            f"{rec.id}_grad{c}.gct" for c in range(rec.num_classes)
        )
        for c, ref in enumerate(gradient_refs):
            write_tensor(backward_class(net, blurred, c).astype(np.float32),
                         out / ref)

        if rec.mask_ref is not None:
            shutil.copyfile(manifest.resolve(rec.mask_ref), out / rec.mask_ref)

        records.append(SampleRecord(
            id=rec.id,
            num_classes=rec.num_classes,
            probs=tuple(float(p) for p in trace.probs),
            predicted_class=int(np.argmax(trace.probs)),
            true_class=rec.true_class,
            activation_ref=activation_ref,
            gradient_refs=gradient_refs,
            mask_ref=rec.mask_ref,
            image_ref=rec.image_ref,
        ))

    save_manifest(
        DatasetManifest(image_height=manifest.image_height,
                        image_width=manifest.image_width,
                        samples=records),
        out / "manifest.json",
    )
    LOG.info("corrupt: level %s, %d samples -> %s",
             cfg.level, len(records), out)
    return 0


def cmd_render(cfg: RunConfig) -> int:
    manifest = load_manifest(_require(cfg, "manifest"))
    out = _out_dir(cfg)
    if not manifest.samples:
        LOG.info("render: empty manifest, nothing to do")
        return 0
    palette = default_palette(manifest.samples[0].num_classes)
    save_palette(palette, out / "palette.json")
    for rec in _sorted_samples(manifest):
        _, gmap = analyze_record(manifest, rec, tau=cfg.tau,
                                 weight_mode=cfg.weights)
        render(gmap, palette, out / f"{rec.id}.png")
    LOG.info("render: %d maps -> %s", len(manifest.samples), out)
    return 0


# ---------------------------------------------------------------------------
# Entry point.
# ---------------------------------------------------------------------------

_COMMANDS = (
    ("offline-fit", cmd_offline_fit,
     "fit calibration and gate models from a labeled manifest"),
    ("runtime-gate", cmd_runtime_gate,
     "emit per-sample release/abstain decisions"),
    ("drift-check", cmd_drift_check,
     "test a runtime window against the calibration reference"),
    ("corrupt", cmd_corrupt,
     "write a blur-corrupted derived dataset"),
    ("render", cmd_render,
     "render class-map PNGs with a palette legend"),
)


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; 2 is reserved for the
    drift alarm, so route usage problems through UsageError instead."""

    def error(self, message):
        raise UsageError(message)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="capguard",
                     description="safety monitoring for image classifiers")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, fn, help_text in _COMMANDS:
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config",
                         help="JSON config file; explicit flags override it")
        sub.add_argument("--manifest", help="dataset manifest path")
        sub.add_argument("--out", help="output directory")
        sub.add_argument("--model", help="model parameter directory")
        sub.add_argument("--calibration", help="fitted calibration file")
        sub.add_argument("--gate", help="fitted gate model file")
        sub.add_argument("--tau", type=float,
                         help="background threshold for map fusion")
        sub.add_argument("--gamma", type=float,
                         help="confidence-interval level")
        sub.add_argument("--level", type=float,
                         help="blur corruption level in percent")
        sub.add_argument("--bootstrap", type=int,
                         help="bootstrap resample count")
        sub.add_argument("--seed", type=int, help="random seed")
        sub.add_argument("--weights", choices=WEIGHT_MODES,
                         help="fusion weight mode")
        sub.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    level = getattr(logging, os.environ.get("CAPGUARD_LOG", "WARNING").upper(),
                    logging.WARNING)
    logging.basicConfig(
        level=level if isinstance(level, int) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _resolve_config(args)
        return args.fn(cfg)
    except UsageError as exc:
        print(f"capguard: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"capguard: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
