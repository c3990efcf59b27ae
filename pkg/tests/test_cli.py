"""Command-line workflow: subcommands, exit codes, determinism."""

import filecmp
import json
import subprocess
import sys

import numpy as np
import pytest

from capguard.cli import DECISION_HEADER, main
from capguard.gate import GateModel, save_gate
from capguard.monitor import CalibrationModel, save_calibration
from capguard.synth import make_micro_dataset
from capguard.tensorstore import (
    DatasetManifest,
    load_manifest,
    save_manifest,
)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One labeled 30-sample dataset plus a completed offline fit."""
    root = tmp_path_factory.mktemp("cli_ws")
    manifest = make_micro_dataset(root / "ds", seed=4, n=30, side=12)
    fit = root / "fit"
    assert main(["offline-fit", "--manifest", str(manifest),
                 "--out", str(fit)]) == 0
    return {
        "root": root,
        "ds": root / "ds",
        "manifest": manifest,
        "calibration": fit / "calibration.txt",
        "gate": fit / "gate.txt",
        "reports": fit / "reports.csv",
    }


def _permissive_gate(path, num_classes=3, bias=1.0):
    """A gate that always selects (or never, with negative bias)."""
    dim = num_classes + 3
    save_gate(GateModel(weights=np.zeros(dim), bias=bias, means=np.zeros(dim),
                        stds=np.ones(dim), lam=1e-3, epochs=1, seed=0), path)


def _impossible_calibration(path):
    """Bounds no defined metric can satisfy: every sample falls outside."""
    ref = np.linspace(0.1, 0.9, 25)
    save_calibration(CalibrationModel(
        gamma=0.95,
        bounds={"att_sensitivity": (-2.0, -1.0), "att_fpr": (-2.0, -1.0)},
        reference={"att_sensitivity": ref, "att_fpr": ref, "max_prob": ref},
        bandwidths={"att_sensitivity": 0.1, "att_fpr": 0.1, "max_prob": 0.1},
    ), path)


# ---------------------------------------------------------------------------
# offline-fit
# ---------------------------------------------------------------------------

def test_offline_fit_produces_all_artifacts(workspace):
    assert workspace["calibration"].is_file()
    assert workspace["gate"].is_file()
    lines = workspace["reports"].read_text().splitlines()
    assert len(lines) == 31  # header + one row per sample


def test_offline_fit_same_seed_byte_identical(workspace, tmp_path):
    assert main(["offline-fit", "--manifest", str(workspace["manifest"]),
                 "--out", str(tmp_path)]) == 0
    for name in ("calibration.txt", "gate.txt", "reports.csv"):
        assert filecmp.cmp(tmp_path / name, workspace["root"] / "fit" / name,
                           shallow=False)


def test_offline_fit_requires_labels(tmp_path, capsys):
    manifest = make_micro_dataset(tmp_path / "ds", seed=1, n=25, side=10,
                                  with_labels=False)
    code = main(["offline-fit", "--manifest", str(manifest),
                 "--out", str(tmp_path / "fit")])
    assert code == 1
    assert "labels required for offline fit" in capsys.readouterr().err


def test_offline_fit_refuses_undefined_metrics(tmp_path, capsys):
    manifest = make_micro_dataset(tmp_path / "ds", seed=1, n=25, side=10,
                                  with_masks=False)
    out = tmp_path / "fit"
    code = main(["offline-fit", "--manifest", str(manifest),
                 "--out", str(out)])
    assert code == 1
    assert "undefined" in capsys.readouterr().err
    # Refusal happens before anything lands in the output directory.
    assert not (out / "reports.csv").exists()


def test_offline_fit_removes_partial_outputs_on_late_failure(tmp_path, capsys):
    # 12 samples analyze cleanly but are too few to calibrate, so the fit
    # fails after reports.csv is written; the partial file must be gone.
    manifest = make_micro_dataset(tmp_path / "ds", seed=2, n=12, side=10)
    out = tmp_path / "fit"
    code = main(["offline-fit", "--manifest", str(manifest),
                 "--out", str(out)])
    assert code == 1
    assert "calibration" in capsys.readouterr().err
    assert not (out / "reports.csv").exists()
    assert not (out / "calibration.txt").exists()


def test_offline_fit_rejects_empty_manifest(tmp_path, capsys):
    path = tmp_path / "empty.json"
    save_manifest(DatasetManifest(image_height=4, image_width=4, samples=[]),
                  path)
    assert main(["offline-fit", "--manifest", str(path),
                 "--out", str(tmp_path / "fit")]) == 1
    assert "nonempty" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# runtime-gate
# ---------------------------------------------------------------------------

def test_runtime_gate_decision_csv_shape(workspace, tmp_path):
    assert main(["runtime-gate", "--manifest", str(workspace["manifest"]),
                 "--calibration", str(workspace["calibration"]),
                 "--gate", str(workspace["gate"]),
                 "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "decisions.csv").read_text().splitlines()
    assert lines[0] == ",".join(DECISION_HEADER)
    assert len(lines) == 31
    ids = [line.split(",")[0] for line in lines[1:]]
    assert ids == sorted(ids)


def test_runtime_gate_permissive_gate_never_abstains(workspace, tmp_path):
    gate_path = tmp_path / "gate.txt"
    _permissive_gate(gate_path, bias=1.0)
    assert main(["runtime-gate", "--manifest", str(workspace["manifest"]),
                 "--calibration", str(workspace["calibration"]),
                 "--gate", str(gate_path), "--out", str(tmp_path)]) == 0
    body = (tmp_path / "decisions.csv").read_text()
    assert "HUMAN_REVIEW" not in body


def test_runtime_gate_out_of_ci_abstainer_flags_human_review(workspace, tmp_path):
    gate_path = tmp_path / "gate.txt"
    calib_path = tmp_path / "calib.txt"
    _permissive_gate(gate_path, bias=-1.0)
    _impossible_calibration(calib_path)
    assert main(["runtime-gate", "--manifest", str(workspace["manifest"]),
                 "--calibration", str(calib_path),
                 "--gate", str(gate_path), "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "decisions.csv").read_text().splitlines()[1:]
    for row in rows:
        cells = row.split(",")
        assert cells[4] == "0"  # outside the (impossible) interval
        assert cells[-1] == "HUMAN_REVIEW"


def test_runtime_gate_empty_manifest_header_only(workspace, tmp_path):
    path = tmp_path / "empty.json"
    save_manifest(DatasetManifest(image_height=4, image_width=4, samples=[]),
                  path)
    assert main(["runtime-gate", "--manifest", str(path),
                 "--calibration", str(workspace["calibration"]),
                 "--gate", str(workspace["gate"]),
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "decisions.csv").read_text().splitlines() == [
        ",".join(DECISION_HEADER)
    ]


def test_runtime_gate_class_count_mismatch(workspace, tmp_path, capsys):
    gate_path = tmp_path / "gate.txt"
    _permissive_gate(gate_path, num_classes=5)
    assert main(["runtime-gate", "--manifest", str(workspace["manifest"]),
                 "--calibration", str(workspace["calibration"]),
                 "--gate", str(gate_path), "--out", str(tmp_path)]) == 1
    assert "classes" in capsys.readouterr().err


def test_runtime_gate_is_byte_deterministic(workspace, tmp_path):
    for sub in ("a", "b"):
        assert main(["runtime-gate", "--manifest", str(workspace["manifest"]),
                     "--calibration", str(workspace["calibration"]),
                     "--gate", str(workspace["gate"]),
                     "--out", str(tmp_path / sub)]) == 0
    assert filecmp.cmp(tmp_path / "a/decisions.csv",
                       tmp_path / "b/decisions.csv", shallow=False)


# ---------------------------------------------------------------------------
# drift-check
# ---------------------------------------------------------------------------

def test_drift_check_clean_window_no_alarm(workspace, tmp_path):
    code = main(["drift-check", "--manifest", str(workspace["manifest"]),
                 "--calibration", str(workspace["calibration"]),
                 "--out", str(tmp_path), "--bootstrap", "199"])
    assert code == 0
    assert (tmp_path / "drift.json").is_file()


def test_drift_check_blurred_window_alarms(workspace, tmp_path):
    blurred = tmp_path / "blur50"
    assert main(["corrupt", "--manifest", str(workspace["manifest"]),
                 "--model", str(workspace["ds"] / "model"),
                 "--out", str(blurred), "--level", "50"]) == 0
    code = main(["drift-check", "--manifest", str(blurred / "manifest.json"),
                 "--calibration", str(workspace["calibration"]),
                 "--out", str(tmp_path), "--bootstrap", "199"])
    assert code == 2
    drift = json.loads((tmp_path / "drift.json").read_text())
    assert drift["alarm"] is True


def test_drift_check_undersized_window_is_usage_error(tmp_path, capsys, workspace):
    manifest = make_micro_dataset(tmp_path / "tiny", seed=6, n=5, side=10)
    code = main(["drift-check", "--manifest", str(manifest),
                 "--calibration", str(workspace["calibration"]),
                 "--out", str(tmp_path), "--bootstrap", "199"])
    assert code == 1
    assert "window" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# corrupt
# ---------------------------------------------------------------------------

def test_corrupt_level_zero_bit_identical(workspace, tmp_path):
    out = tmp_path / "b0"
    assert main(["corrupt", "--manifest", str(workspace["manifest"]),
                 "--model", str(workspace["ds"] / "model"),
                 "--out", str(out), "--level", "0"]) == 0
    for path in sorted(out.iterdir()):
        assert filecmp.cmp(workspace["ds"] / path.name, path, shallow=False), \
            path.name


def test_corrupt_preserves_ids_across_levels(workspace, tmp_path):
    source = load_manifest(workspace["manifest"])
    source_ids = sorted(rec.id for rec in source.samples)
    for level in (10, 20, 30, 40, 50):
        out = tmp_path / f"b{level}"
        assert main(["corrupt", "--manifest", str(workspace["manifest"]),
                     "--model", str(workspace["ds"] / "model"),
                     "--out", str(out), "--level", str(level)]) == 0
        derived = load_manifest(out / "manifest.json")
        assert sorted(rec.id for rec in derived.samples) == source_ids


def test_corrupt_rejects_bad_level(workspace, tmp_path, capsys):
    assert main(["corrupt", "--manifest", str(workspace["manifest"]),
                 "--model", str(workspace["ds"] / "model"),
                 "--out", str(tmp_path), "--level", "150"]) == 1
    assert "level" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------

def test_render_writes_map_per_sample_with_legend(workspace, tmp_path):
    assert main(["render", "--manifest", str(workspace["manifest"]),
                 "--out", str(tmp_path)]) == 0
    pngs = sorted(tmp_path.glob("s*.png"))
    assert len(pngs) == 30
    for png in pngs:
        assert png.with_suffix(".png.legend.txt").exists() or \
            (png.parent / (png.name + ".legend.txt")).exists()
    assert (tmp_path / "palette.json").is_file()


def test_render_is_byte_deterministic(workspace, tmp_path):
    for sub in ("a", "b"):
        assert main(["render", "--manifest", str(workspace["manifest"]),
                     "--out", str(tmp_path / sub)]) == 0
    for png in sorted((tmp_path / "a").glob("*.png")):
        assert filecmp.cmp(png, tmp_path / "b" / png.name, shallow=False)


# ---------------------------------------------------------------------------
# Configuration and exit-code plumbing.
# ---------------------------------------------------------------------------

def test_config_file_supplies_values_and_flags_win(workspace, tmp_path):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({
        "manifest": str(tmp_path / "nowhere.json"),
        "out": str(tmp_path / "cfg_out"),
        "bootstrap": 199,
    }))
    # Config alone points at a missing manifest -> data error.
    assert main(["render", "--config", str(config)]) == 1
    # The flag overrides the config's bad manifest path.
    assert main(["render", "--config", str(config),
                 "--manifest", str(workspace["manifest"])]) == 0
    assert (tmp_path / "cfg_out" / "palette.json").is_file()


def test_unknown_config_key_rejected(tmp_path, capsys):
    config = tmp_path / "run.json"
    config.write_text('{"taus": 0.1}')
    assert main(["render", "--config", str(config)]) == 1
    assert "unknown config key" in capsys.readouterr().err


def test_numeric_range_validation(workspace, tmp_path, capsys):
    base = ["render", "--manifest", str(workspace["manifest"]),
            "--out", str(tmp_path)]
    assert main(base + ["--tau", "-0.5"]) == 1
    assert main(base + ["--gamma", "1.5"]) == 1
    assert main(["drift-check", "--manifest", str(workspace["manifest"]),
                 "--calibration", str(workspace["calibration"]),
                 "--out", str(tmp_path), "--bootstrap", "10"]) == 1
    capsys.readouterr()


def test_missing_required_flag_is_exit_one(capsys):
    assert main(["offline-fit"]) == 1
    assert "--manifest" in capsys.readouterr().err


def test_bad_subcommand_is_exit_one(capsys):
    assert main(["frobnicate"]) == 1
    capsys.readouterr()


def test_module_entry_point_runs():
    result = subprocess.run(
        [sys.executable, "-m", "capguard.cli", "--help"],
        capture_output=True, text=True,
    )
    assert result.returncode == 0
    assert "offline-fit" in result.stdout
