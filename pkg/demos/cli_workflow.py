"""
End-to-end command-line workflow
=================================

Walks the full monitoring loop through the installed console entry
point: fit calibration and gate models on a labeled dataset, emit
release/abstain decisions for a clean window, then corrupt the window
with blur and watch the drift check raise an alarm (exit code 2).
"""

import json
import subprocess
import sys
from pathlib import Path

from capguard.synth import make_micro_dataset

out_dir = Path(__file__).parent / "output" / "cli_workflow"
out_dir.mkdir(parents=True, exist_ok=True)


def run(*args, expect=0):
    cmd = [sys.executable, "-m", "capguard.cli", *map(str, args)]
    print("$", " ".join(cmd[2:]))
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.stderr:
        print(proc.stderr.strip())
    if proc.returncode != expect:
        raise SystemExit(f"expected exit {expect}, got {proc.returncode}")
    print(f"  -> exit {proc.returncode}")
    return proc


# ---- 1. build a labeled dataset and fit the offline models ----
data_dir = out_dir / "window"
make_micro_dataset(data_dir, seed=21, n=40, side=16)
fit_dir = out_dir / "fit"
run("offline-fit", "--manifest", data_dir / "manifest.json",
    "--out", fit_dir, "--gamma", "0.95", "--seed", "0")
print("  offline artifacts:", sorted(p.name for p in fit_dir.iterdir()))

# ---- 2. gate the window with the fitted models ----
gate_dir = out_dir / "gated"
run("runtime-gate", "--manifest", data_dir / "manifest.json",
    "--out", gate_dir,
    "--calibration", fit_dir / "calibration.txt",
    "--gate", fit_dir / "gate.txt")
rows = (gate_dir / "decisions.csv").read_text().splitlines()[1:]
held = sum(1 for line in rows if line.endswith("HUMAN_REVIEW"))
print(f"  {len(rows) - held}/{len(rows)} samples released, "
      f"{held} routed to human review")

# ---- 3. an undrifted window should not alarm ----
drift_dir = out_dir / "drift_clean"
run("drift-check", "--manifest", data_dir / "manifest.json",
    "--out", drift_dir, "--calibration", fit_dir / "calibration.txt",
    "--bootstrap", "200", "--seed", "0")

# ---- 4. blur the window heavily and the alarm should fire ----
blurred_dir = out_dir / "window_blurred"
run("corrupt", "--manifest", data_dir / "manifest.json",
    "--out", blurred_dir, "--model", data_dir / "model", "--level", "60")
drift_bad_dir = out_dir / "drift_blurred"
run("drift-check", "--manifest", blurred_dir / "manifest.json",
    "--out", drift_bad_dir, "--calibration", fit_dir / "calibration.txt",
    "--bootstrap", "200", "--seed", "0", expect=2)
verdict = json.loads((drift_bad_dir / "drift.json").read_text())
print(f"  alarm={verdict['alarm']} p-values="
      f"{ {k: round(v, 4) for k, v in verdict['pvalues'].items()} }")

print(f"\nall artifacts under {out_dir}")
