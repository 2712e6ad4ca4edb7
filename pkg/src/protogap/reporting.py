"""Artifact writers: stable JSON, CSV, plot-ready series, run manifests.

Everything under runs/<run-id>/ is byte-deterministic for identical
inputs except the manifest timestamp, so reruns can be diffed.
"""

from __future__ import annotations

import csv
import json
import math
import time
from pathlib import Path

from .metrics import DistanceMatrix

PLOTDATA_HEADER = ("series", "x", "y", "value")


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def sanitize_nonfinite(obj):
    """Replace NaN/inf floats with null, recursively; NaN is not valid JSON."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: sanitize_nonfinite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [sanitize_nonfinite(v) for v in obj]
    return obj


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunWriter:
    """Collects artifacts for one run directory and finishes with a manifest."""

    def __init__(self, out_dir, run_id: str, command: str, argv=(), version: str = ""):
        self.dir = Path(out_dir) / run_id
        self.dir.mkdir(parents=True, exist_ok=True)
        self.run_id = run_id
        self.command = command
        self.argv = list(argv)
        self.version = version
        self.files: list[str] = []
        self.checkpoint_hashes: dict[str, str] = {}
        self.contract_ids: list[str] = []

    def note_checkpoint(self, path, payload_hash: str) -> None:
        self.checkpoint_hashes[str(path)] = payload_hash

    def note_contract(self, contract_id: str) -> None:
        if contract_id not in self.contract_ids:
            self.contract_ids.append(contract_id)

    def write_json(self, name: str, obj) -> Path:
        path = self.dir / name
        path.write_text(dump_json(obj), encoding="utf-8")
        self.files.append(name)
        return path

    def write_csv(self, name: str, header, rows) -> Path:
        path = self.dir / name
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_fmt(v) for v in row])
        self.files.append(name)
        return path

    def write_plotdata(self, name: str, rows) -> Path:
        return self.write_csv(name, PLOTDATA_HEADER, rows)

    def finish(self) -> Path:
        manifest = {
            "run_id": self.run_id,
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "command": self.command,
            "argv": self.argv,
            "tool_version": self.version,
            "checkpoint_hashes": self.checkpoint_hashes,
            "contract_ids": self.contract_ids,
            "files": sorted(self.files),
        }
        path = self.dir / "manifest.json"
        path.write_text(dump_json(manifest), encoding="utf-8")
        return path


def heatmap_plotdata(matrix: DistanceMatrix, n_layers: int):
    """L x L grid rows; self-pairs are 0, uncomputed or flagged cells blank."""
    lookup = {}
    for r in matrix.records:
        lookup[(r.i, r.j)] = None if r.flagged else r.d_max
    rows = []
    for i in range(n_layers):
        for j in range(n_layers):
            if i == j:
                value = 0.0
            else:
                value = lookup.get((min(i, j), max(i, j)), None)
            rows.append(("heatmap", i, j, value))
    return rows


def adjacent_profile_plotdata(matrix: DistanceMatrix):
    """One row per adjacent pair (i, i+1), x = i, y = distance."""
    rows = []
    for r in matrix.records:
        if r.j - r.i == 1:
            rows.append(("adjacent_profile", r.i, None if r.flagged else r.d_max, None))
    return rows


def gap_vs_depth_plotdata(gap_rows):
    """Per-pair protocol gap against the pair's lower layer index."""
    return [
        ("gap_vs_depth", row["i"], row["gap"], None)
        for row in gap_rows
        if row["gap"] is not None
    ]
