"""Delimited/JSON serialization for eval reports and feature tables."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .evaluation import EvalReport, FeatureTable


def write_report(report, path_stem):
    """EvalReport -> <stem>.json and <stem>.csv (columns: class, AP)."""
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    json_path = stem.with_suffix(".json")
    json_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    csv_path = stem.with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "AP"])
        for c in sorted(report.per_class_ap):
            writer.writerow([c, f"{report.per_class_ap[c]:.6f}"])
        writer.writerow(["mAP", f"{report.map_score:.6f}"])
    return json_path, csv_path


def read_report(path):
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def write_forgetting_report(result, path_stem):
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    json_path = stem.with_suffix(".json")
    json_path.write_text(json.dumps(result, indent=2, sort_keys=True))
    csv_path = stem.with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "delta_AP"])
        for c in sorted(result["old_class_deltas"]):
            writer.writerow([c, f"{result['old_class_deltas'][c]:.6f}"])
        writer.writerow(["retention", f"{result['retention']:.6f}"])
        if result["new_map"] is not None:
            writer.writerow(["new_map", f"{result['new_map']:.6f}"])
    return json_path, csv_path


def write_feature_table(table, path):
    """FeatureTable -> CSV with columns class_id, kind, c0..c{C-1}."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dim = len(table.rows[0][2]) if table.rows else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "kind"] + [f"c{i}" for i in range(dim)])
        for class_id, kind, vec in table.rows:
            writer.writerow([class_id, kind] + [f"{v:.8g}" for v in vec])
    return path


def read_feature_table(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim = len(header) - 2
        for rec in reader:
            rows.append((int(rec[0]), rec[1], np.array([float(v) for v in rec[2 : 2 + dim]])))
    return FeatureTable(rows=rows, meta={"source": str(path)})
