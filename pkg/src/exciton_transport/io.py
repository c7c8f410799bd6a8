"""Bit-stable JSON/CSV output and run manifests.

Floats are written with 17 significant digits, enough to round-trip every
double exactly.  NaN and infinities are never written: JSON uses ``null`` and
CSV cells use the sentinel ``-1`` (all stored quantities are otherwise
non-negative).
"""

from __future__ import annotations

import csv
import json
import math
import os
import platform
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .sketch import Histogram1D, Histogram2D

CSV_SENTINEL = "-1"


def fmt(x) -> str:
    x = float(x)
    if not math.isfinite(x):
        return CSV_SENTINEL
    return format(x, ".17g")


def _encode(obj, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None or isinstance(obj, bool):
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return format(x, ".17g") if math.isfinite(x) else "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_encode(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in seq) + "]"
        return "[\n" + ",\n".join(pad + _encode(v, indent, level + 1) for v in seq) + "\n" + end + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(obj, indent: int = 2) -> str:
    return _encode(obj, indent, 0) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(dumps(obj), encoding="utf-8")
    return path


# --------------------------------------------------------------------------
# histograms and records


def write_histogram_csv(path, hist: Histogram1D) -> Path:
    path = Path(path)
    edges = hist.edges
    dens = hist.density()
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "count", "density"])
        for i in range(hist.bins):
            w.writerow([fmt(edges[i]), fmt(edges[i + 1]), int(hist.counts[i]), fmt(dens[i])])
    return path


def read_histogram_csv(path, underflow: int = 0, overflow: int = 0) -> Histogram1D:
    with Path(path).open("r", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty histogram file")
    lo = float(rows[0]["bin_left"])
    hi = float(rows[-1]["bin_right"])
    counts = np.array([int(r["count"]) for r in rows], dtype=np.int64)
    return Histogram1D(len(rows), lo, hi, counts, underflow, overflow)


def write_conditional_csv(path, hist: Histogram2D) -> Path:
    """Column-normalised conditional density; empty x columns carry the sentinel."""
    path = Path(path)
    mass, empty = hist.column_normalized()
    dy = (hist.y_range[1] - hist.y_range[0]) / hist.y_bins
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x_bin", "y_bin", "count", "density"])
        for i in range(hist.x_bins):
            for j in range(hist.y_bins):
                dens = CSV_SENTINEL if empty[i] else fmt(mass[i, j] / dy)
                w.writerow([i, j, int(hist.counts[i, j]), dens])
    return path


def write_records_csv(path, records: dict) -> Path:
    path = Path(path)
    cols = list(records)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        n = len(records[cols[0]]) if cols else 0
        for i in range(n):
            w.writerow([int(records[c][i]) if c == "index" else fmt(records[c][i]) for c in cols])
    return path


def read_records_csv(path) -> dict:
    with Path(path).open("r", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    out = {}
    for k, name in enumerate(header):
        col = [r[k] for r in rows]
        if name == "index":
            out[name] = np.array([int(v) for v in col], dtype=np.int64)
        else:
            vals = np.array([float(v) for v in col])
            vals[vals == -1.0] = np.nan
            out[name] = vals
    return out


def write_trajectory_csv(path, trajectory) -> Path:
    from .dynamics import site_populations

    path = Path(path)
    n = len(site_populations(trajectory[0][1]))
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time"] + [f"p_site_{j}" for j in range(n)])
        for t, state in trajectory:
            w.writerow([fmt(t)] + [fmt(p) for p in site_populations(state)])
    return path


# --------------------------------------------------------------------------
# manifest and campaign report


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(epoch) if epoch else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def manifest(subcommand: str, config: dict, seed, convention: str | None = None,
             estimator: str | None = None, started: str | None = None) -> dict:
    return {
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "code_version": __version__,
        "dephasing_convention": convention,
        "entanglement_estimator": estimator,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "started_utc": started or _timestamp(),
        "finished_utc": _timestamp(),
    }


def summary_schema() -> dict:
    text = resources.files("exciton_transport").joinpath("schemas/summary.schema.json").read_text()
    return json.loads(text)


def write_report(result, out_dir, run_manifest: dict) -> dict:
    """Write manifest, summary and CSVs of a campaign; returns ``{name: path}``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    files = {}
    summary = result.summary()
    summary["histograms"] = {
        k: {"bins": h.bins, "lo": h.lo, "hi": h.hi, "total": h.total,
            "underflow": h.underflow, "overflow": h.overflow, "file": f"hist_{k}.csv"}
        for k, h in result.hists.items()
    }
    summary["config"] = result.config.to_dict()
    files["manifest"] = write_json(out / "manifest.json", run_manifest)
    files["summary"] = write_json(out / "summary.json", summary)
    for k, h in result.hists.items():
        files[f"hist_{k}"] = write_histogram_csv(out / f"hist_{k}.csv", h)
    for k, h in result.cond.items():
        files[f"cond_{k}"] = write_conditional_csv(out / f"cond_{k}.csv", h)
    files["records"] = write_records_csv(out / "records.csv", result.records)
    return files
