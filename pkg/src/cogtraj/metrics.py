"""Per-subscore and aggregate-score error metrics with fold roll-ups."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .dataio import ScoreManifest
from .exceptions import ParameterError, ShapeError, ValidationError

# below this variance a Pearson correlation is reported as undefined
PEARSON_MIN_VARIANCE = 1e-24


def rmse(pred, actual) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    actual = np.asarray(actual, dtype=np.float64).ravel()
    if pred.shape != actual.shape:
        raise ShapeError(f"length mismatch: {pred.size} vs {actual.size}")
    if pred.size == 0:
        raise ParameterError("rmse of empty vectors")
    return float(np.sqrt(np.mean((pred - actual) ** 2)))


def pearson(pred, actual) -> Optional[float]:
    """Pearson's r, or ``None`` when either side is (numerically) constant."""
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(actual, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ParameterError("pearson needs at least 2 points")
    dx = x - x.mean()
    dy = y - y.mean()
    vx = np.mean(dx * dx)
    vy = np.mean(dy * dy)
    if vx < PEARSON_MIN_VARIANCE or vy < PEARSON_MIN_VARIANCE:
        return None
    r = np.mean(dx * dy) / math.sqrt(vx * vy)
    return float(min(1.0, max(-1.0, r)))


def aggregate_score(normalized, manifest: ScoreManifest) -> np.ndarray:
    """Total raw score over the highest possible total.

    Each normalized subscore is mapped back to its raw range first. Accepts a
    single vector (returns a 0-d array) or rows of vectors.
    """
    normalized = np.asarray(normalized, dtype=np.float64)
    if normalized.shape[-1] != len(manifest):
        raise ShapeError(f"expected {len(manifest)} subscores, got {normalized.shape[-1]}")
    top = manifest.maxs.sum()
    if top <= 0:
        raise ValidationError("manifest maxima must sum to a positive total")
    raw = manifest.mins + normalized * (manifest.maxs - manifest.mins)
    return raw.sum(axis=-1) / top


@dataclass(frozen=True)
class Summary:
    mean: float
    se: float
    n: int
    degenerate: bool = False

    def to_json(self) -> dict:
        return {"mean": self.mean, "se": self.se, "n": self.n, "degenerate": self.degenerate}


def summarize(values: Sequence[float]) -> Summary:
    """Mean and standard error (sample std / sqrt(n)); one value gives SE 0 flagged degenerate."""
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        raise ParameterError("summarize needs at least one value")
    mean = float(vals.mean())
    if vals.size == 1:
        return Summary(mean, 0.0, 1, degenerate=True)
    return Summary(mean, float(vals.std(ddof=1) / math.sqrt(vals.size)), int(vals.size))


@dataclass
class MetricsReport:
    subscores: List[str]
    subscore_cells: List[dict] = field(default_factory=list)
    aggregate_cells: List[dict] = field(default_factory=list)
    subscore_summary: Dict[str, Dict[str, Summary]] = field(default_factory=dict)
    aggregate_rmse_summary: Dict[str, Summary] = field(default_factory=dict)
    aggregate_pearson_summary: Dict[str, Optional[Summary]] = field(default_factory=dict)
    pearson_undefined: Dict[str, int] = field(default_factory=dict)
    counts: Dict[str, Dict[str, int]] = field(default_factory=dict)

    def summary_json(self, metadata: Optional[dict] = None) -> dict:
        def enc(s):
            return None if s is None else s.to_json()
        return {
            "metadata": dict(metadata or {}, error_bars="standard error across folds"),
            "subscore_rmse": {name: {t: enc(s) for t, s in by_t.items()}
                              for name, by_t in self.subscore_summary.items()},
            "aggregate_rmse": {t: enc(s) for t, s in self.aggregate_rmse_summary.items()},
            "aggregate_pearson": {t: enc(s) for t, s in self.aggregate_pearson_summary.items()},
            "aggregate_pearson_undefined_cells": self.pearson_undefined,
            "counts": self.counts,
        }


def _rollup_key(interval) -> str:
    return "all" if interval == "all" else str(int(interval))


def compute_cells(predictions, actuals, intervals, fold_ids, manifest: ScoreManifest):
    """Per-(interval, fold) RMSE and Pearson cells; the building block of a report."""
    pred = np.asarray(predictions, dtype=np.float64)
    act = np.asarray(actuals, dtype=np.float64)
    intervals = np.asarray(intervals).astype(np.int64)
    folds = np.asarray(fold_ids).astype(np.int64)
    if pred.shape != act.shape or pred.ndim != 2 or pred.shape[1] != len(manifest):
        raise ShapeError(f"predictions {pred.shape} and actuals {act.shape} must both be "
                         f"(N, {len(manifest)})")
    if not len(intervals) == len(folds) == len(pred):
        raise ShapeError("intervals and fold ids must have one entry per prediction")
    agg_pred = aggregate_score(pred, manifest)
    agg_act = aggregate_score(act, manifest)
    sub_cells, agg_cells = [], []
    for t in sorted(set(intervals.tolist())):
        for f in sorted(set(folds.tolist())):
            sel = (intervals == t) & (folds == f)
            count = int(sel.sum())
            if count == 0:
                continue
            for j, name in enumerate(manifest.names):
                sub_cells.append({"subscore": name, "interval": t, "fold": f,
                                  "rmse": rmse(pred[sel, j], act[sel, j]), "count": count})
            r = pearson(agg_pred[sel], agg_act[sel]) if count >= 2 else None
            agg_cells.append({"interval": t, "fold": f, "rmse": rmse(agg_pred[sel], agg_act[sel]),
                              "pearson": r, "defined": r is not None, "count": count})
    return sub_cells, agg_cells


def report_from_cells(sub_cells: List[dict], agg_cells: List[dict],
                      manifest: ScoreManifest) -> MetricsReport:
    """Roll cells up into fold means and standard errors, per interval and overall.

    The overall entry for a fold first averages that fold's cells over
    intervals, then summarizes across folds.
    """
    rep = MetricsReport(manifest.names, list(sub_cells), list(agg_cells))
    intervals = sorted({c["interval"] for c in agg_cells})
    folds = sorted({c["fold"] for c in agg_cells})

    def per_fold(cells, value_key, keep=lambda c: True):
        by_fold: Dict[int, List[float]] = {}
        for c in cells:
            if keep(c):
                by_fold.setdefault(c["fold"], []).append(c[value_key])
        return [float(np.mean(by_fold[f])) for f in sorted(by_fold)]

    for name in manifest.names:
        cells = [c for c in sub_cells if c["subscore"] == name]
        rep.subscore_summary[name] = {}
        for t in intervals:
            vals = [c["rmse"] for c in cells if c["interval"] == t]
            if vals:
                rep.subscore_summary[name][_rollup_key(t)] = summarize(vals)
        if cells:
            rep.subscore_summary[name]["all"] = summarize(per_fold(cells, "rmse"))

    for t in intervals + ["all"]:
        cells = agg_cells if t == "all" else [c for c in agg_cells if c["interval"] == t]
        key = _rollup_key(t)
        if t == "all":
            rep.aggregate_rmse_summary[key] = summarize(per_fold(cells, "rmse"))
            rvals = per_fold(cells, "pearson", lambda c: c["defined"])
        else:
            rep.aggregate_rmse_summary[key] = summarize([c["rmse"] for c in cells])
            rvals = [c["pearson"] for c in cells if c["defined"]]
        rep.pearson_undefined[key] = sum(1 for c in cells if not c["defined"])
        rep.aggregate_pearson_summary[key] = summarize(rvals) if rvals else None

    for c in agg_cells:
        rep.counts.setdefault(str(c["fold"]), {})[str(c["interval"])] = c["count"]
    del folds
    return rep


def build_report(predictions, actuals, intervals, fold_ids,
                 manifest: ScoreManifest) -> MetricsReport:
    sub_cells, agg_cells = compute_cells(predictions, actuals, intervals, fold_ids, manifest)
    return report_from_cells(sub_cells, agg_cells, manifest)


# -- files --------------------------------------------------------------------

SUBSCORE_CSV = "rmse_by_subscore_interval.csv"
AGGREGATE_CSV = "aggregate_by_interval.csv"
SUMMARY_JSON = "summary.json"


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def write_report_files(report: MetricsReport, out_dir, metadata: Optional[dict] = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / SUBSCORE_CSV, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subscore", "interval", "fold", "rmse"])
        for c in report.subscore_cells:
            w.writerow([c["subscore"], c["interval"], c["fold"], _fmt(c["rmse"])])
    with open(out / AGGREGATE_CSV, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["interval", "fold", "rmse", "pearson", "defined", "count"])
        for c in report.aggregate_cells:
            w.writerow([c["interval"], c["fold"], _fmt(c["rmse"]), _fmt(c["pearson"]),
                        int(c["defined"]), c["count"]])
    (out / SUMMARY_JSON).write_text(
        json.dumps(report.summary_json(metadata), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")


def read_cells(fold_dir):
    """Read back the two CSVs written by :func:`write_report_files`."""
    fold_dir = Path(fold_dir)
    sub_cells, agg_cells = [], []
    with open(fold_dir / SUBSCORE_CSV, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            sub_cells.append({"subscore": row["subscore"], "interval": int(row["interval"]),
                              "fold": int(row["fold"]), "rmse": float(row["rmse"])})
    with open(fold_dir / AGGREGATE_CSV, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            defined = row["defined"] == "1"
            agg_cells.append({"interval": int(row["interval"]), "fold": int(row["fold"]),
                              "rmse": float(row["rmse"]),
                              "pearson": float(row["pearson"]) if defined else None,
                              "defined": defined, "count": int(row.get("count") or 0)})
    return sub_cells, agg_cells


def format_table(report: MetricsReport) -> str:
    """Aligned text table: subscore RMSE per interval, then aggregate RMSE and Pearson."""
    keys = [k for k in report.aggregate_rmse_summary if k != "all"] + ["all"]
    width = max(14, max(len(n) for n in report.subscores) + 2)
    head = "".ljust(width) + "".join(f"{('t=' + k) if k != 'all' else 'all':>18}" for k in keys)

    def cell(s):
        return f"{'n/a':>18}" if s is None else f"{s.mean:>9.4f} ± {s.se:<6.4f}"

    lines = ["RMSE of normalized subscores (mean ± SE across folds)", head]
    for name in report.subscores:
        by_t = report.subscore_summary.get(name, {})
        lines.append(name.ljust(width) + "".join(cell(by_t.get(k)) for k in keys))
    lines += ["", "Aggregate score", head,
              "rmse".ljust(width) + "".join(cell(report.aggregate_rmse_summary.get(k)) for k in keys),
              "pearson".ljust(width) + "".join(cell(report.aggregate_pearson_summary.get(k))
                                               for k in keys)]
    return "\n".join(lines)
