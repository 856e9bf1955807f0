"""Volumes, score manifests, dataset tables and stratified folds.

On-disk formats
---------------
Volume
    ``<name>.vol`` holds raw little-endian float32 voxels in row-major
    (D, H, W) order; ``<name>.vol.json`` next to it holds
    ``{"dims": [D, H, W], "voxel_mm": [x, y, z], "subject_id": ...}``.
Manifest
    JSON ``{"version": str, "subscores": [{"name", "min", "max"}, ...]}``,
    in output order.
Dataset table
    UTF-8 CSV with header ``subject_id, volume_path, interval_months`` and
    then one raw-score column per manifest entry, in manifest order.
Fold plan
    JSON ``{"seed": int, "k": int, "assignment": [fold id per sample]}``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ParameterError, ValidationError, VolumeFormatError

logger = logging.getLogger(__name__)

INTERVAL_GRID = (0, 6, 12, 18, 24, 30, 36)
TABLE_FIXED_COLUMNS = ("subject_id", "volume_path", "interval_months")


# -- manifest -----------------------------------------------------------------


@dataclass(frozen=True)
class ScoreRange:
    name: str
    raw_min: float
    raw_max: float


@dataclass(frozen=True)
class ScoreManifest:
    entries: Tuple[ScoreRange, ...]
    version: str = "1"

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            dup = [n for n, c in Counter(names).items() if c > 1]
            raise ValidationError(f"duplicate subscore names in manifest: {dup}")
        for e in self.entries:
            if not (math.isfinite(e.raw_min) and math.isfinite(e.raw_max)) or e.raw_min >= e.raw_max:
                raise ValidationError(
                    f"subscore {e.name!r}: need finite raw_min < raw_max, got [{e.raw_min}, {e.raw_max}]")

    def __len__(self):
        return len(self.entries)

    @property
    def names(self) -> List[str]:
        return [e.name for e in self.entries]

    @property
    def mins(self) -> np.ndarray:
        return np.array([e.raw_min for e in self.entries], dtype=np.float64)

    @property
    def maxs(self) -> np.ndarray:
        return np.array([e.raw_max for e in self.entries], dtype=np.float64)

    def to_json(self) -> dict:
        return {"version": self.version,
                "subscores": [{"name": e.name, "min": e.raw_min, "max": e.raw_max}
                              for e in self.entries]}

    @classmethod
    def from_json(cls, doc: dict) -> "ScoreManifest":
        try:
            entries = [ScoreRange(str(e["name"]), float(e["min"]), float(e["max"]))
                       for e in doc["subscores"]]
            return cls(entries, str(doc.get("version", "1")))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"malformed score manifest: {exc}") from exc


def load_manifest(path) -> ScoreManifest:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ValidationError(f"cannot read manifest {path}: {exc}") from exc
    return ScoreManifest.from_json(doc)


def save_manifest(manifest: ScoreManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=2) + "\n", encoding="utf-8")


def normalize_scores(raw, manifest: ScoreManifest, out_of_range: str = "error") -> np.ndarray:
    """Map raw subscores onto [0, 1] per manifest entry.

    Works on a single 13-vector or on rows of them. ``out_of_range`` is
    ``"error"`` (default) or ``"clamp"``.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != len(manifest):
        raise ValidationError(f"expected {len(manifest)} subscores, got {raw.shape[-1]}")
    lo, hi = manifest.mins, manifest.maxs
    if out_of_range not in ("error", "clamp"):
        raise ParameterError(f"out_of_range must be 'error' or 'clamp', got {out_of_range!r}")
    if not np.all(np.isfinite(raw)):
        raise ValidationError("non-finite raw subscore")
    bad = (raw < lo) | (raw > hi)
    if bad.any():
        if out_of_range == "error":
            col = int(np.argwhere(bad)[0][-1])
            e = manifest.entries[col]
            value = raw[..., col][bad[..., col]].ravel()[0]
            raise ValidationError(
                f"subscore {e.name!r} value {value} outside [{e.raw_min}, {e.raw_max}]")
        raw = np.clip(raw, lo, hi)
    return (raw - lo) / (hi - lo)


def denormalize_scores(normalized, manifest: ScoreManifest) -> np.ndarray:
    normalized = np.asarray(normalized, dtype=np.float64)
    lo, hi = manifest.mins, manifest.maxs
    return lo + normalized * (hi - lo)


# -- volumes ------------------------------------------------------------------


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def write_volume(path, volume: np.ndarray, voxel_mm=(1.0, 1.0, 1.0),
                 subject_id: str = "") -> None:
    path = Path(path)
    vol = np.asarray(volume)
    if vol.ndim == 4 and vol.shape[0] == 1:
        vol = vol[0]
    if vol.ndim != 3:
        raise VolumeFormatError(f"{path}: volume must be 3-D (D, H, W), got shape {vol.shape}")
    path.write_bytes(np.ascontiguousarray(vol, dtype="<f4").tobytes())
    meta = {"dims": list(vol.shape), "voxel_mm": [float(v) for v in voxel_mm],
            "subject_id": subject_id}
    _sidecar(path).write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")


def load_volume(path) -> np.ndarray:
    """Read a ``.vol`` file as a ``(1, D, H, W)`` float32 array."""
    path = Path(path)
    side = _sidecar(path)
    if not side.exists():
        raise VolumeFormatError(f"{path}: missing sidecar {side.name}")
    try:
        meta = json.loads(side.read_text(encoding="utf-8"))
        dims = [int(d) for d in meta["dims"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise VolumeFormatError(f"{path}: unreadable sidecar ({exc})") from exc
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeFormatError(f"{path}: sidecar dims must be 3 positive extents, got {dims}")
    try:
        payload = path.read_bytes()
    except OSError as exc:
        raise VolumeFormatError(f"{path}: cannot read payload ({exc})") from exc
    expected = int(np.prod(dims)) * 4
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload is {len(payload)} bytes but dims {dims} need {expected}")
    vol = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if not np.all(np.isfinite(vol)):
        raise VolumeFormatError(f"{path}: non-finite voxels")
    return vol[None]


def intensity_normalize(vol: np.ndarray) -> np.ndarray:
    """Zero mean, unit population std over all voxels; constant volumes become zeros."""
    vol = np.asarray(vol)
    x = vol.astype(np.float64)
    mean = x.mean()
    std = x.std()
    if std == 0 or not np.isfinite(std):
        return np.zeros_like(vol)
    return ((x - mean) / std).astype(vol.dtype if vol.dtype.kind == "f" else np.float64)


# -- dataset table ------------------------------------------------------------


@dataclass
class SampleTuple:
    subject_id: str
    volume_path: Path
    interval_months: int
    raw_scores: np.ndarray
    normalized_scores: np.ndarray


def load_dataset(table_path, manifest: ScoreManifest, volume_root=None,
                 out_of_range: str = "error") -> List[SampleTuple]:
    """Parse and validate the dataset table, keeping table row order."""
    table_path = Path(table_path)
    root = Path(volume_root) if volume_root is not None else table_path.parent
    expected_header = list(TABLE_FIXED_COLUMNS) + manifest.names
    samples: List[SampleTuple] = []
    seen = set()
    with open(table_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return samples
        if [h.strip() for h in header] != expected_header:
            raise ValidationError(
                f"{table_path}: header {header} does not match expected {expected_header}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(expected_header):
                raise ValidationError(
                    f"{table_path}:{line}: expected {len(expected_header)} columns, got {len(row)}")
            subject, vpath, interval = (c.strip() for c in row[:3])
            try:
                months = float(interval)
                raw = np.array([float(c) for c in row[3:]], dtype=np.float64)
            except ValueError as exc:
                raise ValidationError(f"{table_path}:{line}: malformed row ({exc})") from exc
            if months not in INTERVAL_GRID:
                raise ValidationError(
                    f"{table_path}:{line}: interval {interval} not in grid {INTERVAL_GRID}")
            key = (subject, vpath, int(months))
            if key in seen:
                raise ValidationError(f"{table_path}:{line}: duplicate row {key}")
            seen.add(key)
            full = root / vpath
            if not full.exists():
                raise ValidationError(f"{table_path}:{line}: missing volume file {full}")
            try:
                norm = normalize_scores(raw, manifest, out_of_range)
            except ValidationError as exc:
                raise ValidationError(f"{table_path}:{line}: {exc}") from None
            samples.append(SampleTuple(subject, full, int(months), raw, norm))
    return samples


def write_dataset(table_path, rows: Iterable[Tuple[str, str, int, Sequence[float]]],
                  manifest: ScoreManifest) -> None:
    with open(table_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(TABLE_FIXED_COLUMNS) + manifest.names)
        for subject, vpath, months, raw in rows:
            writer.writerow([subject, vpath, int(months)] + [repr(float(v)) for v in raw])


def stack_samples(samples: Sequence[SampleTuple], normalize_intensity: bool = True
                  ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Load every volume and return ``(volumes (N,1,D,H,W), months (N,), targets (N,13))``."""
    vols = []
    for s in samples:
        v = load_volume(s.volume_path)
        vols.append(intensity_normalize(v) if normalize_intensity else v)
    volumes = np.stack(vols) if vols else np.zeros((0, 1, 1, 1, 1), dtype=np.float32)
    months = np.array([s.interval_months for s in samples], dtype=np.float64)
    targets = (np.stack([s.normalized_scores for s in samples]) if samples
               else np.zeros((0, 0)))
    return volumes, months, targets


# -- folds --------------------------------------------------------------------


@dataclass
class FoldPlan:
    k: int
    assignment: np.ndarray
    seed: int
    group_by_subject: bool = False

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)

    def to_json(self) -> dict:
        doc = {"seed": int(self.seed), "k": int(self.k),
               "assignment": [int(a) for a in self.assignment]}
        if self.group_by_subject:
            doc["group_by_subject"] = True
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "FoldPlan":
        try:
            plan = cls(int(doc["k"]), doc["assignment"], int(doc["seed"]),
                       bool(doc.get("group_by_subject", False)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed fold plan: {exc}") from exc
        if plan.assignment.size and (plan.assignment.min() < 0 or plan.assignment.max() >= plan.k):
            raise ValidationError("fold plan assigns samples outside [0, k)")
        return plan

    def count_matrix(self, intervals) -> Dict[int, List[int]]:
        """``{interval: [count in fold 0, ..., fold k-1]}``."""
        intervals = np.asarray(intervals)
        return {int(t): [int(np.sum((intervals == t) & (self.assignment == f)))
                         for f in range(self.k)]
                for t in sorted(set(intervals.tolist()))}


def save_fold_plan(plan: FoldPlan, path) -> None:
    Path(path).write_text(json.dumps(plan.to_json()) + "\n", encoding="utf-8")


def load_fold_plan(path) -> FoldPlan:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ValidationError(f"cannot read fold plan {path}: {exc}") from exc
    return FoldPlan.from_json(doc)


def _intervals_of(samples) -> np.ndarray:
    if len(samples) and isinstance(samples[0], SampleTuple):
        return np.array([s.interval_months for s in samples])
    return np.asarray(samples)


def build_stratified_folds(samples, k: int = 5, seed: int = 0,
                           groups: Optional[Sequence] = None) -> FoldPlan:
    """Deal samples into ``k`` folds, balanced per interval.

    ``samples`` is a list of :class:`SampleTuple` or a plain sequence of
    interval values. Within each interval the samples are shuffled with a
    seeded generator and dealt round-robin, so every interval's per-fold
    counts differ by at most one. The dealing continues across intervals
    from wherever the previous one stopped, which also keeps fold sizes
    within one of each other.

    If ``groups`` (e.g. subject ids) is given, whole groups are assigned
    instead, greedily to the fold that currently holds the fewest samples of
    the group's intervals. Per-interval balance is then best-effort.
    """
    intervals = _intervals_of(samples)
    n = len(intervals)
    if k < 2:
        raise ParameterError(f"k must be >= 2, got {k}")
    if k > n:
        raise ParameterError(f"k={k} exceeds the number of samples ({n})")
    rng = np.random.default_rng(seed)
    if groups is not None:
        return _grouped_folds(intervals, list(groups), k, seed, rng)

    values = sorted(set(intervals.tolist()))
    smallest = min(int(np.sum(intervals == t)) for t in values)
    if smallest < k:
        warnings.warn(f"smallest interval group has {smallest} samples, fewer than k={k}",
                      stacklevel=2)
    assignment = np.full(n, -1, dtype=np.int64)
    start = 0
    for t in values:
        members = np.flatnonzero(intervals == t)
        members = members[rng.permutation(len(members))]
        assignment[members] = (start + np.arange(len(members))) % k
        start = (start + len(members)) % k
    return FoldPlan(k, assignment, seed)


def _grouped_folds(intervals, groups, k, seed, rng) -> FoldPlan:
    if len(groups) != len(intervals):
        raise ParameterError(f"{len(groups)} group labels for {len(intervals)} samples")
    by_group: Dict[str, List[int]] = defaultdict(list)
    for i, g in enumerate(groups):
        by_group[g].append(i)
    names = list(by_group)
    order = rng.permutation(len(names))
    values = sorted(set(intervals.tolist()))
    col = {t: j for j, t in enumerate(values)}
    counts = np.zeros((k, len(values)), dtype=np.int64)
    assignment = np.full(len(intervals), -1, dtype=np.int64)
    # big groups first so the greedy balance has room to correct
    for gi in sorted(order, key=lambda g: -len(by_group[names[g]])):
        members = by_group[names[gi]]
        hist = np.zeros(len(values), dtype=np.int64)
        for m in members:
            hist[col[intervals[m]]] += 1
        cost = [(int(((counts[f] + hist) ** 2).sum()), int(counts[f].sum()), f) for f in range(k)]
        f = min(cost)[2]
        counts[f] += hist
        assignment[members] = f
    return FoldPlan(k, assignment, seed, group_by_subject=True)


def fold_split(samples: Sequence, plan: FoldPlan, fold_id: int) -> Tuple[list, list]:
    if not 0 <= fold_id < plan.k:
        raise ParameterError(f"fold_id {fold_id} outside [0, {plan.k})")
    if len(samples) != len(plan.assignment):
        raise ValidationError(
            f"fold plan covers {len(plan.assignment)} samples, dataset has {len(samples)}")
    train = [s for s, f in zip(samples, plan.assignment) if f != fold_id]
    test = [s for s, f in zip(samples, plan.assignment) if f == fold_id]
    return train, test


def leakage_report(samples: Sequence[SampleTuple], plan: FoldPlan) -> Dict[int, List[str]]:
    """Subjects that appear on both sides of each fold's train/test split."""
    report = {}
    for f in range(plan.k):
        train, test = fold_split(samples, plan, f)
        shared = {s.subject_id for s in train} & {s.subject_id for s in test}
        report[f] = sorted(shared)
    return report
