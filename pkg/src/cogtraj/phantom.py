"""Synthetic volumes and subscores with a known structure-to-score link.

Each subject gets an atrophy level ``a`` in [0, 1]. Its volume is a bright
ellipsoid with a dark central cavity whose radius grows with ``a``, plus
Gaussian voxel noise. A sample pairs a volume with an interval ``t`` from
the 6-month grid, and its normalized subscore ``i`` is

    clip(w[i] * a + v[i] * t / 36, 0, 1) + noise

(then clipped back into [0, 1] so the raw scores stay inside the manifest).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .dataio import (INTERVAL_GRID, ScoreManifest, ScoreRange, denormalize_scores,
                     save_manifest, write_dataset, write_volume)
from .exceptions import ConfigError, ParameterError

N_SUBSCORES = 13
MIN_DIM = 8

# Outer ellipsoid semi-axes and cavity radius limits, as fractions of each axis.
_SHELL_FRACTION = (0.42, 0.38, 0.40)
_CAVITY_MIN = 0.06
_CAVITY_MAX = 0.30
_SHELL_INTENSITY = 1.0
_CAVITY_INTENSITY = 0.1


def synthetic_manifest(n: int = N_SUBSCORES) -> ScoreManifest:
    """Made-up subscore ranges for phantom data; not clinical values."""
    maxima = [5, 5, 5, 5, 5, 8, 10, 12, 12, 6, 6, 6, 10, 4, 4, 8]
    return ScoreManifest([ScoreRange(f"subscore_{i + 1:02d}", 0.0, float(maxima[i % len(maxima)]))
                          for i in range(n)], version="phantom-1")


@dataclass
class PhantomSpec:
    n_samples: int = 200
    dims: Tuple[int, int, int] = (32, 32, 32)
    n_subjects: int = 100
    atrophy_range: Tuple[float, float] = (0.0, 1.0)
    voxel_noise_std: float = 0.05
    score_noise_std: float = 0.02
    seed: int = 0
    n_subscores: int = N_SUBSCORES
    atrophy_weights: Optional[List[float]] = None
    time_weights: Optional[List[float]] = None

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.atrophy_range = tuple(float(a) for a in self.atrophy_range)
        if len(self.dims) != 3:
            raise ConfigError(f"dims must have 3 entries, got {self.dims}")
        if min(self.dims) < MIN_DIM:
            raise ConfigError(f"dims {self.dims} too small for the cavity; need >= {MIN_DIM} per axis")
        if not self.n_samples >= self.n_subjects >= 1:
            raise ConfigError("need n_samples >= n_subjects >= 1")
        lo, hi = self.atrophy_range
        if not 0 <= lo <= hi <= 1:
            raise ConfigError(f"atrophy_range must lie within [0, 1], got {self.atrophy_range}")
        if self.voxel_noise_std < 0 or self.score_noise_std < 0:
            raise ConfigError("noise levels must be nonnegative")
        for name in ("atrophy_weights", "time_weights"):
            w = getattr(self, name)
            if w is not None and len(w) != self.n_subscores:
                raise ConfigError(f"{name} needs {self.n_subscores} entries, got {len(w)}")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown phantom spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["atrophy_range"] = list(self.atrophy_range)
        return d


def default_weights(spec: PhantomSpec) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([spec.seed, 1])
    w = rng.uniform(0.4, 0.7, spec.n_subscores)
    v = rng.uniform(0.0, 0.3, spec.n_subscores)
    if spec.atrophy_weights is not None:
        w = np.asarray(spec.atrophy_weights, dtype=np.float64)
    if spec.time_weights is not None:
        v = np.asarray(spec.time_weights, dtype=np.float64)
    return w, v


def cavity_radius(a: float, dims) -> float:
    """Cavity radius in voxels for atrophy ``a``."""
    smallest = min(dims)
    return (_CAVITY_MIN + a * (_CAVITY_MAX - _CAVITY_MIN)) * smallest


def clean_volume(a: float, dims) -> np.ndarray:
    """Noise-free phantom for atrophy ``a``."""
    d, h, w = dims
    zz, yy, xx = np.meshgrid(*(np.arange(n) - (n - 1) / 2 for n in dims), indexing="ij")
    semi = [f * n for f, n in zip(_SHELL_FRACTION, dims)]
    shell = (zz / semi[0]) ** 2 + (yy / semi[1]) ** 2 + (xx / semi[2]) ** 2 <= 1.0
    cavity = zz ** 2 + yy ** 2 + xx ** 2 <= cavity_radius(a, dims) ** 2
    vol = np.zeros(dims, dtype=np.float64)
    vol[shell] = _SHELL_INTENSITY
    vol[shell & cavity] = _CAVITY_INTENSITY
    return vol


def cavity_voxels(a: float, dims) -> int:
    vol = clean_volume(a, dims)
    return int(np.sum(vol == _CAVITY_INTENSITY))


def true_scores(a, months, w, v) -> np.ndarray:
    """Noise-free normalized subscores, shape ``(N, n_subscores)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 1)
    t = np.asarray(months, dtype=np.float64).reshape(-1, 1) / 36.0
    return np.clip(w[None] * a + v[None] * t, 0.0, 1.0)


@dataclass
class PhantomDataset:
    root: Path
    table: Path
    manifest_path: Path
    truth_path: Path
    manifest: ScoreManifest
    truth: dict


def generate(spec: PhantomSpec, out_dir) -> PhantomDataset:
    """Write volumes, ``dataset.csv``, ``manifest.json`` and ``truth.json`` under ``out_dir``."""
    out = Path(out_dir)
    vol_dir = out / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    w, v = default_weights(spec)
    manifest = synthetic_manifest(spec.n_subscores)

    lo, hi = spec.atrophy_range
    atrophy = rng.uniform(lo, hi, spec.n_subjects)
    subject_of = np.concatenate([np.arange(spec.n_subjects),
                                 rng.integers(0, spec.n_subjects, spec.n_samples - spec.n_subjects)])
    subject_of = np.sort(subject_of)
    grid = np.array(INTERVAL_GRID)
    intervals = np.resize(grid, spec.n_samples)[rng.permutation(spec.n_samples)]

    clean = true_scores(atrophy[subject_of], intervals, w, v)
    noisy = np.clip(clean + rng.normal(0.0, spec.score_noise_std, clean.shape), 0.0, 1.0)
    raw = denormalize_scores(noisy, manifest)

    rows = []
    shells = {}
    for i in range(spec.n_samples):
        s = int(subject_of[i])
        if s not in shells:
            shells[s] = clean_volume(atrophy[s], spec.dims)
        vol = shells[s] + rng.normal(0.0, spec.voxel_noise_std, spec.dims)
        sid = f"S{s:04d}"
        name = f"volumes/sample_{i:04d}.vol"
        write_volume(out / name, vol, subject_id=sid)
        rows.append((sid, name, int(intervals[i]), raw[i]))

    table = out / "dataset.csv"
    write_dataset(table, rows, manifest)
    manifest_path = out / "manifest.json"
    save_manifest(manifest, manifest_path)
    truth = {
        "spec": spec.to_dict(),
        "atrophy_weights": w.tolist(),
        "time_weights": v.tolist(),
        "subjects": {f"S{s:04d}": float(atrophy[s]) for s in range(spec.n_subjects)},
        "samples": [{"subject_id": r[0], "volume_path": r[1], "interval_months": r[2],
                     "atrophy": float(atrophy[subject_of[i]]),
                     "clean_scores": clean[i].tolist()}
                    for i, r in enumerate(rows)],
    }
    truth_path = out / "truth.json"
    truth_path.write_text(json.dumps(truth, indent=1) + "\n", encoding="utf-8")
    return PhantomDataset(out, table, manifest_path, truth_path, manifest, truth)


class IntervalMeanBaseline(RegressorMixin, BaseEstimator):
    """Predicts each subscore's training mean for the sample's interval.

    ``X`` is anything whose last column is the interval in months (the same
    packed layout the CNN estimator takes). Intervals unseen in training fall
    back to the overall training mean.
    """

    def fit(self, X, y):
        months = self._months(X)
        y = np.asarray(y, dtype=np.float64)
        if len(y) == 0:
            raise ParameterError("baseline needs at least one training sample")
        self.overall_ = y.mean(axis=0)
        self.means_ = {float(t): y[months == t].mean(axis=0) for t in np.unique(months)}
        return self

    def predict(self, X):
        check_is_fitted(self, "means_")
        months = self._months(X)
        return np.stack([self.means_.get(float(t), self.overall_) for t in months]) \
            if len(months) else np.zeros((0, len(self.overall_)))

    @staticmethod
    def _months(X) -> np.ndarray:
        X = np.asarray(X)
        return (X[:, -1] if X.ndim == 2 else X).astype(np.float64)


def baseline_predictor(months, targets) -> IntervalMeanBaseline:
    return IntervalMeanBaseline().fit(np.asarray(months, dtype=np.float64).reshape(-1, 1), targets)
