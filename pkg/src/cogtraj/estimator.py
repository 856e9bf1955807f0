"""scikit-learn wrappers around the network, preprocessing and fold splitter.

All estimators take a packed 2-D ``X``: each row is one flattened volume
(row-major ``C*D*H*W`` voxels) followed by one column holding the
prediction interval in months. :func:`pack_inputs` / :func:`unpack_inputs`
convert between that layout and ``(volumes, months)``.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.model_selection import BaseCrossValidator
from sklearn.utils.validation import check_array, check_is_fitted

from . import dataio
from .config import profile_section
from .dataio import ScoreManifest
from .exceptions import ShapeError
from .network import NetworkConfig, build_network, config_hash, predict as net_predict
from .optim import RmsPropState, TrainPlan, train


def pack_inputs(volumes, months) -> np.ndarray:
    volumes = np.asarray(volumes)
    months = np.asarray(months, dtype=volumes.dtype if volumes.dtype.kind == "f" else np.float64)
    flat = volumes.reshape(len(volumes), -1)
    if months.reshape(-1).shape[0] != len(flat):
        raise ShapeError(f"{months.size} months for {len(flat)} volumes")
    return np.concatenate([flat, months.reshape(-1, 1).astype(flat.dtype)], axis=1)


def unpack_inputs(X, input_shape) -> tuple:
    X = np.asarray(X)
    n_vox = int(np.prod(input_shape))
    if X.ndim != 2 or X.shape[1] != n_vox + 1:
        raise ShapeError(f"X must have {n_vox} voxel columns plus a months column for input "
                         f"shape {tuple(input_shape)}; got {X.shape}")
    return X[:, :-1].reshape((len(X),) + tuple(input_shape)), X[:, -1].astype(np.float64)


def _cube_shape(n_features: int) -> Optional[tuple]:
    side = round((n_features - 1) ** (1 / 3))
    for s in (side - 1, side, side + 1):
        if s > 0 and s ** 3 == n_features - 1:
            return (1, s, s, s)
    return None


class SubscoreTrajectoryRegressor(RegressorMixin, BaseEstimator):
    """Time-conditioned 3-D CNN regressor for normalized cognitive subscores.

    Parameters left as ``None`` come from the named ``profile`` (``desk``,
    ``paper`` or ``tiny``). ``network`` takes extra :class:`NetworkConfig`
    fields as a dict. If neither the profile nor ``input_shape`` matches the
    width of ``X`` and the voxel count is a perfect cube, a single-channel
    cube is assumed.

    Attributes
    ----------
    network_ : Network
        The trained parameters.
    history_ : list of float
        Mean training loss per epoch.
    """

    def __init__(self, profile="desk", input_shape=None, dropout_p=None, network=None,
                 lr=None, rho=None, eps=None, batch_size=None, epochs=None,
                 smooth_l1_beta=None, clip_norm=None, shuffle=True, seed=0,
                 clamp_predictions=False, strict_months=True, callbacks=None):
        self.profile = profile
        self.input_shape = input_shape
        self.dropout_p = dropout_p
        self.network = network
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self.batch_size = batch_size
        self.epochs = epochs
        self.smooth_l1_beta = smooth_l1_beta
        self.clip_norm = clip_norm
        self.shuffle = shuffle
        self.seed = seed
        self.clamp_predictions = clamp_predictions
        self.strict_months = strict_months
        self.callbacks = callbacks

    # -- configuration -------------------------------------------------------

    def _section(self, name: str) -> dict:
        base = {"rmsprop": {"lr": 1e-4, "rho": 0.99, "eps": 1e-8},
                "train": {"batch_size": 16, "epochs": 30, "smooth_l1_beta": 1.0}}[name]
        base.update(profile_section(self.profile, name))
        return base

    def network_config(self, n_features: Optional[int] = None,
                       output_dim: Optional[int] = None) -> NetworkConfig:
        fields = profile_section(self.profile, "network")
        fields.update(self.network or {})
        if self.dropout_p is not None:
            fields["dropout_p"] = self.dropout_p
        if self.input_shape is not None:
            fields["input_shape"] = tuple(self.input_shape)
        if output_dim is not None:
            fields["output_dim"] = output_dim
        cfg = NetworkConfig.from_dict(fields)
        if n_features is not None and int(np.prod(cfg.input_shape)) + 1 != n_features:
            cube = _cube_shape(n_features) if self.input_shape is None else None
            if cube is None:
                raise ShapeError(f"X has {n_features} columns; input shape {cfg.input_shape} "
                                 f"needs {int(np.prod(cfg.input_shape)) + 1}")
            cfg = cfg.replace(input_shape=cube)
        return cfg

    def train_plan(self) -> TrainPlan:
        sec = self._section("train")
        return TrainPlan(
            batch_size=int(self.batch_size if self.batch_size is not None else sec["batch_size"]),
            epochs=int(self.epochs if self.epochs is not None else sec["epochs"]),
            seed=int(self.seed), shuffle=bool(self.shuffle),
            smooth_l1_beta=float(self.smooth_l1_beta if self.smooth_l1_beta is not None
                                 else sec["smooth_l1_beta"]),
            clip_norm=self.clip_norm)

    def rmsprop_state(self) -> RmsPropState:
        sec = self._section("rmsprop")
        return RmsPropState(lr=float(self.lr if self.lr is not None else sec["lr"]),
                            rho=float(self.rho if self.rho is not None else sec["rho"]),
                            eps=float(self.eps if self.eps is not None else sec["eps"]))

    # -- estimator API -------------------------------------------------------

    def fit(self, X, y):
        X = check_array(X, dtype=(np.float32, np.float64))
        y = check_array(y, dtype=np.float64, ensure_2d=False)
        if y.ndim == 1:
            y = y[:, None]
        if len(y) != len(X):
            raise ShapeError(f"X has {len(X)} rows but y has {len(y)}")
        cfg = self.network_config(X.shape[1], output_dim=y.shape[1])
        volumes, months = unpack_inputs(X, cfg.input_shape)
        plan = self.train_plan()
        plan.batch_size = min(plan.batch_size, len(X))
        state = self.rmsprop_state()
        net = build_network(cfg, self.seed)
        self.network_, self.history_ = train(net, volumes, months, y, plan, state,
                                             callbacks=list(self.callbacks or ()))
        self.rmsprop_ = state
        self.n_features_in_ = X.shape[1]
        self.config_hash_ = config_hash({"network": cfg.to_dict(), "train": plan.to_dict(),
                                         "rmsprop": state.settings()})
        return self

    def predict(self, X):
        check_is_fitted(self, "network_")
        X = check_array(X, dtype=(np.float32, np.float64))
        volumes, months = unpack_inputs(X, self.network_.config.input_shape)
        return net_predict(self.network_, volumes, months, clamp=self.clamp_predictions,
                           strict_months=self.strict_months)

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.target_tags.multi_output = True
        return tags


class IntensityNormalizer(TransformerMixin, BaseEstimator):
    """Per-volume zero-mean / unit-std scaling of the voxel columns.

    Stateless; the trailing months column passes through untouched when
    ``time_column`` is true.
    """

    def __init__(self, time_column=True):
        self.time_column = time_column

    def fit(self, X, y=None):
        X = check_array(X, dtype=(np.float32, np.float64))
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        X = check_array(X, dtype=(np.float32, np.float64), copy=True)
        stop = X.shape[1] - 1 if self.time_column else X.shape[1]
        for row in X:
            row[:stop] = dataio.intensity_normalize(row[:stop])
        return X


class SubscoreScaler(TransformerMixin, BaseEstimator):
    """Raw subscores to [0, 1] and back, using a :class:`ScoreManifest`."""

    def __init__(self, manifest: Optional[ScoreManifest] = None, out_of_range="error"):
        self.manifest = manifest
        self.out_of_range = out_of_range

    def fit(self, X, y=None):
        if self.manifest is None:
            raise ValueError("SubscoreScaler needs a manifest")
        self.n_features_in_ = len(self.manifest)
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        return dataio.normalize_scores(X, self.manifest, self.out_of_range)

    def inverse_transform(self, X):
        check_is_fitted(self, "n_features_in_")
        return dataio.denormalize_scores(X, self.manifest)


class StratifiedIntervalKFold(BaseCrossValidator):
    """K folds balanced per prediction interval.

    The interval is read from the last column of ``X``. Passing ``groups``
    together with ``group_by_subject=True`` keeps each group inside a single
    fold.
    """

    def __init__(self, n_splits=5, seed=0, group_by_subject=False):
        self.n_splits = n_splits
        self.seed = seed
        self.group_by_subject = group_by_subject

    def get_n_splits(self, X=None, y=None, groups=None):
        return self.n_splits

    def plan(self, X, groups=None) -> dataio.FoldPlan:
        X = np.asarray(X)
        months = X[:, -1] if X.ndim == 2 else X
        use_groups = groups if self.group_by_subject else None
        return dataio.build_stratified_folds(np.asarray(months).astype(np.int64),
                                             self.n_splits, self.seed, groups=use_groups)

    def _iter_test_indices(self, X=None, y=None, groups=None):
        plan = self.plan(X, groups)
        for f in range(self.n_splits):
            yield np.flatnonzero(plan.assignment == f)
