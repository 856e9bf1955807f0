"""Predict cognitive subscore trajectories from structural MRI with a time-conditioned 3-D CNN."""
from .dataio import (FoldPlan, SampleTuple, ScoreManifest, ScoreRange, build_stratified_folds,
                     fold_split, load_dataset, load_volume, write_volume)
from .estimator import (IntensityNormalizer, StratifiedIntervalKFold, SubscoreScaler,
                        SubscoreTrajectoryRegressor, pack_inputs, unpack_inputs)
from .network import (Network, NetworkConfig, build_network, load_network, profile,
                      save_network)

__version__ = "0.1.0"

__all__ = [
    "FoldPlan", "IntensityNormalizer", "Network", "NetworkConfig", "SampleTuple",
    "ScoreManifest", "ScoreRange", "StratifiedIntervalKFold", "SubscoreScaler",
    "SubscoreTrajectoryRegressor", "build_network", "build_stratified_folds", "fold_split",
    "load_dataset", "load_network", "load_volume", "pack_inputs", "profile", "save_network",
    "unpack_inputs", "write_volume",
]
