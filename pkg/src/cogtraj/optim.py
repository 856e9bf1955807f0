"""Smooth-L1 loss, RMSProp and the mini-batch training loop."""
from __future__ import annotations

import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import NonFiniteError, ParameterError, ShapeError
from .network import Network, backward, forward


def smooth_l1(pred: np.ndarray, target: np.ndarray, beta: float = 1.0
              ) -> Tuple[float, np.ndarray]:
    """Mean smooth-L1 (Huber with knot ``beta``) and its gradient w.r.t. ``pred``.

    Per element, with ``x = pred - target``::

        0.5 * x**2 / beta      if |x| < beta
        |x| - 0.5 * beta       otherwise
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if beta <= 0:
        raise ParameterError(f"beta must be positive, got {beta}")
    diff = pred - target
    absdiff = np.abs(diff)
    quad = absdiff < beta
    per_elem = np.where(quad, 0.5 * diff * diff / beta, absdiff - 0.5 * beta)
    n = diff.size
    loss = float(per_elem.sum(dtype=np.float64) / n)
    grad = np.clip(diff / beta, -1.0, 1.0) / n
    return loss, grad.astype(pred.dtype, copy=False)


@dataclass
class RmsPropState:
    lr: float = 1e-4
    rho: float = 0.99
    eps: float = 1e-8
    cache: Dict[str, np.ndarray] = field(default_factory=OrderedDict)
    step: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ParameterError("lr must be nonnegative")
        if not 0 <= self.rho < 1:
            raise ParameterError(f"rho must be in [0, 1), got {self.rho}")
        if self.eps < 0:
            raise ParameterError("eps must be nonnegative")

    def settings(self) -> dict:
        return {"lr": self.lr, "rho": self.rho, "eps": self.eps}


def rmsprop_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
                 state: RmsPropState) -> None:
    """One in-place RMSProp update of ``params``.

    cache <- rho * cache + (1 - rho) * g**2
    theta <- theta - lr * g / (sqrt(cache) + eps)
    """
    state.step += 1
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name} at step {state.step}")
        cache = state.cache.get(name)
        if cache is None:
            cache = state.cache[name] = np.zeros_like(theta)
        cache *= state.rho
        cache += (1 - state.rho) * (g * g)
        theta -= state.lr * g / (np.sqrt(cache) + state.eps)


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if total > max_norm > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


@dataclass
class TrainPlan:
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    shuffle: bool = True
    smooth_l1_beta: float = 1.0
    deterministic: bool = True
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError("batch_size must be positive")
        if self.epochs < 0:
            raise ParameterError("epochs must be nonnegative")
        if self.smooth_l1_beta <= 0:
            raise ParameterError("smooth_l1_beta must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


EpochCallback = Callable[[dict], None]


def batch_order(n: int, plan: TrainPlan, rng: np.random.Generator) -> List[np.ndarray]:
    idx = rng.permutation(n) if plan.shuffle else np.arange(n)
    return [idx[i:i + plan.batch_size] for i in range(0, n, plan.batch_size)]


def train(net: Network, volumes: np.ndarray, months: np.ndarray, targets: np.ndarray,
          plan: TrainPlan, rmsprop: Optional[RmsPropState] = None,
          callbacks: Sequence[EpochCallback] = ()) -> Tuple[Network, List[float]]:
    """Train ``net`` in place on arrays and return it with the per-epoch mean loss.

    Each batch runs forward (train mode), smooth-L1, backward and one RMSProp
    step. The last short batch is kept. Shuffling and dropout draw from
    generators derived from ``plan.seed`` only, so a fixed seed reproduces the
    loss history exactly.
    """
    volumes = np.asarray(volumes)
    months = np.asarray(months, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets)
    n = len(volumes)
    if plan.epochs and n == 0:
        raise ParameterError("cannot train on an empty dataset")
    if len(months) != n or len(targets) != n:
        raise ShapeError(f"{n} volumes, {len(months)} months and {len(targets)} targets")
    if plan.batch_size > n > 0:
        raise ParameterError(f"batch_size {plan.batch_size} exceeds dataset size {n}")
    if rmsprop is None:
        rmsprop = RmsPropState()
    dtype = net.config.np_dtype
    targets = targets.astype(dtype, copy=False)

    shuffle_rng, dropout_rng = (np.random.default_rng(s)
                                for s in np.random.SeedSequence(plan.seed).spawn(2))
    history: List[float] = []
    for epoch in range(plan.epochs):
        started = time.perf_counter()
        total = 0.0
        for b, idx in enumerate(batch_order(n, plan, shuffle_rng)):
            pred, tape = forward(net, volumes[idx], months[idx], train=True, rng=dropout_rng)
            loss, grad = smooth_l1(pred, targets[idx], plan.smooth_l1_beta)
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = backward(net, tape, grad)
            if plan.clip_norm:
                clip_global_norm(grads, plan.clip_norm)
            rmsprop_step(net.params, grads, rmsprop)
            total += loss * len(idx)
        history.append(total / n)
        info = {"epoch": epoch, "loss": history[-1],
                "wall_time": time.perf_counter() - started, "seed": plan.seed}
        for cb in callbacks:
            cb(info)
    return net, history
