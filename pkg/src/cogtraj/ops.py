"""Forward and backward kernels for the layers used by the network.

Every function here is pure: it takes NumPy arrays (row-major, shape
``(N, C, D, H, W)`` for volumes) and returns new arrays. Nothing is cached
between calls, so the backward functions take whatever the forward pass
needs to be replayed.

Convolution follows the cross-correlation convention (the kernel is not
flipped).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ParameterError, ShapeError

Triple = Tuple[int, int, int]

_SPATIAL = (2, 3, 4)


def _triple(value, name: str) -> Triple:
    if np.isscalar(value):
        value = (value,) * 3
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise ParameterError(f"{name} must have 3 entries, got {value}")
    return value


def output_extent(size: int, kernel: int, stride: int, pad: int = 0) -> int:
    """Length of one spatial axis after a sliding-window op."""
    return (size + 2 * pad - kernel) // stride + 1


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: Triple = (3, 3, 3)
    stride: Triple = (1, 1, 1)
    padding: Triple = (0, 0, 0)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel, "kernel"))
        object.__setattr__(self, "stride", _triple(self.stride, "stride"))
        object.__setattr__(self, "padding", _triple(self.padding, "padding"))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ParameterError("channel counts must be positive")
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ParameterError("kernel and stride extents must be positive")
        if min(self.padding) < 0:
            raise ParameterError("padding must be nonnegative")

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        return (self.out_channels, self.in_channels) + self.kernel

    @property
    def fan_in(self) -> int:
        return self.in_channels * int(np.prod(self.kernel))

    def output_shape(self, spatial: Triple) -> Triple:
        out = tuple(
            output_extent(n, k, s, p)
            for n, k, s, p in zip(spatial, self.kernel, self.stride, self.padding)
        )
        if min(out) < 1:
            raise ShapeError(
                f"convolution with kernel {self.kernel}, stride {self.stride}, "
                f"padding {self.padding} collapses spatial shape {tuple(spatial)} to {out}"
            )
        return out


@dataclass(frozen=True)
class PoolSpec:
    window: Triple = (2, 2, 2)
    stride: Triple = (2, 2, 2)

    def __post_init__(self):
        object.__setattr__(self, "window", _triple(self.window, "window"))
        object.__setattr__(self, "stride", _triple(self.stride, "stride"))
        if min(self.window) < 1 or min(self.stride) < 1:
            raise ParameterError("pool window and stride must be positive")

    def output_shape(self, spatial: Triple) -> Triple:
        out = tuple(
            output_extent(n, k, s) for n, k, s in zip(spatial, self.window, self.stride)
        )
        if min(out) < 1:
            raise ShapeError(
                f"pool window {self.window} is larger than input spatial shape {tuple(spatial)}"
            )
        return out


def _check_volume(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 5:
        raise ShapeError(f"{name} must be 5-D (N, C, D, H, W), got shape {x.shape}")


def _pad(x: np.ndarray, padding: Triple) -> np.ndarray:
    if not any(padding):
        return x
    pd, ph, pw = padding
    return np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))


def _windows(x: np.ndarray, kernel: Triple, stride: Triple) -> np.ndarray:
    # (N, C, D', H', W', kd, kh, kw) strided view, no copy
    view = sliding_window_view(x, kernel, axis=_SPATIAL)
    sd, sh, sw = stride
    return view[:, :, ::sd, ::sh, ::sw]


# -- convolution -------------------------------------------------------------


def im2col(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Unfold a volume batch into a ``(N*D'*H'*W', C*kd*kh*kw)`` patch matrix.

    Rows are ordered (n, d', h', w'), columns (channel, kd, kh, kw), so
    ``patches @ weights.reshape(K, -1).T`` is the convolution.
    """
    _check_volume(x)
    spec.output_shape(x.shape[2:])
    wins = _windows(_pad(x, spec.padding), spec.kernel, spec.stride)
    wins = np.ascontiguousarray(wins.transpose(0, 2, 3, 4, 1, 5, 6, 7))
    return wins.reshape(int(np.prod(wins.shape[:4])), -1)


def conv3d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                   spec: ConvSpec, cols: Optional[np.ndarray] = None) -> np.ndarray:
    """3-D cross-correlation plus bias.

    ``cols`` may carry a precomputed :func:`im2col` of ``x``.
    """
    _check_volume(x)
    if weights.shape != spec.weight_shape:
        raise ShapeError(
            f"weights shape {weights.shape} does not match conv spec {spec.weight_shape}"
        )
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(
            f"input shape {x.shape} has {x.shape[1]} channels but weights shape "
            f"{weights.shape} expects {weights.shape[1]}"
        )
    if bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.shape} != ({spec.out_channels},)")
    out_spatial = spec.output_shape(x.shape[2:])
    if cols is None:
        cols = im2col(x, spec)
    out = cols @ weights.reshape(spec.out_channels, -1).T
    out += bias
    out = out.reshape((x.shape[0],) + out_spatial + (spec.out_channels,))
    return np.ascontiguousarray(np.moveaxis(out, 4, 1))


def conv3d_backward(grad_out: np.ndarray, saved_input: np.ndarray, weights: np.ndarray,
                    spec: ConvSpec, input_grad: bool = True,
                    cols: Optional[np.ndarray] = None
                    ) -> Tuple[Optional[np.ndarray], np.ndarray, np.ndarray]:
    """Gradients of :func:`conv3d_forward` w.r.t. input, weights and bias.

    ``input_grad=False`` skips the input gradient (returned as ``None``),
    which is what the first layer of a network wants.
    """
    _check_volume(saved_input, "saved_input")
    n = saved_input.shape[0]
    out_spatial = spec.output_shape(saved_input.shape[2:])
    expected = (n, spec.out_channels) + out_spatial
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {expected}")

    if cols is None:
        cols = im2col(saved_input, spec)
    g_rows = np.ascontiguousarray(np.moveaxis(grad_out, 1, 4)).reshape(-1, spec.out_channels)
    w2 = weights.reshape(spec.out_channels, -1)
    grad_w = (g_rows.T @ cols).reshape(spec.weight_shape)
    grad_b = g_rows.sum(axis=0)
    if not input_grad:
        return None, grad_w, grad_b

    # col2im: scatter each kernel tap of the patch gradient back onto the input
    c, (kd, kh, kw) = spec.in_channels, spec.kernel
    dcols = (g_rows @ w2).reshape((n,) + out_spatial + (c, kd, kh, kw))
    d, h, w = saved_input.shape[2:]
    pd, ph, pw = spec.padding
    sd, sh, sw = spec.stride
    do, ho, wo = out_spatial
    grad_xp = np.zeros((n, d + 2 * pd, h + 2 * ph, w + 2 * pw, c), dtype=dcols.dtype)
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                grad_xp[:,
                        i:i + sd * (do - 1) + 1:sd,
                        j:j + sh * (ho - 1) + 1:sh,
                        k:k + sw * (wo - 1) + 1:sw] += dcols[..., i, j, k]
    grad_x = grad_xp[:, pd:pd + d, ph:ph + h, pw:pw + w]
    return np.ascontiguousarray(np.moveaxis(grad_x, 4, 1)), grad_w, grad_b


# -- max pooling -------------------------------------------------------------


def maxpool3d_forward(x: np.ndarray, spec: PoolSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Max over each window; also returns the flat input index of every winner.

    Ties go to the first element in row-major order, so the memo is
    deterministic.
    """
    _check_volume(x)
    out_spatial = spec.output_shape(x.shape[2:])
    n, c, d, h, w = x.shape
    wins = _windows(x, spec.window, spec.stride)
    flat = wins.reshape(wins.shape[:5] + (-1,))
    local = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]

    wd, wh, ww = spec.window
    sd, sh, sw = spec.stride
    oi, oj, ok = np.unravel_index(local, (wd, wh, ww))
    do, ho, wo = out_spatial
    dd = np.arange(do).reshape(-1, 1, 1) * sd + oi
    hh = np.arange(ho).reshape(1, -1, 1) * sh + oj
    ww_ = np.arange(wo).reshape(1, 1, -1) * sw + ok
    base = (np.arange(n).reshape(-1, 1, 1, 1, 1) * c
            + np.arange(c).reshape(1, -1, 1, 1, 1)) * (d * h * w)
    argmax = base + (dd * h + hh) * w + ww_
    return np.ascontiguousarray(out), argmax.astype(np.int64)


def maxpool3d_backward(grad_out: np.ndarray, argmax: np.ndarray,
                       input_shape: Tuple[int, ...]) -> np.ndarray:
    input_shape = tuple(input_shape)
    if grad_out.shape != argmax.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != argmax shape {argmax.shape}")
    if len(input_shape) != 5 or input_shape[:2] != argmax.shape[:2]:
        raise ShapeError(
            f"argmax memo shape {argmax.shape} is inconsistent with input shape {input_shape}"
        )
    size = int(np.prod(input_shape))
    if argmax.size and (argmax.min() < 0 or argmax.max() >= size):
        raise ShapeError(f"argmax memo indexes outside an input of shape {input_shape}")
    grad = np.bincount(argmax.ravel(), weights=grad_out.ravel(), minlength=size)
    return grad.astype(grad_out.dtype, copy=False).reshape(input_shape)


# -- pointwise ---------------------------------------------------------------


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, saved_input: np.ndarray) -> np.ndarray:
    if grad_out.shape != saved_input.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != input shape {saved_input.shape}")
    return np.where(saved_input > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def _check_p(p: float) -> None:
    if not 0 <= p < 1:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")


def dropout_forward(x: np.ndarray, p: float, train: bool,
                    rng: Optional[np.random.Generator] = None
                    ) -> Tuple[np.ndarray, np.ndarray]:
    """Inverted dropout. Returns ``(output, keep_mask)``.

    At eval time, or when ``p == 0``, the output is the input itself and no
    random numbers are drawn.
    """
    _check_p(p)
    if not train or p == 0:
        return x, np.ones(x.shape, dtype=bool)
    if rng is None:
        raise ParameterError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= p
    return x * _dropout_scale(keep, p, x.dtype), keep


def _dropout_scale(mask: np.ndarray, p: float, dtype) -> np.ndarray:
    return mask.astype(dtype) * np.asarray(1.0 / (1.0 - p), dtype=dtype)


def dropout_backward(grad_out: np.ndarray, mask: np.ndarray, p: float) -> np.ndarray:
    _check_p(p)
    if grad_out.shape != mask.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != mask shape {mask.shape}")
    if p == 0:
        return grad_out
    return grad_out * _dropout_scale(mask, p, grad_out.dtype)


# -- dense -------------------------------------------------------------------


def linear_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[1]:
        raise ShapeError(
            f"cannot apply weights of shape {weights.shape} to input of shape {x.shape}"
        )
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({weights.shape[0]},)")
    return x @ weights.T + bias


def linear_backward(grad_out: np.ndarray, saved_input: np.ndarray, weights: np.ndarray
                    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if grad_out.shape != (saved_input.shape[0], weights.shape[0]):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match input {saved_input.shape} "
            f"and weights {weights.shape}"
        )
    return grad_out @ weights, grad_out.T @ saved_input, grad_out.sum(axis=0)


def flatten_concat(features: np.ndarray, time: np.ndarray) -> np.ndarray:
    """Flatten each sample's feature maps and append its time value as the last column."""
    time = np.asarray(time)
    if time.ndim == 1:
        time = time[:, None]
    if time.shape != (features.shape[0], 1):
        raise ShapeError(
            f"time shape {time.shape} does not match batch of features with shape {features.shape}"
        )
    flat = features.reshape(features.shape[0], -1)
    return np.concatenate([flat, time.astype(flat.dtype, copy=False)], axis=1)


def split_features_time(grad: np.ndarray, feature_shape: Tuple[int, ...]
                        ) -> Tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`flatten_concat`; used for the backward pass."""
    n_feat = int(np.prod(feature_shape[1:]))
    if grad.shape != (feature_shape[0], n_feat + 1):
        raise ShapeError(f"gradient shape {grad.shape} does not match features {feature_shape} + time")
    return grad[:, :n_feat].reshape(feature_shape), grad[:, n_feat:]
