"""Time-conditioned 3-D CNN: three conv blocks, three dense layers, linear head.

Each conv block is ``conv -> max-pool -> dropout -> ReLU``. The flattened
output of the last block gets the (scaled) prediction time appended as one
extra feature before the first dense layer. Dense layers are
``linear -> ReLU`` and the head is a plain linear map to the subscores.
"""
from __future__ import annotations

import hashlib
import json
import struct
import warnings
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .config import profile_section
from .exceptions import (CheckpointError, CheckpointShapeError, CheckpointTruncatedError,
                         CheckpointVersionError, ConfigError, InputRangeError, ParameterError,
                         ShapeError)
from .ops import ConvSpec, PoolSpec

N_CONV = 3
N_FC = 3

CHECKPOINT_MAGIC = b"CTJ1"
CHECKPOINT_VERSION = 1

_DTYPES = {"float32": np.float32, "float64": np.float64}


def _triples(values, name) -> Tuple[Tuple[int, int, int], ...]:
    out = []
    for v in values:
        if np.isscalar(v):
            v = (v,) * 3
        v = tuple(int(x) for x in v)
        if len(v) != 3:
            raise ConfigError(f"{name}: expected triples, got {v}")
        out.append(v)
    if len(out) != N_CONV:
        raise ConfigError(f"{name}: expected {N_CONV} entries, got {len(out)}")
    return tuple(out)


@dataclass(frozen=True)
class NetworkConfig:
    input_shape: Tuple[int, int, int, int] = (1, 32, 32, 32)
    conv_channels: Tuple[int, int, int] = (8, 16, 32)
    conv_kernels: Tuple[Tuple[int, int, int], ...] = ((3, 3, 3),) * 3
    conv_strides: Tuple[Tuple[int, int, int], ...] = ((1, 1, 1),) * 3
    conv_padding: Tuple[Tuple[int, int, int], ...] = ((1, 1, 1),) * 3
    pool_windows: Tuple[Tuple[int, int, int], ...] = ((2, 2, 2),) * 3
    pool_strides: Tuple[Tuple[int, int, int], ...] = ((2, 2, 2),) * 3
    dropout_p: float = 0.5
    fc_widths: Tuple[int, int, int] = (64, 32, 16)
    output_dim: int = 13
    time_scale: float = 36.0
    dtype: str = "float32"

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "input_shape", tuple(int(v) for v in self.input_shape))
        set_(self, "conv_channels", tuple(int(v) for v in self.conv_channels))
        set_(self, "fc_widths", tuple(int(v) for v in self.fc_widths))
        for name in ("conv_kernels", "conv_strides", "conv_padding",
                     "pool_windows", "pool_strides"):
            set_(self, name, _triples(getattr(self, name), name))
        set_(self, "dropout_p", float(self.dropout_p))
        set_(self, "time_scale", float(self.time_scale))
        set_(self, "output_dim", int(self.output_dim))
        if len(self.input_shape) != 4 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be 4 positive extents (C, D, H, W), got {self.input_shape}")
        if len(self.conv_channels) != N_CONV or min(self.conv_channels) < 1:
            raise ConfigError(f"conv_channels must be {N_CONV} positive counts")
        if len(self.fc_widths) != N_FC or min(self.fc_widths) < 1:
            raise ConfigError(f"fc_widths must be {N_FC} positive counts")
        if self.output_dim < 1:
            raise ConfigError("output_dim must be positive")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.time_scale <= 0:
            raise ConfigError("time_scale must be positive")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def conv_specs(self) -> List[ConvSpec]:
        chans = (self.input_shape[0],) + self.conv_channels
        return [ConvSpec(chans[i], chans[i + 1], self.conv_kernels[i],
                         self.conv_strides[i], self.conv_padding[i]) for i in range(N_CONV)]

    def pool_specs(self) -> List[PoolSpec]:
        return [PoolSpec(w, s) for w, s in zip(self.pool_windows, self.pool_strides)]

    def block_shapes(self) -> List[Tuple[int, ...]]:
        """Spatial shape after each conv and each pool, in order.

        Raises ConfigError naming the axis if the chain collapses.
        """
        shapes = []
        spatial = self.input_shape[1:]
        for i, (conv, pool) in enumerate(zip(self.conv_specs(), self.pool_specs())):
            for stage, op in (("conv", conv), ("pool", pool)):
                try:
                    spatial = op.output_shape(spatial)
                except ShapeError:
                    raise ConfigError(
                        f"{stage}{i + 1} collapses spatial axis {_collapsed_axis(op, spatial)} "
                        f"(input spatial shape {tuple(spatial)})"
                    ) from None
                shapes.append(spatial)
        return shapes

    @property
    def flatten_size(self) -> int:
        return self.conv_channels[-1] * int(np.prod(self.block_shapes()[-1]))

    @property
    def fc_input_size(self) -> int:
        return self.flatten_size + 1

    def param_shapes(self) -> "OrderedDict[str, Tuple[int, ...]]":
        shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
        for i, spec in enumerate(self.conv_specs(), start=1):
            shapes[f"conv{i}.weight"] = spec.weight_shape
            shapes[f"conv{i}.bias"] = (spec.out_channels,)
        widths = (self.fc_input_size,) + self.fc_widths
        for i in range(N_FC):
            shapes[f"fc{i + 1}.weight"] = (widths[i + 1], widths[i])
            shapes[f"fc{i + 1}.bias"] = (widths[i + 1],)
        shapes["head.weight"] = (self.output_dim, widths[-1])
        shapes["head.bias"] = (self.output_dim,)
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (list(map(list, v)) if k in ("conv_kernels", "conv_strides", "conv_padding",
                                                 "pool_windows", "pool_strides")
                    else list(v) if isinstance(v, tuple) else v)
                for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "NetworkConfig":
        return replace(self, **changes)


def _collapsed_axis(op, spatial) -> str:
    if isinstance(op, ConvSpec):
        kernel, stride, pad = op.kernel, op.stride, op.padding
    else:
        kernel, stride, pad = op.window, op.stride, (0, 0, 0)
    for ax, n, k, s, p in zip("DHW", spatial, kernel, stride, pad):
        if ops.output_extent(n, k, s, p) < 1:
            return ax
    return "?"


def profile(name: str, **overrides) -> NetworkConfig:
    """Named architecture presets from the built-in config.

    ``desk`` trains on a laptop at 32^3; ``paper`` keeps the published dense
    widths (6000, 1000, 500) and dropout 0.5; ``tiny`` is small enough for
    whole-network finite-difference checks.
    """
    cfg = NetworkConfig.from_dict(profile_section(name, "network"))
    return replace(cfg, **overrides) if overrides else cfg


# -- parameters ---------------------------------------------------------------


def he_init_std(fan_in: int) -> float:
    if fan_in < 1:
        raise ParameterError(f"fan_in must be >= 1, got {fan_in}")
    return float(np.sqrt(2.0 / fan_in))


@dataclass
class Network:
    config: NetworkConfig
    params: "OrderedDict[str, np.ndarray]"

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "Network":
        return Network(self.config, OrderedDict((k, v.copy()) for k, v in self.params.items()))

    def layers(self) -> List[dict]:
        """Flat description of the layer sequence, for introspection."""
        cfg = self.config
        out: List[dict] = []
        for i, (conv, pool, shape) in enumerate(
                zip(cfg.conv_specs(), cfg.pool_specs(), cfg.block_shapes()[1::2]), start=1):
            out += [
                {"kind": "conv3d", "name": f"conv{i}", "in_channels": conv.in_channels,
                 "out_channels": conv.out_channels, "kernel": conv.kernel,
                 "stride": conv.stride, "padding": conv.padding},
                {"kind": "maxpool3d", "name": f"pool{i}", "window": pool.window,
                 "stride": pool.stride, "output_spatial": shape},
                {"kind": "dropout", "name": f"dropout{i}", "p": cfg.dropout_p},
                {"kind": "relu", "name": f"relu_conv{i}"},
            ]
        out.append({"kind": "flatten_concat_time", "name": "concat_time",
                    "features": cfg.flatten_size, "time_scale": cfg.time_scale})
        widths = (cfg.fc_input_size,) + cfg.fc_widths
        for i in range(N_FC):
            out += [
                {"kind": "linear", "name": f"fc{i + 1}", "in": widths[i], "out": widths[i + 1]},
                {"kind": "relu", "name": f"relu_fc{i + 1}"},
            ]
        out.append({"kind": "linear", "name": "head", "in": widths[-1], "out": cfg.output_dim})
        return out


def build_network(config: NetworkConfig, seed: int = 0) -> Network:
    """He-initialised weights (std sqrt(2 / fan_in)), zero biases.

    Weights are drawn in declaration order from one seeded generator.
    """
    shapes = config.param_shapes()
    rng = np.random.default_rng(seed)
    dtype = config.np_dtype
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, shape in shapes.items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = (rng.standard_normal(shape) * he_init_std(fan_in)).astype(dtype)
    return Network(config, params)


# -- forward / backward -------------------------------------------------------


@dataclass
class Tape:
    train: bool
    batch: int
    conv_inputs: List[np.ndarray] = field(default_factory=list)
    conv_cols: List[np.ndarray] = field(default_factory=list)
    conv_out_shapes: List[Tuple[int, ...]] = field(default_factory=list)
    pool_argmax: List[np.ndarray] = field(default_factory=list)
    dropout_masks: List[Optional[np.ndarray]] = field(default_factory=list)
    pre_relu: List[np.ndarray] = field(default_factory=list)
    feature_shape: Tuple[int, ...] = ()
    fc_inputs: List[np.ndarray] = field(default_factory=list)
    fc_pre_relu: List[np.ndarray] = field(default_factory=list)
    head_input: Optional[np.ndarray] = None


def check_months(months, time_scale: float, strict: bool = True) -> np.ndarray:
    months = np.asarray(months, dtype=np.float64).reshape(-1, 1)
    bad = (months < 0) | (months > time_scale) | ~np.isfinite(months)
    if bad.any():
        msg = (f"months must lie in [0, {time_scale:g}]; got "
               f"{sorted(set(months[bad].tolist()))}")
        if strict:
            raise InputRangeError(msg)
        warnings.warn(msg, stacklevel=3)
    return months


def forward(net: Network, volumes: np.ndarray, months, train: bool = False,
            rng: Optional[np.random.Generator] = None, strict_months: bool = True,
            keep_tape: bool = True) -> Tuple[np.ndarray, Optional[Tape]]:
    """Predict subscores for a batch of volumes ``(N, C, D, H, W)`` and months."""
    cfg = net.config
    p = net.params
    dtype = cfg.np_dtype
    volumes = np.asarray(volumes)
    if volumes.ndim == 4:
        volumes = volumes[:, None]
    if volumes.shape[1:] != cfg.input_shape:
        raise ShapeError(f"volume batch shape {volumes.shape} does not match "
                         f"network input shape (N,) + {cfg.input_shape}")
    months = check_months(months, cfg.time_scale, strict_months)
    if months.shape[0] != volumes.shape[0]:
        raise ShapeError(f"{months.shape[0]} month values for {volumes.shape[0]} volumes")
    if train and cfg.dropout_p > 0 and rng is None:
        raise ParameterError("train-mode forward with dropout needs an rng")

    tape = Tape(train=train, batch=volumes.shape[0]) if keep_tape else None
    h = volumes.astype(dtype, copy=False)
    for i, (conv, pool) in enumerate(zip(cfg.conv_specs(), cfg.pool_specs()), start=1):
        cols = ops.im2col(h, conv)
        y = ops.conv3d_forward(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], conv, cols=cols)
        pooled, argmax = ops.maxpool3d_forward(y, pool)
        dropped, mask = ops.dropout_forward(pooled, cfg.dropout_p, train, rng)
        if tape is not None:
            tape.conv_inputs.append(h)
            tape.conv_cols.append(cols)
            tape.conv_out_shapes.append(y.shape)
            tape.pool_argmax.append(argmax)
            tape.dropout_masks.append(mask if train else None)
            tape.pre_relu.append(dropped)
        h = ops.relu_forward(dropped)

    t = (months / cfg.time_scale).astype(dtype)
    z = ops.flatten_concat(h, t)
    if tape is not None:
        tape.feature_shape = h.shape
    for i in range(1, N_FC + 1):
        pre = ops.linear_forward(z, p[f"fc{i}.weight"], p[f"fc{i}.bias"])
        if tape is not None:
            tape.fc_inputs.append(z)
            tape.fc_pre_relu.append(pre)
        z = ops.relu_forward(pre)
    if tape is not None:
        tape.head_input = z
    out = ops.linear_forward(z, p["head.weight"], p["head.bias"])
    return out, tape


def backward(net: Network, tape: Tape, grad_predictions: np.ndarray,
             return_time_grad: bool = False):
    """Chain rule through the whole network.

    Returns an ordered dict of parameter gradients (same keys and shapes as
    ``net.params``). With ``return_time_grad`` also returns d(loss)/d(months).
    """
    cfg = net.config
    p = net.params
    if tape is None:
        raise ParameterError("backward needs the tape from a forward call with keep_tape=True")
    if not tape.train and cfg.dropout_p > 0:
        raise ParameterError("backward on an eval-mode tape is only defined when dropout_p == 0")
    if grad_predictions.shape != (tape.batch, cfg.output_dim):
        raise ShapeError(f"grad_predictions shape {grad_predictions.shape} != "
                         f"({tape.batch}, {cfg.output_dim})")

    grads: Dict[str, np.ndarray] = {}
    g, grads["head.weight"], grads["head.bias"] = ops.linear_backward(
        grad_predictions, tape.head_input, p["head.weight"])
    for i in range(N_FC, 0, -1):
        g = ops.relu_backward(g, tape.fc_pre_relu[i - 1])
        g, grads[f"fc{i}.weight"], grads[f"fc{i}.bias"] = ops.linear_backward(
            g, tape.fc_inputs[i - 1], p[f"fc{i}.weight"])
    g, g_time = ops.split_features_time(g, tape.feature_shape)

    specs = list(zip(cfg.conv_specs(), cfg.pool_specs()))
    for i in range(N_CONV, 0, -1):
        conv, pool = specs[i - 1]
        g = ops.relu_backward(g, tape.pre_relu[i - 1])
        mask = tape.dropout_masks[i - 1]
        if mask is not None:
            g = ops.dropout_backward(g, mask, cfg.dropout_p)
        g = ops.maxpool3d_backward(g, tape.pool_argmax[i - 1], tape.conv_out_shapes[i - 1])
        g, grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = ops.conv3d_backward(
            g, tape.conv_inputs[i - 1], p[f"conv{i}.weight"], conv,
            input_grad=(i > 1), cols=tape.conv_cols[i - 1])

    ordered = OrderedDict((name, grads[name]) for name in p)
    if return_time_grad:
        return ordered, g_time / cfg.time_scale
    return ordered


def predict(net: Network, volumes: np.ndarray, months, batch_size: int = 32,
            clamp: bool = False, strict_months: bool = True) -> np.ndarray:
    """Eval-mode predictions in fixed-size chunks."""
    volumes = np.asarray(volumes)
    months = np.asarray(months, dtype=np.float64).reshape(-1)
    chunks = []
    for start in range(0, len(volumes), batch_size):
        out, _ = forward(net, volumes[start:start + batch_size], months[start:start + batch_size],
                         train=False, strict_months=strict_months, keep_tape=False)
        chunks.append(out)
    if not chunks:
        return np.zeros((0, net.config.output_dim), dtype=net.config.np_dtype)
    out = np.concatenate(chunks)
    return np.clip(out, 0, 1) if clamp else out


# -- checkpoints --------------------------------------------------------------
#
# layout (little-endian):
#   b"CTJ1" | u32 format version | u64 header length | header JSON (utf-8)
#   | parameter buffers in declared order
# The header holds the network config and the [name, shape] list.


def _header_bytes(net: Network) -> bytes:
    header = {
        "config": net.config.to_dict(),
        "params": [[name, list(arr.shape)] for name, arr in net.params.items()],
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(net: Network) -> bytes:
    dtype = np.dtype(net.config.np_dtype).newbyteorder("<")
    header = _header_bytes(net)
    parts = [CHECKPOINT_MAGIC, struct.pack("<IQ", CHECKPOINT_VERSION, len(header)), header]
    parts += [np.ascontiguousarray(arr, dtype=dtype).tobytes() for arr in net.params.values()]
    return b"".join(parts)


def save_network(net: Network, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def network_from_bytes(blob: bytes, source: str = "<bytes>") -> Network:
    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    if len(blob) < 16:
        raise CheckpointTruncatedError(f"{source}: truncated header")
    version, header_len = struct.unpack_from("<IQ", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{source}: checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
    offset = 16 + header_len
    if len(blob) < offset:
        raise CheckpointTruncatedError(f"{source}: truncated header")
    try:
        header = json.loads(blob[16:offset].decode("utf-8"))
        config = NetworkConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{source}: unreadable header ({exc})") from exc

    expected = config.param_shapes()
    stored = [(name, tuple(shape)) for name, shape in header.get("params", [])]
    if stored != list(expected.items()):
        raise CheckpointShapeError(
            f"{source}: parameter shapes {stored} do not match the embedded config {list(expected.items())}")
    dtype = np.dtype(config.np_dtype).newbyteorder("<")
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, shape in expected.items():
        nbytes = int(np.prod(shape)) * dtype.itemsize
        if len(blob) < offset + nbytes:
            raise CheckpointTruncatedError(f"{source}: truncated while reading {name}")
        arr = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)), offset=offset)
        params[name] = arr.reshape(shape).astype(config.np_dtype)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointShapeError(f"{source}: {len(blob) - offset} unexpected trailing bytes")
    return Network(config, params)


def load_network(path) -> Network:
    path = Path(path)
    return network_from_bytes(path.read_bytes(), str(path))


def config_hash(payload: dict) -> str:
    """Stable short hash of a JSON-serialisable config tree."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
