"""Velocity fields v(x_t, t): a trainable MLP and a closed-form Gaussian field.

Every field takes a batch ``x`` of shape ``(B, *data_shape)`` and a time (a
float, or one time per row) and returns a tensor of the same shape. Fields keep
two counters, ``forward_count`` and ``backward_count``, so samplers can be
checked for how often they touch the network.
"""

from __future__ import annotations

import copy
import json
import struct
import threading
from pathlib import Path

import numpy as np

from .errors import ContractViolation, FMPSError, ShapeError
from .gaussian import GaussianSpec
from .schedule import FlowSchedule, ScheduleKind
from .tensor import Tensor, _active_tape, affine, gelu, reshape, concat, tanh, tap

__all__ = [
    "VelocityField",
    "GaussianVelocityField",
    "MLP",
    "MLPVelocityField",
    "Classifier",
    "time_embedding",
    "CheckpointError",
    "CheckpointFormatError",
    "CheckpointVersionError",
    "CheckpointTruncatedError",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
]

_ACTIVATIONS = {"gelu": gelu, "tanh": tanh}


def _check_times(t, batch: int):
    t_arr = np.asarray(t, dtype=np.float64)
    if t_arr.ndim not in (0, 1) or (t_arr.ndim == 1 and t_arr.shape[0] != batch):
        raise ShapeError("velocity time", t_arr.shape, (batch,))
    if np.any((t_arr < 0.0) | (t_arr > 1.0)) or not np.all(np.isfinite(t_arr)):
        raise ContractViolation(f"time outside [0, 1]: {t}")
    return t_arr


class VelocityField:
    """Base class; subclasses implement :meth:`_velocity`."""

    def __init__(self, data_shape):
        self.data_shape = tuple(int(s) for s in data_shape)
        self.forward_count = 0
        self.backward_count = 0
        self._lock = threading.Lock()

    @property
    def dim(self) -> int:
        return int(np.prod(self.data_shape))

    def reset_counters(self) -> None:
        with self._lock:
            self.forward_count = 0
            self.backward_count = 0

    def _count_backward(self) -> None:
        with self._lock:
            self.backward_count += 1

    def __call__(self, x, t) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim < 1 or x.shape[1:] != self.data_shape:
            raise ShapeError("velocity", x.shape, ("B",) + self.data_shape)
        t_arr = _check_times(t, x.shape[0])
        with self._lock:
            self.forward_count += 1
        out = self._velocity(x, t_arr)
        if _active_tape() is not None:
            out = tap(out, self._count_backward)
        return out

    def _velocity(self, x: Tensor, t: np.ndarray) -> Tensor:
        raise NotImplementedError

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("_lock", None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()


class GaussianVelocityField(VelocityField):
    """Exact marginal velocity for diagonal-Gaussian data.

    Uses v = a_dot E[x_0 | x_t] + b_dot E[eps | x_t], which is affine in x_t
    and finite on all of [0, 1].
    """

    def __init__(self, spec: GaussianSpec, schedule: FlowSchedule | None = None, data_shape=None):
        super().__init__(data_shape or (spec.dim,))
        if self.dim != spec.dim:
            raise ShapeError("GaussianVelocityField", self.data_shape, spec.mean.shape)
        self.spec = spec
        self.schedule = schedule or FlowSchedule()

    def coefficients(self, t):
        """Return (slope, offset) with v = slope * x + offset, per coordinate."""
        a, b, a_dot, b_dot = self.schedule.path(t)
        a = np.asarray(a)[..., None]
        b = np.asarray(b)[..., None]
        a_dot = np.asarray(a_dot)[..., None]
        b_dot = np.asarray(b_dot)[..., None]
        mu, var = self.spec.mean, self.spec.var
        denom = a * a * var + b * b
        slope = (a_dot * a * var + b_dot * b) / denom
        offset = a_dot * mu - slope * a * mu
        return slope, offset

    def _velocity(self, x, t):
        slope, offset = self.coefficients(t)
        flat = reshape(x, (x.shape[0], self.dim))
        return reshape(flat * slope + offset, x.shape)


def time_embedding(t: np.ndarray, batch: int, size: int) -> np.ndarray:
    """Sinusoidal features of t, shape (batch, size)."""
    half = size // 2
    freqs = np.geomspace(1.0, 100.0, half) if half > 1 else np.ones(half)
    t_col = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))[:, None]
    ang = t_col * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if size % 2:
        emb = np.concatenate([emb, t_col], axis=1)
    return emb


class MLP:
    """Plain fully connected network; ``params`` alternates weights and biases."""

    def __init__(self, widths, activation: str = "gelu", seed: int = 0, zero_last: bool = True):
        if activation not in _ACTIVATIONS:
            raise ContractViolation(f"unknown activation {activation!r}")
        self.widths = [int(w) for w in widths]
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ContractViolation(f"bad layer widths {widths}")
        self.activation = activation
        rng = np.random.default_rng(seed)
        self.params: list[Tensor] = []
        n_layers = len(self.widths) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            if zero_last and i == n_layers - 1:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(1.0 / fan_in)
            self.params += [Tensor._wrap(w), Tensor._wrap(np.zeros(fan_out))]

    def __call__(self, h: Tensor) -> Tensor:
        act = _ACTIVATIONS[self.activation]
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            h = affine(h, self.params[2 * i], self.params[2 * i + 1])
            if i < n_layers - 1:
                h = act(h)
        return h

    def param_vector(self) -> np.ndarray:
        return np.concatenate([p.flat() for p in self.params])


class MLPVelocityField(VelocityField):
    def __init__(
        self,
        data_shape=(2,),
        hidden=(128, 128, 128),
        time_embed: int = 32,
        activation: str = "gelu",
        seed: int = 0,
        schedule: FlowSchedule | None = None,
    ):
        super().__init__(data_shape)
        self.time_embed = int(time_embed)
        self.schedule = schedule or FlowSchedule()
        self.mlp = MLP([self.dim + self.time_embed, *hidden, self.dim], activation, seed)
        self.metadata: dict = {}

    @property
    def params(self) -> list[Tensor]:
        return self.mlp.params

    def copy(self) -> "MLPVelocityField":
        twin = copy.deepcopy(self)
        twin.reset_counters()
        return twin

    def _velocity(self, x, t):
        batch = x.shape[0]
        flat = reshape(x, (batch, self.dim))
        emb = time_embedding(t, batch, self.time_embed)
        out = self.mlp(concat([flat, emb], axis=1))
        return reshape(out, x.shape)


class Classifier:
    """Small MLP returning one logit per sample (log-odds of the target class)."""

    def __init__(self, data_shape=(2,), hidden=(64, 64), activation: str = "gelu", seed: int = 0):
        self.data_shape = tuple(int(s) for s in data_shape)
        self.dim = int(np.prod(self.data_shape))
        self.mlp = MLP([self.dim, *hidden, 1], activation, seed, zero_last=False)
        self.metadata: dict = {}

    @property
    def params(self) -> list[Tensor]:
        return self.mlp.params

    def logit(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[1:] != self.data_shape:
            raise ShapeError("classifier", x.shape, ("B",) + self.data_shape)
        out = self.mlp(reshape(x, (x.shape[0], self.dim)))
        return reshape(out, (x.shape[0],))

    def predict(self, x) -> np.ndarray:
        return (self.logit(x).data > 0).astype(int)


# ------------------------------------------------------------------ checkpoints

CHECKPOINT_MAGIC = b"FMPSCKP1"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<8sII")
_COUNT = struct.Struct("<Q")


class CheckpointError(FMPSError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def save_checkpoint(model, path) -> None:
    """Write an MLP velocity field or classifier in the FMPSCKP1 layout.

    Layout (little-endian): 8-byte magic, u32 version, u32 header length,
    UTF-8 JSON header, then per parameter a u64 element count followed by that
    many float64 values.
    """
    if isinstance(model, MLPVelocityField):
        header = {
            "model": "mlp-velocity",
            "schedule": model.schedule.kind.value,
            "t_min": model.schedule.t_min,
            "t_max": model.schedule.t_max,
            "time_embed": model.time_embed,
        }
    elif isinstance(model, Classifier):
        header = {"model": "classifier"}
    else:
        raise ContractViolation(f"cannot checkpoint {type(model).__name__}")
    header.update(
        data_shape=list(model.data_shape),
        widths=model.mlp.widths,
        activation=model.mlp.activation,
        param_shapes=[list(p.shape) for p in model.params],
        metadata=model.metadata,
    )
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)), blob]
    for p in model.params:
        parts.append(_COUNT.pack(p.size))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        if raw and not CHECKPOINT_MAGIC.startswith(raw[:8]):
            raise CheckpointFormatError(f"{path}: not an FMPS checkpoint")
        raise CheckpointTruncatedError(f"{path}: file ends inside the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    pos = _PREFIX.size
    if len(raw) < pos + hlen:
        raise CheckpointTruncatedError(f"{path}: file ends inside the header")
    try:
        header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
        shapes = [tuple(s) for s in header["param_shapes"]]
        kind = header["model"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt header ({exc})") from None
    pos += hlen

    arrays = []
    for shape in shapes:
        if len(raw) < pos + _COUNT.size:
            raise CheckpointTruncatedError(f"{path}: file ends before a parameter block")
        (count,) = _COUNT.unpack_from(raw, pos)
        pos += _COUNT.size
        if count != int(np.prod(shape)):
            raise CheckpointFormatError(f"{path}: parameter block of {count} values for shape {shape}")
        nbytes = 8 * count
        if len(raw) < pos + nbytes:
            raise CheckpointTruncatedError(f"{path}: parameter data truncated")
        arrays.append(np.frombuffer(raw, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape))
        pos += nbytes
    if pos != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - pos} unexpected trailing bytes")

    widths = header["widths"]
    if kind == "mlp-velocity":
        schedule = FlowSchedule(ScheduleKind(header["schedule"]), header["t_min"], header["t_max"])
        model = MLPVelocityField(
            header["data_shape"],
            hidden=widths[1:-1],
            time_embed=header["time_embed"],
            activation=header["activation"],
            schedule=schedule,
        )
    elif kind == "classifier":
        model = Classifier(header["data_shape"], hidden=widths[1:-1], activation=header["activation"])
    else:
        raise CheckpointFormatError(f"{path}: unknown model kind {kind!r}")
    if [list(p.shape) for p in model.params] != [list(s) for s in shapes]:
        raise CheckpointFormatError(f"{path}: parameter shapes disagree with layer widths")
    for p, arr in zip(model.params, arrays):
        p.data = arr
    model.metadata = header.get("metadata", {})
    return model
