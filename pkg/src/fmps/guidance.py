"""Guidance energies D(x0_hat, c), the two x0 predictors, and the normalization trick."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

from .errors import ContractViolation, ShapeError
from .schedule import FlowSchedule
from .tensor import Tensor, Tape, avg_pool2d, conv2d, masked, squared_l2, sub

__all__ = [
    "Identity",
    "InpaintMask",
    "Downsample",
    "GaussianBlur",
    "gaussian_kernel",
    "GuidanceEnergy",
    "ClassifierLogitEnergy",
    "PredictorVariant",
    "X0Predictor",
    "predict_x0_gradient_aware",
    "predict_x0_gradient_free",
    "EnergyGradient",
    "energy_gradient",
    "normalize_correction",
]


# ------------------------------------------------------------------ operators
# Each operator maps a batch (B, *data_shape) to a batch of observations.


class Identity:
    name = "identity"

    def __call__(self, x: Tensor) -> Tensor:
        return x

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64)


class InpaintMask:
    """Keeps the coordinates where ``mask`` is 1 and zeroes the rest."""

    name = "inpaint-mask"

    def __init__(self, mask):
        m = np.asarray(mask, dtype=np.float64)
        if not np.all((m == 0) | (m == 1)):
            raise ContractViolation("mask entries must be 0 or 1")
        self.mask = m

    def __call__(self, x: Tensor) -> Tensor:
        return masked(x, self.mask)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.mask


class Downsample:
    """k x k average pooling of an image (super-resolution observation)."""

    name = "downsample"

    def __init__(self, factor: int):
        if int(factor) < 1:
            raise ContractViolation("downsample factor must be >= 1")
        self.factor = int(factor)

    def __call__(self, x: Tensor) -> Tensor:
        return avg_pool2d(x, self.factor)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return avg_pool2d(Tensor._wrap(np.asarray(x, dtype=np.float64)), self.factor).data


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    if size < 1 or size % 2 == 0 or sigma <= 0:
        raise ContractViolation(f"blur kernel needs odd size and positive sigma, got {size}, {sigma}")
    r = np.arange(size) - size // 2
    g = np.exp(-0.5 * (r / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


class GaussianBlur:
    name = "gaussian-blur"

    def __init__(self, kernel_size: int = 5, sigma: float = 1.0):
        self.kernel_size = int(kernel_size)
        self.sigma = float(sigma)
        self.kernel = gaussian_kernel(self.kernel_size, self.sigma)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernel)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return conv2d(Tensor._wrap(np.asarray(x, dtype=np.float64)), self.kernel).data


# -------------------------------------------------------------------- energies


class GuidanceEnergy:
    """Quadratic distance D(x) = ||A(x) - c||^2, one value per batch row."""

    def __init__(self, operator, condition):
        self.operator = operator
        c = condition.data if isinstance(condition, Tensor) else np.asarray(condition, dtype=np.float64)
        if not np.all(np.isfinite(c)):
            raise ContractViolation("condition contains NaN or Inf")
        if isinstance(operator, InpaintMask):
            c = operator.apply(c)
        self.condition = c

    @property
    def name(self) -> str:
        return self.operator.name

    def __call__(self, x0: Tensor) -> Tensor:
        obs = self.operator(x0)
        if obs.shape[1:] != self.condition.shape:
            raise ShapeError(f"{self.name} energy", obs.shape[1:], self.condition.shape)
        diff = sub(obs, self.condition)
        return squared_l2(diff, axis=tuple(range(1, diff.ndim)))

    def residual(self, x: np.ndarray) -> np.ndarray:
        """Per-row ||A(x) - c||_2 for plain arrays."""
        obs = self.operator.apply(x)
        diff = (obs - self.condition).reshape(len(obs), -1)
        return np.sqrt((diff * diff).sum(axis=1))


class ClassifierLogitEnergy:
    """D(x) = -logit of the target class under a binary classifier."""

    name = "classifier-logit"

    def __init__(self, classifier, target: int = 1):
        if target not in (0, 1):
            raise ContractViolation("binary classifier target must be 0 or 1")
        self.classifier = classifier
        self.target = int(target)

    def __call__(self, x0: Tensor) -> Tensor:
        z = self.classifier.logit(x0)
        return -z if self.target == 1 else z

    def residual(self, x: np.ndarray) -> np.ndarray:
        return self(Tensor._wrap(np.asarray(x, dtype=np.float64))).data


# ------------------------------------------------------------------ predictors


class PredictorVariant(str, Enum):
    GRADIENT_AWARE = "gradient-aware"
    GRADIENT_FREE = "gradient-free"


def predict_x0_gradient_aware(field, x, t: float) -> Tensor:
    """One Euler step from t straight to 0: x - t v(x, t)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    return x - float(t) * field(x, t)


def predict_x0_gradient_free(schedule: FlowSchedule, x, t: float, x1) -> Tensor:
    """Invert the interpolation with the chain's starting noise: (x - b_t x1) / a_t."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    x1 = x1.data if isinstance(x1, Tensor) else np.asarray(x1, dtype=np.float64)
    if x1.shape != x.shape:
        raise ShapeError("predict_x0_gradient_free", x.shape, x1.shape)
    a, b, _, _ = schedule.path(t)
    if a == 0.0:
        raise ContractViolation(f"gradient-free prediction undefined at t={t} (a_t = 0)")
    return (x - b * x1) / a


@dataclass
class X0Predictor:
    variant: PredictorVariant
    schedule: FlowSchedule
    x1: np.ndarray | None = None

    def __post_init__(self):
        self.variant = PredictorVariant(self.variant)
        if self.variant is PredictorVariant.GRADIENT_FREE and self.x1 is None:
            raise ContractViolation("gradient-free predictor needs the stored initial noise x1")

    def __call__(self, field, x, t: float) -> Tensor:
        if self.variant is PredictorVariant.GRADIENT_AWARE:
            return predict_x0_gradient_aware(field, x, t)
        return predict_x0_gradient_free(self.schedule, x, t, self.x1)


class EnergyGradient(NamedTuple):
    grad: Tensor
    value: np.ndarray
    velocity: Tensor | None  # the forward used inside the prediction, gradient-aware only


def energy_gradient(energy, predictor: X0Predictor, field, x, t: float) -> EnergyGradient:
    """Per-row gradient of D(x0_hat(x, t), c) with respect to x.

    Rows are independent, so differentiating the summed energy gives each
    row its own gradient. The gradient-free path never calls the field.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    leaf = Tensor._wrap(x.data)
    velocity = None
    with Tape() as tape:
        tape.watch(leaf)
        if predictor.variant is PredictorVariant.GRADIENT_AWARE:
            velocity = field(leaf, t)
            x0 = leaf - float(t) * velocity
        else:
            x0 = predictor(field, leaf, t)
        d = energy(x0)
        total = d.sum()
    grad = tape.gradient(total, leaf)
    if velocity is not None:
        velocity = Tensor._wrap(velocity.data)
    return EnergyGradient(grad, d.data.copy(), velocity)


def normalize_correction(v, grad, axes=None) -> Tensor:
    """Rescale ``grad`` to the norm of ``v``; zero where ``grad`` is exactly zero.

    ``axes`` selects the axes the norms run over (all of them by default); pass
    the non-batch axes to normalize each chain separately.
    """
    vd = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
    gd = grad.data if isinstance(grad, Tensor) else np.asarray(grad, dtype=np.float64)
    if vd.shape != gd.shape:
        raise ShapeError("normalize_correction", vd.shape, gd.shape)
    if axes is None:
        axes = tuple(range(gd.ndim))
    nv = np.sqrt((vd * vd).sum(axis=axes, keepdims=True))
    # divide by the largest entry first so tiny gradients do not underflow to a zero norm
    peak = np.abs(gd).max(axis=axes, keepdims=True)
    unit = gd / np.where(peak > 0, peak, 1.0)
    ng = np.sqrt((unit * unit).sum(axis=axes, keepdims=True))
    safe = np.where(ng > 0, ng, 1.0)
    return Tensor._wrap(np.where(peak > 0, unit * (nv / safe), 0.0))
