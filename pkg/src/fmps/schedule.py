"""Interpolation paths x_t = a_t x_0 + b_t eps and their velocity/score coefficients.

Data sits at t=0 and noise at t=1. The coefficients that turn a score into a
velocity are

    lambda_t = a_dot / a
    beta_t   = b (b_dot - lambda_t b)

so that v(x, t) = lambda_t x - beta_t * score(x, t). Both diverge as a_t -> 0
(t -> 1), which is why :meth:`FlowSchedule.eval` clamps t into
``[t_min, t_max]``. The raw path (:meth:`FlowSchedule.path`) is exact on the
closed interval and is what interpolation and x_0 inversion use.

Reading the same formula with the roles of a and b swapped gives
lambda = b_dot/b, beta = a (a_dot - lambda a); that variant only matches the
Gaussian velocity when data sits at t=1, so it is not used here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ContractViolation, ShapeError
from .tensor import Tensor

__all__ = ["ScheduleKind", "ScheduleCoeffs", "FlowSchedule", "forward_interpolate"]


class ScheduleKind(str, Enum):
    RECTIFIED_LINEAR = "rectified-linear"
    VP_COSINE = "variance-preserving-cosine"


@dataclass(frozen=True)
class ScheduleCoeffs:
    a: float
    b: float
    a_dot: float
    b_dot: float
    lam: float
    beta: float


def _check_t(t: float) -> float:
    t = float(t)
    if not (0.0 <= t <= 1.0):
        raise ContractViolation(f"time {t} outside [0, 1]")
    return t


@dataclass(frozen=True)
class FlowSchedule:
    kind: ScheduleKind = ScheduleKind.RECTIFIED_LINEAR
    t_min: float = 1e-3
    t_max: float = 1.0 - 1e-3

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if not (0.0 < self.t_min < self.t_max < 1.0):
            raise ContractViolation(
                f"clamp window must satisfy 0 < t_min < t_max < 1, got ({self.t_min}, {self.t_max})"
            )

    def path(self, t):
        """Return (a, b, a_dot, b_dot) at t; accepts a float or an array of times."""
        t_arr = np.asarray(t, dtype=np.float64)
        if np.any((t_arr < 0.0) | (t_arr > 1.0)):
            raise ContractViolation(f"time outside [0, 1]: {t}")
        if self.kind is ScheduleKind.RECTIFIED_LINEAR:
            a = 1.0 - t_arr
            b = t_arr.copy()
            a_dot = np.full_like(t_arr, -1.0)
            b_dot = np.ones_like(t_arr)
        else:
            half_pi = 0.5 * math.pi
            a = np.cos(half_pi * t_arr)
            b = np.sin(half_pi * t_arr)
            # pin the endpoints exactly; cos(pi/2) is 6e-17 in floating point
            a = np.where(t_arr == 1.0, 0.0, np.where(t_arr == 0.0, 1.0, a))
            b = np.where(t_arr == 1.0, 1.0, np.where(t_arr == 0.0, 0.0, b))
            a_dot = -half_pi * b
            b_dot = half_pi * a
        if np.ndim(t) == 0:
            return float(a), float(b), float(a_dot), float(b_dot)
        return a, b, a_dot, b_dot

    def clamp(self, t: float) -> float:
        return min(max(_check_t(t), self.t_min), self.t_max)

    def eval(self, t: float) -> ScheduleCoeffs:
        """All six coefficients at t, evaluated at t clamped into [t_min, t_max]."""
        tc = self.clamp(t)
        a, b, a_dot, b_dot = self.path(tc)
        lam = a_dot / a
        beta = b * (b_dot - lam * b)
        return ScheduleCoeffs(a=a, b=b, a_dot=a_dot, b_dot=b_dot, lam=lam, beta=beta)


def forward_interpolate(schedule: FlowSchedule, x0, noise, t: float) -> Tensor:
    """a_t * x0 + b_t * noise, unclamped."""
    x0 = x0 if isinstance(x0, Tensor) else Tensor(x0)
    noise = noise if isinstance(noise, Tensor) else Tensor(noise)
    if x0.shape != noise.shape:
        raise ShapeError("forward_interpolate", x0.shape, noise.shape)
    a, b, _, _ = schedule.path(_check_t(t))
    return Tensor._wrap(a * x0.data + b * noise.data)
