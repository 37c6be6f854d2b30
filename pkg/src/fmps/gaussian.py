"""Closed-form marginals, scores, velocities and posteriors for Gaussian data.

Everything here is a pure function of a diagonal Gaussian ``p_0`` and a
:class:`~fmps.schedule.FlowSchedule`; it is the ground truth the samplers and
learned fields are checked against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, ShapeError
from .schedule import FlowSchedule
from .tensor import Tensor

__all__ = [
    "GaussianSpec",
    "GaussianPosterior",
    "marginal_at",
    "score_at",
    "log_density",
    "true_velocity",
    "exact_posterior",
]


@dataclass(frozen=True)
class GaussianSpec:
    """Diagonal Gaussian N(mean, diag(var))."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        var = np.atleast_1d(np.asarray(self.var, dtype=np.float64))
        if var.shape != mean.shape:
            raise ShapeError("GaussianSpec", mean.shape, var.shape)
        if np.any(var <= 0):
            raise ContractViolation("covariance entries must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @classmethod
    def standard(cls, dim: int) -> "GaussianSpec":
        return cls(np.zeros(dim), np.ones(dim))

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + np.sqrt(self.var) * rng.standard_normal((n, self.dim))


@dataclass(frozen=True)
class GaussianPosterior:
    """Posterior over x_0 with a full covariance (zero variance allowed on pinned coordinates)."""

    mean: np.ndarray
    cov: np.ndarray

    @property
    def var(self) -> np.ndarray:
        return np.diag(self.cov).copy()


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def marginal_at(spec: GaussianSpec, schedule: FlowSchedule, t: float) -> GaussianSpec:
    """Law of x_t: mean a_t mu, variance a_t^2 var + b_t^2 (unclamped)."""
    a, b, _, _ = schedule.path(t)
    return GaussianSpec(a * spec.mean, a * a * spec.var + b * b)


def score_at(spec: GaussianSpec, schedule: FlowSchedule, x, t: float) -> Tensor:
    m = marginal_at(spec, schedule, t)
    xd = _data(x)
    return Tensor._wrap(-(xd - m.mean) / m.var)


def log_density(spec: GaussianSpec, schedule: FlowSchedule, x, t: float) -> np.ndarray:
    """log p_t(x) per row of ``x``."""
    m = marginal_at(spec, schedule, t)
    xd = np.atleast_2d(_data(x))
    z = (xd - m.mean) ** 2 / m.var
    return -0.5 * (z.sum(axis=-1) + np.log(2 * np.pi * m.var).sum())


def true_velocity(spec: GaussianSpec, schedule: FlowSchedule, x, t: float) -> Tensor:
    """lambda_t x - beta_t * score, with both coefficients from the clamped schedule.

    The score is evaluated at the same clamped time so that the pair stays
    consistent at the endpoints.
    """
    c = schedule.eval(t)
    tc = schedule.clamp(t)
    s = score_at(spec, schedule, x, tc).data
    return Tensor._wrap(c.lam * _data(x) - c.beta * s)


def exact_posterior(spec: GaussianSpec, operator, y, noise_var: float) -> GaussianPosterior:
    """Posterior of x_0 ~ spec given y = A x_0 + N(0, noise_var I).

    ``operator`` is either a 0/1 mask over the coordinates (observing the masked
    ones) or a dense matrix with independent rows. ``noise_var = 0`` conditions
    exactly; ``noise_var = inf`` returns the prior.
    """
    mu, var = spec.mean, spec.var
    prior_cov = np.diag(var)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    noise_var = float(noise_var)
    if noise_var < 0:
        raise ContractViolation("noise variance must be non-negative")
    op = np.asarray(operator, dtype=np.float64)

    if op.ndim == 1:
        if op.shape != mu.shape:
            raise ShapeError("exact_posterior", op.shape, mu.shape)
        observed = op != 0
        matrix = np.eye(mu.size)[observed]
        if y.shape == mu.shape:
            y = y[observed]
    else:
        matrix = op
    if matrix.shape[1] != mu.size or y.shape != (matrix.shape[0],):
        raise ShapeError("exact_posterior", matrix.shape, y.shape)
    if np.isinf(noise_var):
        return GaussianPosterior(mu.copy(), prior_cov)

    gram = matrix @ prior_cov @ matrix.T + noise_var * np.eye(matrix.shape[0])
    if np.linalg.matrix_rank(gram) < matrix.shape[0]:
        raise ContractViolation("observation operator is ill-posed for exact conditioning")
    gain = prior_cov @ matrix.T @ np.linalg.inv(gram)
    mean = mu + gain @ (y - matrix @ mu)
    cov = prior_cov - gain @ matrix @ prior_cov
    cov = 0.5 * (cov + cov.T)
    return GaussianPosterior(mean, np.where(np.abs(cov) < 1e-15, 0.0, cov))
