"""Sample-set metrics: kernel MMD, sliced Wasserstein, PSNR and operator residuals.

These stand in for FID/KID/LPIPS, which would need pretrained networks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import wasserstein_distance

from .errors import ContractViolation, ShapeError
from .tensor import Tensor

__all__ = [
    "SampleSet",
    "mmd_rbf",
    "sliced_wasserstein",
    "psnr",
    "residual_norm",
    "PSNR_CAP_DB",
    "MetricRow",
    "write_metric_csv",
]

PSNR_CAP_DB = 99.0


@dataclass
class SampleSet:
    samples: np.ndarray
    label: str = ""

    def __post_init__(self):
        arr = self.samples.data if isinstance(self.samples, Tensor) else np.asarray(self.samples, dtype=np.float64)
        if arr.ndim < 1 or len(arr) == 0:
            raise ContractViolation("sample set must be non-empty")
        self.samples = arr

    def flat(self) -> np.ndarray:
        return self.samples.reshape(len(self.samples), -1)


def _flat(a) -> np.ndarray:
    if isinstance(a, SampleSet):
        return a.flat()
    arr = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    return arr.reshape(len(arr), -1)


def mmd_rbf(a, b, bandwidth: float = 1.0, biased: bool = False) -> float:
    """Squared MMD with kernel exp(-||x - y||^2 / (2 bandwidth^2)).

    The default is the unbiased U-statistic (diagonal terms dropped), which
    can dip slightly below zero for matching distributions; ``biased=True``
    gives the V-statistic, which is zero for identical sets.
    """
    x, y = _flat(a), _flat(b)
    if x.shape[1] != y.shape[1]:
        raise ShapeError("mmd_rbf", x.shape, y.shape)
    if len(x) < 2 or len(y) < 2:
        raise ContractViolation("MMD needs at least two samples per set")
    if not bandwidth > 0:
        raise ContractViolation("bandwidth must be positive")
    gamma = 1.0 / (2.0 * bandwidth * bandwidth)
    kxx = np.exp(-gamma * cdist(x, x, "sqeuclidean"))
    kyy = np.exp(-gamma * cdist(y, y, "sqeuclidean"))
    kxy = np.exp(-gamma * cdist(x, y, "sqeuclidean"))
    if biased:
        return float(kxx.mean() + kyy.mean() - 2.0 * kxy.mean())
    n, m = len(x), len(y)
    sxx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


def sliced_wasserstein(a, b, projections: int = 128, seed: int = 0) -> float:
    """Mean 1-Wasserstein distance over random unit projections."""
    x, y = _flat(a), _flat(b)
    if x.shape[1] != y.shape[1]:
        raise ShapeError("sliced_wasserstein", x.shape, y.shape)
    if projections < 1:
        raise ContractViolation("need at least one projection")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((projections, x.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    px, py = x @ dirs.T, y @ dirs.T
    return float(np.mean([wasserstein_distance(px[:, k], py[:, k]) for k in range(projections)]))


def psnr(a, b, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs report ``PSNR_CAP_DB``."""
    x = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    y = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError("psnr", x.shape, y.shape)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(data_range * data_range / mse)))


def residual_norm(operator, x, y) -> float:
    """||A(x) - y||_2 over all entries; ``operator`` needs an ``apply`` method or be callable on arrays."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    yd = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    ax = operator.apply(xd) if hasattr(operator, "apply") else np.asarray(operator(xd), dtype=np.float64)
    if ax.shape != yd.shape:
        raise ShapeError("residual_norm", ax.shape, yd.shape)
    return float(np.sqrt(np.sum((ax - yd) ** 2)))


@dataclass(frozen=True)
class MetricRow:
    task: str
    variant: str
    r: float
    T: int
    metric: str
    value: float


def write_metric_csv(rows, path) -> None:
    """task,variant,r,T,metric,value"""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "variant", "r", "T", "metric", "value"])
        for row in rows:
            w.writerow([row.task, row.variant, repr(float(row.r)), int(row.T), row.metric, repr(float(row.value))])
