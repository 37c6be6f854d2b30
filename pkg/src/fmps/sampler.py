"""Reverse-time Euler sampling: unconditional, FMPS-gradient and FMPS-free.

All three samplers walk the uniform grid t_i = 1 - i/T from 1 down to 0 and
apply x <- x + h (v - correction) with signed step h = t_{i+1} - t_i < 0.
With guidance the correction is built from the energy gradient g:

    g1 = ||v|| / ||g|| * g          (normalization on; per chain)
    correction = CORRECTION_SIGN * r * beta_t * g1

``CORRECTION_SIGN`` is -1: with h < 0 this moves every chain down the energy,
i.e. x <- x + h (v + r beta_t g1). The literal "+h(v - r beta g1)" form with a
positive beta_t would climb the energy instead.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from enum import Enum

import numpy as np

from .errors import ContractViolation, DivergenceError
from .guidance import PredictorVariant, X0Predictor, energy_gradient, normalize_correction
from .schedule import FlowSchedule
from .tensor import Tensor

__all__ = [
    "CORRECTION_SIGN",
    "CHAIN_BLOCK",
    "Variant",
    "SamplerConfig",
    "StepRecord",
    "Trajectory",
    "time_grid",
    "initial_noise",
    "euler_update",
    "guided_step",
    "sample",
    "sample_unconditional",
    "sample_fmps_gradient",
    "sample_fmps_free",
]

CORRECTION_SIGN = -1.0


class Variant(str, Enum):
    UNCONDITIONAL = "unconditional"
    FMPS_GRADIENT = "fmps-gradient"
    FMPS_FREE = "fmps-free"


@dataclass(frozen=True)
class SamplerConfig:
    variant: Variant = Variant.UNCONDITIONAL
    steps: int = 100
    r: float = 0.0
    normalization: bool = True
    seed: int = 0
    chains: int = 1
    correction_cap: float | None = 10.0
    schedule: FlowSchedule = dc_field(default_factory=FlowSchedule)

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.steps < 1:
            raise ContractViolation("need at least one step")
        if self.variant is Variant.FMPS_FREE and self.steps < 2:
            raise ContractViolation("fmps-free skips its first step, so it needs T >= 2")
        if not (self.r >= 0 and np.isfinite(self.r)):
            raise ContractViolation(f"guidance strength must be finite and >= 0, got {self.r}")
        if self.chains < 1:
            raise ContractViolation("need at least one chain")
        if self.correction_cap is not None and not self.correction_cap > 0:
            raise ContractViolation("correction cap must be positive (or None to disable)")


@dataclass
class StepRecord:
    """Per-step diagnostics; array fields hold one entry per chain."""

    step: int
    t: float
    beta: float
    norm_v: np.ndarray
    norm_g: np.ndarray | None = None
    d_value: np.ndarray | None = None

    @property
    def guided(self) -> bool:
        return self.norm_g is not None


@dataclass
class Trajectory:
    times: np.ndarray
    records: list[StepRecord]
    states: list[np.ndarray] | None = None

    def max_correction_ratio(self) -> float:
        """Largest ||g1|| / ||v|| over guided steps and chains (0 if unguided)."""
        best = 0.0
        for rec in self.records:
            if rec.guided:
                with np.errstate(divide="ignore", invalid="ignore"):
                    ratio = rec.norm_g / rec.norm_v
                ratio = ratio[np.isfinite(ratio)]
                if ratio.size:
                    best = max(best, float(ratio.max()))
        return best

    def to_csv(self, path=None) -> str:
        """step,t,norm_v,norm_g,D_value,beta with chain means; empty cells for unguided steps."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "t", "norm_v", "norm_g", "D_value", "beta"])
        for rec in self.records:
            w.writerow(
                [
                    rec.step,
                    repr(float(rec.t)),
                    repr(float(np.mean(rec.norm_v))),
                    "" if rec.norm_g is None else repr(float(np.mean(rec.norm_g))),
                    "" if rec.d_value is None else repr(float(np.mean(rec.d_value))),
                    repr(float(rec.beta)),
                ]
            )
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def time_grid(steps: int) -> np.ndarray:
    """[1, 1 - 1/T, ..., 1/T, 0]."""
    return 1.0 - np.arange(steps + 1) / steps


def initial_noise(config: SamplerConfig, data_shape) -> np.ndarray:
    rng = np.random.default_rng(config.seed)
    return rng.standard_normal((config.chains, *tuple(data_shape)))


def _chain_norms(a: np.ndarray) -> np.ndarray:
    flat = a.reshape(len(a), -1)
    return np.sqrt((flat * flat).sum(axis=1))


def euler_update(x, h: float, v, correction=None):
    """x + h * (v - correction); the correction is omitted entirely when None."""
    xd = x.data if isinstance(x, Tensor) else x
    vd = v.data if isinstance(v, Tensor) else v
    if correction is None:
        return xd + h * vd
    cd = correction.data if isinstance(correction, Tensor) else correction
    return xd + h * (vd - cd)


def _plain_step(x, t, t_next, field, step, schedule):
    v = field(Tensor._wrap(x), t).data
    rec = StepRecord(step, t, schedule.eval(t).beta, _chain_norms(v))
    return euler_update(x, t_next - t, v), rec


def guided_step(x, t: float, t_next: float, field, energy, config: SamplerConfig, predictor: X0Predictor, step: int = 0):
    """One Euler step of the guided ODE; returns (next state, StepRecord).

    With r = 0 this is exactly the unconditional step.
    """
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if not t > t_next:
        raise ContractViolation(f"reverse step needs t > t_next, got {t} -> {t_next}")
    if config.r == 0:
        return _plain_step(xd, t, t_next, field, step, config.schedule)
    h = t_next - t
    beta = config.schedule.eval(t).beta
    if predictor.variant is PredictorVariant.GRADIENT_AWARE:
        eg = energy_gradient(energy, predictor, field, Tensor._wrap(xd), t)
        v = eg.velocity.data
    else:
        v = field(Tensor._wrap(xd), t).data
        eg = energy_gradient(energy, predictor, field, Tensor._wrap(xd), t)
    g = eg.grad.data
    axes = tuple(range(1, g.ndim))
    g1 = normalize_correction(v, g, axes).data if config.normalization else g
    corr = config.r * beta * g1
    norm_v = _chain_norms(v)
    if config.correction_cap is not None:
        limit = config.correction_cap * norm_v
        norm_c = _chain_norms(corr)
        scale = np.where(norm_c > limit, limit / np.where(norm_c > 0, norm_c, 1.0), 1.0)
        corr = corr * scale.reshape((-1,) + (1,) * (corr.ndim - 1))
    rec = StepRecord(step, t, beta, norm_v, _chain_norms(g1), eg.value)
    return euler_update(xd, h, v, CORRECTION_SIGN * corr), rec


def _run_chains(field, energy, config: SamplerConfig, x_init: np.ndarray, keep_states: bool):
    grid = time_grid(config.steps)
    x = x_init.copy()
    predictor = None
    if config.variant is Variant.FMPS_GRADIENT:
        predictor = X0Predictor(PredictorVariant.GRADIENT_AWARE, config.schedule)
    elif config.variant is Variant.FMPS_FREE:
        predictor = X0Predictor(PredictorVariant.GRADIENT_FREE, config.schedule, x_init.copy())
    states = [x.copy()] if keep_states else None
    records = []
    for i in range(config.steps):
        t, t_next = float(grid[i]), float(grid[i + 1])
        plain = predictor is None or (config.variant is Variant.FMPS_FREE and i == 0)
        # overflow shows up as a non-finite state, reported just below
        with np.errstate(over="ignore", invalid="ignore"):
            if plain:
                x, rec = _plain_step(x, t, t_next, field, i, config.schedule)
            else:
                x, rec = guided_step(x, t, t_next, field, energy, config, predictor, step=i)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(i)
        records.append(rec)
        if keep_states:
            states.append(x.copy())
    return x, records, states


def _merge_records(parts):
    merged = []
    for recs in zip(*parts):
        first = recs[0]
        cat = lambda name: None if getattr(first, name) is None else np.concatenate([getattr(r, name) for r in recs])
        merged.append(StepRecord(first.step, first.t, first.beta, cat("norm_v"), cat("norm_g"), cat("d_value")))
    return merged


CHAIN_BLOCK = 256


def sample(field, config: SamplerConfig, energy=None, *, threads: int = 1, keep_states: bool = False):
    """Run ``config.chains`` chains from seeded N(0, I) noise; returns (x0, Trajectory).

    Chains are processed in fixed blocks of ``CHAIN_BLOCK`` whatever the thread
    count, so the output bytes do not depend on ``threads``.
    """
    if config.variant is not Variant.UNCONDITIONAL and config.r > 0 and energy is None:
        raise ContractViolation(f"{config.variant.value} with r > 0 needs an energy")
    x_init = initial_noise(config, field.data_shape)
    blocks = [x_init[i : i + CHAIN_BLOCK] for i in range(0, config.chains, CHAIN_BLOCK)]
    def run(block):
        try:
            return _run_chains(field, energy, config, block, keep_states)
        except DivergenceError as exc:
            return exc

    threads = max(1, min(int(threads), len(blocks)))
    if threads == 1:
        results = [run(b) for b in blocks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, blocks))
    failed = [r for r in results if isinstance(r, DivergenceError)]
    if failed:
        raise min(failed, key=lambda e: e.step)
    if len(results) == 1:
        x, records, states = results[0]
    else:
        x = np.concatenate([r[0] for r in results])
        records = _merge_records([r[1] for r in results])
        states = [np.concatenate(s) for s in zip(*(r[2] for r in results))] if keep_states else None
    return Tensor._wrap(x), Trajectory(time_grid(config.steps), records, states)


def _require(config: SamplerConfig, variant: Variant) -> None:
    if config.variant is not variant:
        raise ContractViolation(f"config variant is {config.variant.value}, expected {variant.value}")


def sample_unconditional(field, config: SamplerConfig, **kw):
    _require(config, Variant.UNCONDITIONAL)
    return sample(field, config, None, **kw)


def sample_fmps_gradient(field, energy, config: SamplerConfig, **kw):
    _require(config, Variant.FMPS_GRADIENT)
    return sample(field, config, energy, **kw)


def sample_fmps_free(field, energy, config: SamplerConfig, **kw):
    _require(config, Variant.FMPS_FREE)
    return sample(field, config, energy, **kw)
