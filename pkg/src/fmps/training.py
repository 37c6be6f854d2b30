"""Conditional flow-matching training of MLP velocity fields, plus the guidance classifier."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

from .errors import ContractViolation, DivergenceError, ShapeError
from .tensor import Tensor, Tape, softplus, squared_l2, sub, tensor_mean
from .velocity import Classifier, MLPVelocityField, save_checkpoint

__all__ = [
    "Optimizer",
    "TrainConfig",
    "SGD",
    "Adam",
    "cfm_loss",
    "train",
    "TrainResult",
    "train_classifier",
    "write_loss_csv",
]

log = logging.getLogger(__name__)


class Optimizer(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    steps: int = 5000
    lr: float = 1e-3
    optimizer: Optimizer = Optimizer.ADAM
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))
        if self.batch_size < 1 or self.steps < 0 or self.checkpoint_every < 0:
            raise ContractViolation("batch size must be positive; steps and checkpoint_every non-negative")
        if not 0 < self.lr < 1:
            raise ContractViolation(f"learning rate must lie in (0, 1), got {self.lr}")


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params, grads) -> None:
        for p, g in zip(params, grads):
            p.data = p.data - self.lr * g.data


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            gd = g.data
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * gd
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * gd * gd
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


def _make_optimizer(config: TrainConfig):
    return Adam(config.lr) if config.optimizer is Optimizer.ADAM else SGD(config.lr)


def cfm_loss(field, x0, noise, t) -> Tensor:
    """Batch mean of ||v(x_t, t) - (a_dot x0 + b_dot noise)||^2."""
    x0 = np.asarray(x0.data if isinstance(x0, Tensor) else x0, dtype=np.float64)
    noise = np.asarray(noise.data if isinstance(noise, Tensor) else noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ShapeError("cfm_loss", x0.shape, noise.shape)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x0.shape[0],))
    a, b, a_dot, b_dot = field.schedule.path(t)
    expand = (-1,) + (1,) * (x0.ndim - 1)
    a, b, a_dot, b_dot = (np.reshape(c, expand) for c in (a, b, a_dot, b_dot))
    x_t = a * x0 + b * noise
    target = a_dot * x0 + b_dot * noise
    v = field(Tensor._wrap(x_t), t)
    per_sample = squared_l2(sub(v, target), axis=tuple(range(1, x0.ndim)))
    return tensor_mean(per_sample)


class TrainResult(NamedTuple):
    field: MLPVelocityField
    losses: list


def train(field: MLPVelocityField, dataset, config: TrainConfig, checkpoint_path=None) -> TrainResult:
    """Train a copy of ``field``; the input field is left untouched.

    Every draw (data, noise, times) comes from one generator seeded by
    ``config.seed``, so equal inputs give bit-identical loss curves.
    """
    model = field.copy()
    if tuple(dataset.data_shape) != model.data_shape:
        raise ShapeError("train", dataset.data_shape, model.data_shape)
    rng = np.random.default_rng(config.seed)
    opt = _make_optimizer(config)
    losses: list[float] = []
    for step in range(config.steps):
        x0 = dataset.sample(config.batch_size, rng)
        noise = rng.standard_normal(x0.shape)
        t = rng.uniform(0.0, 1.0, size=config.batch_size)
        with Tape() as tape:
            tape.watch(*model.params)
            loss = cfm_loss(model, x0, noise, t)
        grads = tape.gradient(loss, model.params)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(step, "loss")
        opt.step(model.params, grads)
        losses.append(value)
        if config.checkpoint_every and checkpoint_path and (step + 1) % config.checkpoint_every == 0:
            model.metadata = {"steps": step + 1, "final_loss": value, "seed": config.seed}
            save_checkpoint(model, checkpoint_path)
        if step % 1000 == 0:
            log.debug("step %d loss %.5f", step, value)
    model.metadata = {
        "steps": config.steps,
        "final_loss": losses[-1] if losses else None,
        "seed": config.seed,
    }
    model.reset_counters()
    return TrainResult(model, losses)


def train_classifier(
    classifier: Classifier,
    x: np.ndarray,
    labels: np.ndarray,
    steps: int = 2000,
    lr: float = 1e-2,
    batch_size: int = 256,
    seed: int = 0,
) -> TrainResult:
    """Fit a binary classifier with logistic loss; labels must be 0/1."""
    labels = np.asarray(labels)
    if not np.all((labels == 0) | (labels == 1)):
        raise ContractViolation("classifier labels must be 0 or 1")
    sign = 2.0 * labels - 1.0
    rng = np.random.default_rng(seed)
    opt = Adam(lr)
    losses = []
    for step in range(steps):
        idx = rng.integers(0, len(x), size=batch_size)
        with Tape() as tape:
            tape.watch(*classifier.params)
            z = classifier.logit(Tensor._wrap(x[idx]))
            loss = tensor_mean(softplus(z * (-sign[idx])))
        grads = tape.gradient(loss, classifier.params)
        if not np.isfinite(loss.item()):
            raise DivergenceError(step, "classifier loss")
        opt.step(classifier.params, grads)
        losses.append(loss.item())
    classifier.metadata = {"steps": steps, "final_loss": losses[-1] if losses else None, "seed": seed}
    return TrainResult(classifier, losses)


def write_loss_csv(losses, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])
