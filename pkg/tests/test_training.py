import numpy as np
import pytest

from fmps.datasets import Dataset
from fmps.errors import ContractViolation, DivergenceError
from fmps.imageio import write_idx
from fmps.tensor import Tensor, stack_params
from fmps.training import SGD, Adam, TrainConfig, cfm_loss, train, train_classifier, write_loss_csv
from fmps.velocity import Classifier, MLPVelocityField, VelocityField, load_checkpoint

# frozen from tests/oracles/two_moons_min_loss.py
TWO_MOONS_MIN_LOSS = 1.871


class PlantField(VelocityField):
    """Returns eps - x0 by looking up the planted pair; only valid for one batch."""

    def __init__(self, x0, eps):
        super().__init__((x0.shape[1],))
        self.target = eps - x0
        from fmps.schedule import FlowSchedule

        self.schedule = FlowSchedule()

    def _velocity(self, x, t):
        return Tensor._wrap(self.target)


class ZeroField(VelocityField):
    def __init__(self, dim=1):
        super().__init__((dim,))
        from fmps.schedule import FlowSchedule

        self.schedule = FlowSchedule()

    def _velocity(self, x, t):
        return Tensor._wrap(np.zeros(x.shape))


def test_loss_zero_for_exact_target(rng):
    x0, eps = rng.standard_normal((16, 2)), rng.standard_normal((16, 2))
    assert cfm_loss(PlantField(x0, eps), x0, eps, rng.uniform(size=16)).item() == 0.0


@pytest.mark.parametrize("t", [0.0, 0.3, 1.0])
def test_zero_field_loss_is_one(t):
    assert cfm_loss(ZeroField(), np.array([[1.0]]), np.array([[0.0]]), t).item() == 1.0


def test_loss_shape_mismatch():
    with pytest.raises(ContractViolation):
        cfm_loss(ZeroField(2), np.zeros((3, 2)), np.zeros((3, 1)), 0.5)


def test_initial_loss_matches_second_moment():
    data = Dataset("gauss-mixture-8")
    rng = np.random.default_rng(0)
    x0 = data.sample(100_000, rng)
    eps = rng.standard_normal(x0.shape)
    loss = cfm_loss(MLPVelocityField(seed=0), x0, eps, rng.uniform(size=len(x0))).item()
    # zero-initialized output layer: loss is E||eps - x0||^2 = 2 + E||x0||^2
    assert loss == pytest.approx(2 + data.second_moment(), rel=0.01)
    assert loss == pytest.approx(np.mean(np.sum((eps - x0) ** 2, axis=1)), rel=1e-12)


def test_zero_steps_returns_unchanged_field():
    f = MLPVelocityField(hidden=(8,), time_embed=4, seed=1)
    res = train(f, Dataset("two-moons"), TrainConfig(steps=0))
    assert res.losses == []
    assert np.array_equal(stack_params(res.field.params), stack_params(f.params))


def test_train_leaves_input_untouched_and_is_deterministic():
    f = MLPVelocityField(hidden=(16,), time_embed=4, seed=1)
    before = stack_params(f.params).copy()
    cfg = TrainConfig(steps=40, batch_size=32, seed=9)
    a = train(f, Dataset("checkerboard"), cfg)
    b = train(f, Dataset("checkerboard"), cfg)
    assert np.array_equal(stack_params(f.params), before)
    assert a.losses == b.losses
    assert stack_params(a.field.params).tobytes() == stack_params(b.field.params).tobytes()
    c = train(f, Dataset("checkerboard"), TrainConfig(steps=40, batch_size=32, seed=10))
    assert c.losses != a.losses


def test_losses_non_negative():
    res = train(MLPVelocityField(hidden=(16,), time_embed=4), Dataset("gauss-mixture-8"),
                TrainConfig(steps=30, batch_size=16, optimizer="sgd", lr=0.01))
    assert min(res.losses) >= 0


@pytest.mark.parametrize("opt", [SGD(0.0), Adam(0.0)])
def test_zero_learning_rate_step_is_identity(opt, rng):
    params = [Tensor(rng.standard_normal((3, 2))), Tensor(rng.standard_normal(2))]
    before = [p.data.copy() for p in params]
    grads = [Tensor(rng.standard_normal(p.shape)) for p in params]
    opt.step(params, grads)
    assert all(np.array_equal(p.data, b) for p, b in zip(params, before))


def test_adam_first_step_moves_by_lr():
    p = [Tensor(np.array([1.0, -1.0]))]
    Adam(0.1).step(p, [Tensor(np.array([5.0, -0.2]))])
    assert np.allclose(p[0].data, [0.9, -0.9], atol=1e-6)


@pytest.mark.parametrize("bad", [dict(lr=0.0), dict(lr=1.0), dict(batch_size=0), dict(steps=-1)])
def test_config_validation(bad):
    with pytest.raises(ContractViolation):
        TrainConfig(**bad)


class NaNData:
    data_shape = (2,)

    def sample(self, n, rng):
        return np.full((n, 2), np.nan)


def test_nan_loss_aborts_with_step():
    with pytest.raises(DivergenceError) as exc:
        train(MLPVelocityField(hidden=(4,), time_embed=2), NaNData(), TrainConfig(steps=5, batch_size=4))
    assert exc.value.step == 0 and "step 0" in str(exc.value)


def test_checkpoint_every(tmp_path):
    path = tmp_path / "m.ckpt"
    train(MLPVelocityField(hidden=(4,), time_embed=2), Dataset("two-moons"),
          TrainConfig(steps=6, batch_size=8, checkpoint_every=4), checkpoint_path=path)
    assert load_checkpoint(path).metadata["steps"] == 4


def test_loss_csv(tmp_path):
    write_loss_csv([1.5, 0.25], tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text() == "step,loss\n0,1.5\n1,0.25\n"


def test_idx_dataset_training(tmp_path):
    rng = np.random.default_rng(0)
    imgs = (rng.uniform(size=(20, 4, 4)) * 255).astype(np.uint8)
    write_idx(tmp_path / "x.idx", imgs)
    data = Dataset("external-idx", idx_path=str(tmp_path / "x.idx"))
    assert data.data_shape == (4, 4)
    batch = data.sample(5, rng)
    assert batch.min() >= 0 and batch.max() <= 1
    res = train(MLPVelocityField((4, 4), hidden=(8,), time_embed=4), data, TrainConfig(steps=3, batch_size=4))
    assert len(res.losses) == 3


def test_classifier_separates_moons():
    x, y = Dataset("two-moons").sample_labeled(4000, np.random.default_rng(0))
    clf, losses = train_classifier(Classifier((2,), (32, 32), seed=0), x, y, steps=600, lr=1e-2)
    xt, yt = Dataset("two-moons").sample_labeled(2000, np.random.default_rng(1))
    assert np.mean(clf.predict(xt) == yt) > 0.97
    with pytest.raises(ContractViolation):
        train_classifier(clf, x, y + 1, steps=1)


@pytest.fixture(scope="module")
def moons_run():
    return train(MLPVelocityField(seed=0), Dataset("two-moons"), TrainConfig(steps=5000, seed=0))


def test_two_moons_reaches_loss_floor(moons_run):
    final = float(np.mean(moons_run.losses[-200:]))
    assert final < 1.05 * TWO_MOONS_MIN_LOSS
    assert final < 0.7 * float(np.mean(moons_run.losses[:20]))


@pytest.mark.xfail(strict=True, reason="best achievable loss is 0.62x the initial loss on two-moons")
def test_two_moons_final_below_half_initial(moons_run):
    assert np.mean(moons_run.losses[-200:]) < 0.5 * moons_run.losses[0]
