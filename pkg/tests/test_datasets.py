import numpy as np
import pytest

from fmps.datasets import GMM8_RADIUS, Dataset, DatasetKind, load_dataset
from fmps.errors import ContractViolation
from fmps.imageio import write_idx


@pytest.mark.parametrize("kind", [k.value for k in DatasetKind if k is not DatasetKind.EXTERNAL_IDX])
def test_shapes_and_reproducibility(kind):
    d = Dataset(kind, seed=3)
    a, b = d.sample(50), d.sample(50)
    assert a.shape == (50, *d.data_shape) and np.array_equal(a, b)
    assert np.all(np.isfinite(a))
    assert d.sample(0).shape[0] == 0


def test_gmm8_modes():
    x, labels = Dataset("gauss-mixture-8").sample_labeled(4000, np.random.default_rng(0))
    assert np.allclose(np.linalg.norm(x, axis=1).mean(), GMM8_RADIUS, atol=0.02)
    assert set(np.unique(labels)) == set(range(8))
    ang = labels * np.pi / 4
    assert np.max(np.abs(x - GMM8_RADIUS * np.stack([np.cos(ang), np.sin(ang)], 1))) < 0.6
    assert np.mean(np.sum(x**2, 1)) == pytest.approx(Dataset("gauss-mixture-8").second_moment(), rel=0.02)


def test_checkerboard_cells_alternate():
    x = Dataset("checkerboard").sample(5000)
    assert np.all(np.abs(x) <= 2)
    assert np.all((np.floor(x[:, 0]) + np.floor(x[:, 1])) % 2 == 0)


def test_two_moons_labels_split_the_moons():
    x, y = Dataset("two-moons", noise=0.0).sample_labeled(2000, np.random.default_rng(0))
    centred = x + np.array([0.5, 0.25])
    assert np.allclose(np.linalg.norm(centred[y == 0], axis=1), 1.0)
    assert np.allclose(np.linalg.norm(centred[y == 1] - [1.0, 0.5], axis=1), 1.0)


def test_patterns_in_unit_range_with_visible_strokes():
    x = Dataset("synthetic-patterns-8x8").sample(64)
    assert x.min() >= 0 and x.max() <= 1
    assert np.all(x.reshape(64, -1).max(1) > 0.5)


def test_external_idx(tmp_path):
    imgs = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
    write_idx(tmp_path / "x.idx", imgs)
    write_idx(tmp_path / "y.idx", np.array([4, 7], dtype=np.uint8))
    d = load_dataset("external-idx", idx_path=tmp_path / "x.idx", labels_path=tmp_path / "y.idx")
    assert d.data_shape == (3, 3) and d.is_image
    x, y = d.sample_labeled(10, np.random.default_rng(0))
    for img, lab in zip(x, y):
        k = [4, 7].index(lab)
        assert np.array_equal(img, imgs[k] / 255.0)


def test_errors():
    with pytest.raises(ContractViolation):
        Dataset("external-idx")
    with pytest.raises(ValueError):
        Dataset("spirals")
    with pytest.raises(ContractViolation):
        Dataset("two-moons").sample(-1)
    with pytest.raises(ContractViolation):
        Dataset("two-moons").second_moment()
