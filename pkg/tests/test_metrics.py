import numpy as np
import pytest
from hypothesis import given, strategies as st

from fmps.errors import ContractViolation, ShapeError
from fmps.guidance import Identity, InpaintMask
from fmps.metrics import (
    PSNR_CAP_DB,
    MetricRow,
    SampleSet,
    mmd_rbf,
    psnr,
    residual_norm,
    sliced_wasserstein,
    write_metric_csv,
)


def mmd_loops(x, y, bw, biased):
    """Double-loop reference, written without any vectorization."""
    k = lambda a, b: np.exp(-np.sum((a - b) ** 2) / (2 * bw * bw))
    n, m = len(x), len(y)
    sxx = sum(k(x[i], x[j]) for i in range(n) for j in range(n) if biased or i != j)
    syy = sum(k(y[i], y[j]) for i in range(m) for j in range(m) if biased or i != j)
    sxy = sum(k(x[i], y[j]) for i in range(n) for j in range(m))
    dx = n * n if biased else n * (n - 1)
    dy = m * m if biased else m * (m - 1)
    return sxx / dx + syy / dy - 2 * sxy / (n * m)


@pytest.mark.parametrize("biased", [True, False])
def test_mmd_matches_loop_oracle(biased):
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((60, 2)), 1 + rng.standard_normal((45, 2))
    assert mmd_rbf(x, y, 0.7, biased=biased) == pytest.approx(mmd_loops(x, y, 0.7, biased), abs=1e-12)


def test_mmd_closed_form_for_shifted_gaussians():
    # For N(0,1) vs N(1,1) in 1-D with unit bandwidth:
    # E k(x, x') = 1/sqrt(3) for both sets, E k(x, y) = exp(-1/6)/sqrt(3).
    exact = 2 / np.sqrt(3) * (1 - np.exp(-1 / 6))
    rng = np.random.default_rng(1)
    est = mmd_rbf(rng.standard_normal((2048, 1)), 1 + rng.standard_normal((2048, 1)))
    assert est == pytest.approx(exact, abs=0.01)


def test_mmd_identical_sets():
    x = np.random.default_rng(2).standard_normal((300, 3))
    assert mmd_rbf(x, x, biased=True) == pytest.approx(0.0, abs=1e-12)
    assert abs(mmd_rbf(x, x)) < 1e-2


def test_mmd_grows_with_separation():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((400, 2))
    vals = [mmd_rbf(x, rng.standard_normal((400, 2)) + [s, 0]) for s in (0.5, 1.0, 2.0, 4.0)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


@given(st.integers(0, 2**31 - 1), st.floats(0.2, 3.0))
def test_mmd_symmetric(seed, bw):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((20, 2)), rng.standard_normal((30, 2))
    assert mmd_rbf(x, y, bw) == pytest.approx(mmd_rbf(y, x, bw), abs=1e-12)
    assert mmd_rbf(x, y, bw, biased=True) >= -1e-12


def test_mmd_errors():
    with pytest.raises(ShapeError):
        mmd_rbf(np.zeros((4, 2)), np.zeros((4, 3)))
    with pytest.raises(ContractViolation):
        mmd_rbf(np.zeros((1, 2)), np.zeros((4, 2)))
    with pytest.raises(ContractViolation):
        mmd_rbf(np.zeros((4, 2)), np.zeros((4, 2)), bandwidth=0.0)


def test_sliced_wasserstein_one_dimensional_shift():
    rng = np.random.default_rng(4)
    x, y = rng.standard_normal((4096, 1)), 2 + rng.standard_normal((4096, 1))
    sw = sliced_wasserstein(x, y, projections=8)
    # in 1-D every unit direction is +-1, so SW is the sorted-sample W1
    oracle = np.mean(np.abs(np.sort(x[:, 0]) - np.sort(y[:, 0])))
    assert sw == pytest.approx(oracle, rel=1e-12)
    assert abs(sw - 2.0) < 0.05


def test_sliced_wasserstein_properties():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((500, 2))
    assert sliced_wasserstein(x, x) == 0.0
    y = rng.standard_normal((500, 2)) + 1
    assert sliced_wasserstein(x, y, seed=3) == sliced_wasserstein(x, y, seed=3)
    assert sliced_wasserstein(x, y) == pytest.approx(sliced_wasserstein(y, x), rel=1e-12)
    with pytest.raises(ShapeError):
        sliced_wasserstein(x, np.zeros((3, 3)))


def test_psnr():
    a = np.full((4, 4), 0.5)
    assert psnr(a, a) == PSNR_CAP_DB
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    assert psnr(np.zeros(3), np.full(3, 1e-60)) == PSNR_CAP_DB
    with pytest.raises(ShapeError):
        psnr(a, a[:2])


def test_residual_norm():
    x = np.array([[3.0, 4.0]])
    assert residual_norm(Identity(), x, x) == 0.0
    assert residual_norm(Identity(), x, np.zeros((1, 2))) == 5.0
    assert residual_norm(InpaintMask([1.0, 0.0]), x, np.zeros((1, 2))) == 3.0
    assert residual_norm(lambda a: 2 * a, x, 2 * x) == 0.0


def test_sample_set_accepts_images():
    s = SampleSet(np.zeros((5, 4, 4)), "imgs")
    assert s.flat().shape == (5, 16)
    assert mmd_rbf(s, SampleSet(np.ones((5, 4, 4)))) > 0
    with pytest.raises(ContractViolation):
        SampleSet(np.zeros((0, 2)))


def test_metric_csv(tmp_path):
    write_metric_csv([MetricRow("inpaint-mask", "fmps-free", 1.0, 100, "psnr_mean", 21.5)], tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text() == "task,variant,r,T,metric,value\ninpaint-mask,fmps-free,1.0,100,psnr_mean,21.5\n"
