import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from skimage.metrics import structural_similarity

from stimpute.errors import DegenerateInput, EmptyRegion, ShapeError
from stimpute.metrics import EvalReport, evaluate, mae, pcc, ssim
from stimpute.sampling import make_mask
from stimpute.st_data import GeneGrid


def fixture_pair():
    r, c = np.mgrid[0:16, 0:16].astype(float)
    a = np.sin(r / 3.0) + 0.5 * np.cos(c / 2.0) + 0.05 * ((r * 7 + c * 3) % 5)
    b = 0.8 * a + 0.3 * np.sin((r + c) / 4.0) + 0.1
    return a, b


def loop_ssim(a, b, L, size=11, sigma=1.5):
    """Per-center weighted statistics with an explicit 11x11 Gaussian window."""
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    vals = []
    for i in range(a.shape[0] - size + 1):
        for j in range(a.shape[1] - size + 1):
            wa, wb = a[i:i + size, j:j + size], b[i:i + size, j:j + size]
            ma, mb = (g * wa).sum(), (g * wb).sum()
            va, vb = (g * (wa - ma) ** 2).sum(), (g * (wb - mb) ** 2).sum()
            cov = (g * (wa - ma) * (wb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_mae_examples():
    a = np.array([[0, 1], [2, 3]])
    b = np.array([[1, 1], [2, 5]])
    assert mae(a, b) == 0.75
    assert mae(a, a) == 0
    region = np.zeros((2, 2))
    region[1, 1] = 1
    assert mae(a, b, region) == 2
    with pytest.raises(EmptyRegion):
        mae(a, b, np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        mae(a, b[:1])


def test_pcc_examples():
    a = np.random.default_rng(0).normal(size=(5, 5))
    assert pcc(a, 2 * a + 3) == pytest.approx(1.0, abs=1e-12)
    assert pcc(a, -a) == pytest.approx(-1.0, abs=1e-12)
    assert pcc(a, a) == 1.0
    with pytest.raises(DegenerateInput):
        pcc(a, np.ones((5, 5)))


def test_pcc_matches_two_pass_oracle():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=200), rng.normal(size=200)
    y = y + 0.5 * x
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    cov = sum((xi - mx) * (yi - my) for xi, yi in zip(x, y)) / (n - 1)
    sx = math.sqrt(sum((xi - mx) ** 2 for xi in x) / (n - 1))
    sy = math.sqrt(sum((yi - my) ** 2 for yi in y) / (n - 1))
    assert pcc(x.reshape(10, 20), y.reshape(10, 20)) == pytest.approx(cov / (sx * sy), abs=1e-10)


@settings(max_examples=30)
@given(arrays(np.float64, (4, 4), elements=st.floats(-100, 100)),
       st.floats(0.1, 10), st.floats(-10, 10))
def test_pcc_affine_invariance(a, s, t):
    b = np.arange(16.0).reshape(4, 4)
    if np.ptp(a) < 1e-3:
        return
    assert pcc(s * a + t, b) == pytest.approx(pcc(a, b), abs=1e-9)


@settings(max_examples=30)
@given(*[arrays(np.float64, (3, 3), elements=st.floats(-100, 100))] * 3)
def test_mae_triangle_bound(a, b, c):
    assert mae(a, c) <= mae(a, b) + mae(b, c) + 1e-9


def test_ssim_matches_loop_reference_and_skimage():
    a, b = fixture_pair()
    L = float(a.max() - a.min())
    got = ssim(a, b)
    assert got == pytest.approx(loop_ssim(a, b, L), abs=1e-6)
    sk = structural_similarity(a, b, gaussian_weights=True, sigma=1.5,
                               use_sample_covariance=False, data_range=L)
    assert got == pytest.approx(sk, abs=1e-6)


def test_ssim_identity_symmetry_and_errors():
    a, b = fixture_pair()
    assert ssim(a, a) == 1.0
    assert ssim(a, b, data_range=2.0) == pytest.approx(ssim(b, a, data_range=2.0), abs=1e-12)
    with pytest.raises(DegenerateInput):
        ssim(np.ones((16, 16)), a)
    with pytest.raises(ShapeError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_ssim_region_averages_valid_centers():
    a, b = fixture_pair()
    region = np.zeros((16, 16), bool)
    region[5:11, 6:12] = True
    L = float(a[region].max() - a[region].min())
    sk_map = structural_similarity(a, b, gaussian_weights=True, sigma=1.5,
                                   use_sample_covariance=False, data_range=L, full=True)[1]
    centers = region.copy()
    centers[:5, :] = centers[11:, :] = False
    centers[:, :5] = centers[:, 11:] = False
    assert ssim(a, b, region) == pytest.approx(sk_map[centers].mean(), abs=1e-6)


def test_evaluate_identity_and_round_trip():
    a, _ = fixture_pair()
    g = GeneGrid(a, np.ones_like(a), "G")
    rep = evaluate(g, g, dataset="d", variant="v")
    assert (rep.mae, rep.pcc, rep.ssim) == (0.0, 1.0, 1.0)
    assert EvalReport.from_json(rep.to_json()) == rep
    assert rep.csv_row(header=True).splitlines()[0] == "dataset,gene,variant,mae,pcc,ssim,region_size"


def test_evaluate_recomposes_standalone_ops():
    a, b = fixture_pair()
    tissue = np.zeros((16, 16), bool)
    tissue[2:14, 1:15] = True
    truth = GeneGrid.masked(a - a.min(), tissue)
    pred = GeneGrid.masked(b - b.min(), tissue)
    rep = evaluate(pred, truth)
    t, p = truth.values.astype(np.float64), pred.values.astype(np.float64)
    assert rep.mae == mae(p, t, tissue)
    assert rep.pcc == pcc(p, t, tissue)
    assert rep.ssim == ssim(t, p, tissue)
    assert rep.region_size == tissue.sum()

    m = make_mask(16, 16, 2)
    ex = evaluate(pred, truth, exclude_sampled=m)
    assert ex.region_size == (tissue & (m.bits == 0)).sum()
