import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stimpute.errors import ConfigError, ShapeError
from stimpute.sampling import make_mask, make_triple, scatter, downsample, upsample
from stimpute.st_data import GeneGrid
from stimpute.synth import (SynthSpec, baseline_interpolate, gen_field, make_dataset,
                            simulate_sparse)


def test_empty_spec_gives_zero_field():
    g = gen_field(SynthSpec(height=32, width=32, num_blobs=0, noise_sigma=0.0, tissue="full"))
    assert not g.values.any()


def test_same_seed_same_field():
    spec = SynthSpec(height=32, width=48, seed=3)
    a, b = gen_field(spec), gen_field(spec)
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(a.tissue, b.tissue)
    assert not np.array_equal(a.values, gen_field(SynthSpec(height=32, width=48, seed=4)).values)


@pytest.mark.parametrize("seed", range(5))
def test_single_blob_peaks_at_its_center(seed):
    spec = SynthSpec(height=40, width=40, num_blobs=1, noise_sigma=0.0, tissue="full", seed=seed)
    g = gen_field(spec)
    rng = np.random.default_rng(seed)
    center = (int(rng.integers(0, 40)), int(rng.integers(0, 40)))
    best = max(((r, c) for r in range(40) for c in range(40)), key=lambda rc: g.values[rc])
    assert best == center


def test_tissue_shapes_and_clipping():
    for shape in ("full", "disk", "blob-union"):
        g = gen_field(SynthSpec(height=64, width=64, tissue=shape, noise_sigma=0.5))
        assert g.values.min() >= 0
        assert g.tissue.any()
    disk = gen_field(SynthSpec(height=64, width=64, tissue="disk")).tissue
    assert disk[32, 32] and not disk[0, 0]


def test_spec_validation():
    for bad in (dict(num_blobs=-1), dict(sigma_range=(0, 1)), dict(noise_sigma=-1),
                dict(tissue="square"), dict(height=0)):
        with pytest.raises(ConfigError):
            SynthSpec(**bad)
    spec = SynthSpec(seed=11)
    assert SynthSpec.from_dict(spec.to_dict()) == spec


def test_simulate_sparse_examples():
    truth = GeneGrid(np.full((8, 8), 2.0), np.ones((8, 8)))
    sparse, mask = simulate_sparse(truth, 2)
    assert np.all(sparse.values == 2.0) and sparse.shape == (4, 4)
    np.testing.assert_array_equal(downsample(scatter(sparse.values, mask), mask), sparse.values)
    with pytest.raises(ShapeError):
        simulate_sparse(GeneGrid(np.zeros((5, 5)), np.ones((5, 5))), 2)


def test_simulate_sparse_matches_gather():
    truth = gen_field(SynthSpec(height=16, width=16, tissue="disk"))
    sparse, mask = simulate_sparse(truth, 2, (1, 0))
    gathered = np.array([[truth.values[r, c] for c in range(0, 16, 2)] for r in range(1, 16, 2)])
    np.testing.assert_array_equal(sparse.values, gathered)
    np.testing.assert_array_equal(
        sparse.tissue, [[truth.tissue[r, c] for c in range(0, 16, 2)] for r in range(1, 16, 2)])


@pytest.mark.parametrize("method", ["nearest", "bilinear", "bicubic"])
def test_baselines_preserve_constants(method):
    sparse = GeneGrid(np.full((4, 4), 1.25), np.ones((4, 4)))
    out = baseline_interpolate(sparse, 2, method)
    np.testing.assert_allclose(out.values, 1.25, atol=1e-6)


def test_nearest_replicates_blocks():
    sparse = GeneGrid(np.array([[0.0, 2.0], [8.0, 10.0]]), np.ones((2, 2)))
    out = baseline_interpolate(sparse, 2, "nearest")
    np.testing.assert_array_equal(out.values, [[0, 0, 2, 2], [0, 0, 2, 2],
                                               [8, 8, 10, 10], [8, 8, 10, 10]])


def test_bilinear_matches_sampling_upsample():
    v = np.random.default_rng(0).random((6, 6))
    out = baseline_interpolate(GeneGrid(v, np.ones((6, 6))), 2, "bilinear")
    np.testing.assert_allclose(out.values, upsample(v, 2), atol=1e-6)
    with pytest.raises(ConfigError):
        baseline_interpolate(GeneGrid(v, np.ones((6, 6))), 2, "lanczos")


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 6), st.integers(0, 10 ** 6),
       st.sampled_from(["full", "disk", "blob-union"]))
def test_synthetic_data_feeds_pipeline(hm, wm, blobs, seed, tissue):
    spec = SynthSpec(height=16 * hm, width=16 * wm, num_blobs=blobs, seed=seed, tissue=tissue)
    data = make_dataset(spec, 2)
    assert data.sparse.shape == (8 * hm, 8 * wm)
    assert data.mask.shape == data.truth.shape
    t = make_triple(data.sparse.values[:8, :8], 2, "st", tissue=data.sparse.tissue[:8, :8],
                    dense=False)
    assert t.x_l.shape == (4, 4) and t.m_h.shape == (16, 16)
    np.testing.assert_array_equal(downsample(data.truth.values, make_mask(*spec_shape(spec), 2)),
                                  data.sparse.values)


def spec_shape(spec):
    return spec.height, spec.width
