"""Tests for the synthetic ground-truth generators."""

import numpy as np
import pytest
from scipy.special import gammainc, ndtr

from smoothflow.dataset import IrregularDataset, RegularGrid, Subject
from smoothflow.errors import ValidationError
from smoothflow.simgen import (
    KlSpec,
    SamplingSpec,
    TruthOracle,
    add_noise,
    fourier_components,
    gamma_median,
    mean_coef_sd,
    mean_design,
    simulate,
    simulate_gamma,
    simulate_gaussian,
)

TARGET_MEAN_SQ = 1.1  # expected squared L2 norm of the random mean


def _bisect_gamma_quantile(p, shape=0.5):
    """Quantile of Gamma(shape, 1) by bisection on the forward CDF."""
    lo, hi = 0.0, 60.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if gammainc(shape, mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_mean_coef_scale_normalizes_expected_norm():
    # E||mu||^2 = coef_sd^2 * trace of the basis Gram; check the trace by
    # dense trapezoid integration of the summed squared basis functions.
    for dim in (5, 6, 9):
        t = np.linspace(0.0, 1.0, 20001)
        design = mean_design(t, dim)
        trace = np.trapezoid(np.sum(design * design, axis=1), t)
        assert mean_coef_sd(dim) ** 2 * trace == pytest.approx(TARGET_MEAN_SQ, rel=1e-6)


def test_mean_coef_scale_matches_monte_carlo_norm():
    rng = np.random.default_rng(3)
    t = np.linspace(0.0, 1.0, 401)
    design = mean_design(t, 6)
    coeffs = rng.standard_normal((4000, 6)) * mean_coef_sd(6)
    sq_norms = np.trapezoid((coeffs @ design.T) ** 2, t, axis=1)
    assert np.mean(sq_norms) == pytest.approx(TARGET_MEAN_SQ, rel=0.05)


def test_mean_design_partition_like_rows():
    # B-spline design rows are nonnegative and sum to one
    design = mean_design(np.linspace(0.0, 1.0, 50), 7)
    assert np.all(design >= 0)
    np.testing.assert_allclose(design.sum(axis=1), 1.0, atol=1e-12)
    with pytest.raises(ValidationError, match="mean basis dim"):
        mean_design([0.5], 4)


def test_fourier_components_orthonormal_and_ordered():
    t = np.linspace(0.0, 1.0, 4001)
    psi = fourier_components(t, 6)
    gram = np.empty((6, 6))
    for i in range(6):
        for j in range(6):
            gram[i, j] = np.trapezoid(psi[:, i] * psi[:, j], t)
    np.testing.assert_allclose(gram, np.eye(6), atol=1e-4)
    # ordering: sin(2 pi t), cos(2 pi t), sin(4 pi t), ...
    tq = np.array([0.125])
    np.testing.assert_allclose(
        fourier_components(tq, 4)[0],
        np.sqrt(2.0) * np.array([
            np.sin(2 * np.pi * 0.125), np.cos(2 * np.pi * 0.125),
            np.sin(4 * np.pi * 0.125), np.cos(4 * np.pi * 0.125)]),
        rtol=1e-12)
    with pytest.raises(ValidationError, match="component count"):
        fourier_components(t, 0)


def test_spec_sigmas_tied_to_mean_norm():
    grid = RegularGrid(0.0, 1.0, 50)
    spec = KlSpec.draw(seed=11, k=4, grid=grid)
    mu = spec.mean(grid.values)
    norm = np.sqrt(np.trapezoid(mu * mu, grid.values))
    expected = norm * np.exp((5.0 - np.arange(1, 5)) / 5.0) / 2.0
    np.testing.assert_allclose(spec.sigmas, expected, rtol=1e-12)
    # consecutive scales decay by exactly exp(-1/5)
    np.testing.assert_allclose(spec.sigmas[1:] / spec.sigmas[:-1],
                               np.exp(-0.2), rtol=1e-12)


def test_latent_sd_matches_component_sum():
    spec = KlSpec.draw(seed=5, k=3)
    t = np.array([0.1, 0.37, 0.9])
    psi = fourier_components(t, 3)
    expected = np.sqrt(psi ** 2 @ spec.sigmas ** 2)
    np.testing.assert_allclose(spec.latent_sd(t), expected, rtol=1e-12)


def test_spec_validation():
    with pytest.raises(ValidationError, match="K must be >= 1"):
        KlSpec(k=0, mean_dim=6, mean_coeffs=np.zeros(6), sigmas=np.array([]))
    with pytest.raises(ValidationError, match="positive component scales"):
        KlSpec(k=2, mean_dim=6, mean_coeffs=np.zeros(6), sigmas=np.array([1.0, 0.0]))
    with pytest.raises(ValidationError, match="mean_coeffs length"):
        KlSpec(k=1, mean_dim=6, mean_coeffs=np.zeros(5), sigmas=np.array([1.0]))


def test_sampling_spec_validation():
    grid = RegularGrid(0.0, 1.0, 10)
    SamplingSpec(n=5, j_range=(2, 10), grid=grid)
    with pytest.raises(ValidationError, match="j_range"):
        SamplingSpec(n=5, j_range=(1, 5), grid=grid)
    with pytest.raises(ValidationError, match="j_range"):
        SamplingSpec(n=5, j_range=(4, 11), grid=grid)
    with pytest.raises(ValidationError, match="at least one subject"):
        SamplingSpec(n=0, j_range=(2, 5), grid=grid)
    with pytest.raises(ValidationError, match="noise_level"):
        SamplingSpec(n=5, j_range=(2, 5), grid=grid, noise_level=-0.1)


def test_gamma_quantiles_against_bisection():
    assert gamma_median() == pytest.approx(_bisect_gamma_quantile(0.5), abs=1e-12)
    assert gamma_median() == pytest.approx(0.22746821155978625, abs=1e-12)


def test_gamma_margins_are_gamma_distributed():
    # push a large latent sample through the truth oracle and compare
    # empirical quantiles at one time point with the bisection oracle
    grid = RegularGrid(0.0, 1.0, 50)
    spec = KlSpec.draw(seed=2, k=4, grid=grid)
    truth = TruthOracle(kind="gamma", grid=grid, mean=spec.mean(grid.values),
                        components=spec.components(grid.values),
                        sigmas=spec.sigmas)
    sample = truth.sample_dense(6000, seed=9)
    assert np.all(sample > 0)
    col = np.sort(sample[:, 17])
    for p in (0.1, 0.3, 0.5, 0.7, 0.9):
        emp = col[int(p * len(col))]
        assert emp == pytest.approx(_bisect_gamma_quantile(p), rel=0.12, abs=0.01)


def test_truth_oracle_curves_and_eigenvalues():
    grid = RegularGrid(0.0, 1.0, 20)
    spec = KlSpec.draw(seed=4, k=3, grid=grid)
    mean = spec.mean(grid.values)
    gauss = TruthOracle(kind="gaussian", grid=grid, mean=mean,
                        components=spec.components(grid.values), sigmas=spec.sigmas)
    np.testing.assert_array_equal(gauss.mean_curve(), mean)
    np.testing.assert_array_equal(gauss.median_curve(), mean)
    np.testing.assert_allclose(gauss.eigenvalues, spec.sigmas ** 2, rtol=1e-15)

    gam = TruthOracle(kind="gamma", grid=grid, mean=mean,
                      components=spec.components(grid.values), sigmas=spec.sigmas)
    np.testing.assert_array_equal(gam.mean_curve(), np.full(20, 0.5))
    np.testing.assert_array_equal(gam.median_curve(), np.full(20, gamma_median()))
    with pytest.raises(ValidationError, match="truth kind"):
        TruthOracle(kind="weird", grid=grid, mean=mean,
                    components=spec.components(grid.values), sigmas=spec.sigmas)


def test_truth_oracle_json_roundtrip(tmp_path):
    grid = RegularGrid(0.0, 1.0, 10)
    spec = KlSpec.draw(seed=8, k=2, grid=grid)
    truth = TruthOracle(kind="gamma", grid=grid, mean=spec.mean(grid.values),
                        components=spec.components(grid.values), sigmas=spec.sigmas)
    path = tmp_path / "truth.json"
    truth.to_json(path)
    back = TruthOracle.from_json(path)
    assert back.kind == truth.kind
    assert back.grid == truth.grid
    np.testing.assert_array_equal(back.mean, truth.mean)
    np.testing.assert_array_equal(back.components, truth.components)
    np.testing.assert_array_equal(back.sigmas, truth.sigmas)
    with pytest.raises(ValidationError, match="format"):
        TruthOracle.from_dict({"format": 99, "kind": "gamma"})


def test_sample_dense_deterministic_and_gaussian_mean():
    grid = RegularGrid(0.0, 1.0, 25)
    spec = KlSpec.draw(seed=6, k=4, grid=grid)
    truth = TruthOracle(kind="gaussian", grid=grid, mean=spec.mean(grid.values),
                        components=spec.components(grid.values), sigmas=spec.sigmas)
    a = truth.sample_dense(50, seed=[1, 2])
    b = truth.sample_dense(50, seed=[1, 2])
    np.testing.assert_array_equal(a, b)
    big = truth.sample_dense(8000, seed=3)
    np.testing.assert_allclose(big.mean(axis=0), truth.mean, atol=0.05)


def test_observation_design_counts_and_uniqueness():
    grid = RegularGrid(0.0, 1.0, 50)
    spec = KlSpec.draw(seed=1, k=4, grid=grid)
    sampling = SamplingSpec(n=300, j_range=(3, 5), grid=grid)
    ds, truth = simulate_gaussian(spec, sampling, seed=12)
    assert ds.n_subjects == 300
    counts = np.array([s.n_points for s in ds.subjects])
    assert counts.min() >= 3 and counts.max() <= 5
    assert set(counts) == {3, 4, 5}
    for s in ds.subjects:
        assert len(np.unique(s.grid_idx)) == s.n_points  # without replacement
    assert truth.kind == "gaussian"


def test_simulate_wrapper_deterministic_and_validated():
    sampling = SamplingSpec(n=20, j_range=(4, 8), grid=RegularGrid(0.0, 1.0, 50))
    ds1, t1 = simulate("gamma", sampling, seed=[0, 7])
    ds2, t2 = simulate("gamma", sampling, seed=[0, 7])
    for a, b in zip(ds1.subjects, ds2.subjects):
        np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_array_equal(a.grid_idx, b.grid_idx)
    np.testing.assert_array_equal(t1.mean, t2.mean)
    assert np.all(np.concatenate([s.values for s in ds1.subjects]) > 0)
    with pytest.raises(ValidationError, match="kind"):
        simulate("poisson", sampling, seed=0)


def test_gamma_simulation_values_positive():
    grid = RegularGrid(0.0, 1.0, 50)
    spec = KlSpec.draw(seed=3, k=4, grid=grid)
    sampling = SamplingSpec(n=100, j_range=(6, 10), grid=grid)
    ds, _ = simulate_gamma(spec, sampling, seed=21)
    for s in ds.subjects:
        assert np.all(s.values > 0)


def test_add_noise_matches_declared_variance():
    # many identical subjects make the per-subject noise SD directly checkable
    grid = RegularGrid(0.0, 1.0, 5)
    values = np.array([3.0, 4.0])  # mean square 12.5
    subjects = [Subject(f"s{i}", grid.values[[0, 4]], values.copy(), [0, 4])
                for i in range(3000)]
    ds = IrregularDataset(subjects, grid)
    noisy = add_noise(ds, 0.04, seed=5)
    resid = np.concatenate([s.values - values for s in noisy.subjects])
    assert resid.std() == pytest.approx(np.sqrt(12.5 * 0.04), rel=0.03)
    assert abs(resid.mean()) < 0.02

    assert add_noise(ds, 0.0) is ds
    with pytest.raises(ValidationError, match="noise_level"):
        add_noise(ds, -1.0)


def test_noise_level_applied_inside_simulation():
    grid = RegularGrid(0.0, 1.0, 50)
    spec = KlSpec.draw(seed=9, k=4, grid=grid)
    clean_s = SamplingSpec(n=50, j_range=(6, 10), grid=grid)
    noisy_s = SamplingSpec(n=50, j_range=(6, 10), grid=grid, noise_level=0.04)
    clean, _ = simulate_gaussian(spec, clean_s, seed=33)
    noisy, _ = simulate_gaussian(spec, noisy_s, seed=33)
    # same design and latent draws, so values differ only by the added noise
    diffs = np.concatenate([a.values - b.values
                            for a, b in zip(clean.subjects, noisy.subjects)])
    assert np.all(np.abs(diffs) > 0)
    assert diffs.std() < 1.0


def test_gamma_transform_pushes_latent_through_exact_margin():
    # for known z the transform must equal the gamma quantile of ndtr(z)
    grid = RegularGrid(0.0, 1.0, 50)
    mean = np.zeros(50)
    comps = fourier_components(grid.values, 2)
    truth = TruthOracle(kind="gamma", grid=grid, mean=mean, components=comps,
                        sigmas=np.array([1.0, 0.5]))
    sample = truth.sample_dense(200, seed=77)
    # reconstruct the latent z from the inverse transform and check margins
    frac_below_median = np.mean(sample < gamma_median())
    assert frac_below_median == pytest.approx(0.5, abs=0.02)
    for p in (0.25, 0.75):
        q = _bisect_gamma_quantile(p)
        assert np.mean(sample < q) == pytest.approx(p, abs=0.02)
    # monotonicity: larger latent always maps to larger observed value
    z = np.linspace(-4, 4, 101)
    from smoothflow.simgen import _gamma_transform
    vals = _gamma_transform(z, np.zeros_like(z), np.ones_like(z))
    assert np.all(np.diff(vals) > 0)
    np.testing.assert_allclose(vals[50], gamma_median(), rtol=1e-12)
    idx = 75  # z = 2
    assert vals[idx] == pytest.approx(_bisect_gamma_quantile(float(ndtr(2.0))), rel=1e-9)
