import math

import numpy as np
import pytest
from scipy import stats

from services.errors import DataError, ParameterError
from services.operators import StableDiffusionSpec
from services.stable import (
    StableParams,
    default_range,
    empirical_density,
    increments,
    rescale_series,
    sample_stable,
    sample_stable_path,
    sample_truncated_stable,
    spawn_seeds,
    stable_cdf,
    stable_pdf,
    truncated_paths,
)

GAUSSIAN = StableParams(alpha=2.0, beta=0.0, gamma=1.0)
CAUCHY = StableParams(alpha=1.0, beta=0.0, gamma=0.5)

# ---------- StableParams ----------

@pytest.mark.parametrize("kwargs", [
    {"alpha": 0.0, "beta": 0.0, "gamma": 1.0},
    {"alpha": 2.1, "beta": 0.0, "gamma": 1.0},
    {"alpha": 1.5, "beta": 1.2, "gamma": 1.0},
    {"alpha": 1.5, "beta": 0.0, "gamma": 0.0},
    {"alpha": 1.5, "beta": 0.0, "gamma": 1.0, "delta": math.nan},
])
def test_invalid_stable_parameters(kwargs):
    with pytest.raises(ParameterError):
        StableParams(**kwargs)

def test_transition_law_of_diffusion():
    params = StableParams.from_diffusion(StableDiffusionSpec(alpha=1.5, p=0.8, gamma=1.0), t=4.0)
    assert params.beta == pytest.approx(0.6)
    assert params.gamma == pytest.approx(4.0 ** (1 / 1.5))

def test_increment_law_scaling():
    scaled = StableParams(1.5, 0.2, 2.0, 1.0).scaled(0.25)
    assert scaled.gamma == pytest.approx(2.0 * 0.25 ** (1 / 1.5))
    assert scaled.delta == pytest.approx(0.25)
    assert scaled.beta == 0.2

# ---------- stable_pdf / stable_cdf ----------

def test_gaussian_case_density():
    x = np.array([0.0, 0.5, 1.5, -2.0])
    assert stable_pdf(GAUSSIAN, x) == pytest.approx(stats.norm.pdf(x, scale=math.sqrt(2.0)), rel=1e-6)

def test_cauchy_case_density():
    x = np.array([0.0, 0.3, -1.0, 4.0])
    assert stable_pdf(CAUCHY, x) == pytest.approx(stats.cauchy.pdf(x, scale=0.5), rel=1e-6)

def test_scalar_density_returns_float():
    assert isinstance(stable_pdf(GAUSSIAN, 0.0), float)

def test_gaussian_case_distribution_function():
    x = np.array([-1.0, 0.0, 0.7])
    assert stable_cdf(GAUSSIAN, x) == pytest.approx(stats.norm.cdf(x, scale=math.sqrt(2.0)), abs=1e-7)

def test_distribution_function_limits():
    params = StableParams(alpha=1.5, beta=0.4, gamma=1.0)
    assert stable_cdf(params, [-np.inf, np.inf]) == pytest.approx([0.0, 1.0])
    values = stable_cdf(params, [-3.0, -1.0, 0.0, 1.0, 3.0])
    assert np.all(np.diff(values) > 0)

def test_symmetric_law_has_median_zero():
    assert stable_cdf(StableParams(alpha=1.3, beta=0.0, gamma=2.0), 0.0) == pytest.approx(0.5, abs=1e-9)

def test_skewed_density_integrates_to_one():
    params = StableParams(alpha=1.6, beta=0.5, gamma=1.0)
    grid = np.linspace(-6.0, 6.0, 241)
    mass = np.trapz(stable_pdf(params, grid), grid)
    tails = stable_cdf(params, -6.0) + 1.0 - stable_cdf(params, 6.0)
    assert mass + tails == pytest.approx(1.0, abs=2e-3)

# ---------- sampling ----------

def test_gaussian_draws_pass_ks_test():
    draws = sample_stable(GAUSSIAN, 4000, seed=2)
    assert stats.kstest(draws, stats.norm(scale=math.sqrt(2.0)).cdf).pvalue > 0.01

def test_cauchy_draws_pass_ks_test():
    draws = sample_stable(CAUCHY, 4000, seed=3)
    assert stats.kstest(draws, stats.cauchy(scale=0.5).cdf).pvalue > 0.01

@pytest.mark.slow
def test_skewed_draws_match_distribution_function():
    params = StableParams(alpha=1.5, beta=0.6, gamma=1.0)
    draws = sample_stable(params, 1500, seed=4)
    assert stats.kstest(draws, lambda x: stable_cdf(params, x)).pvalue > 0.01

def test_sampling_is_deterministic_for_a_seed():
    params = StableParams(alpha=1.4, beta=0.3, gamma=1.0)
    assert np.array_equal(sample_stable(params, 50, seed=9), sample_stable(params, 50, seed=9))
    assert not np.array_equal(sample_stable(params, 50, seed=9), sample_stable(params, 50, seed=10))

def test_path_is_cumulative_sum_of_scaled_increments():
    params = StableParams(alpha=1.4, beta=0.6, gamma=1.0)
    path = sample_stable_path(params, 200, 0.01, seed=5)
    steps = sample_stable(params.scaled(0.01), 200, seed=5)
    assert path.shape == (200,)
    assert path == pytest.approx(np.cumsum(steps))

def test_path_rejects_bad_arguments():
    with pytest.raises(ParameterError):
        sample_stable_path(GAUSSIAN, 0, 0.1)
    with pytest.raises(ParameterError):
        sample_stable_path(GAUSSIAN, 10, 0.0)

def test_spawned_seeds_are_independent():
    children = spawn_seeds(42, 3)
    streams = [np.random.default_rng(child).random(4) for child in children]
    assert len(children) == 3
    assert not np.array_equal(streams[0], streams[1])

# ---------- empirical_density ----------

def test_increments_of_series():
    assert increments([0.0, 1.0, 3.0, 6.0], 2) == pytest.approx([3.0, 5.0])
    with pytest.raises(DataError):
        increments([0.0, 1.0], 2)

def test_default_range_is_symmetric():
    values = np.linspace(-1.0, 3.0, 1000)
    lo, hi = default_range(values)
    assert lo == -hi
    assert hi == pytest.approx(np.quantile(values, 0.995))
    assert default_range(np.zeros(10)) == (-1.0, 1.0)

def test_histogram_of_gaussian_walk():
    rng = np.random.default_rng(0)
    series = np.cumsum(rng.standard_normal(200_000))
    density = empirical_density(series, 1, bins=40, value_range=(-4.0, 4.0), dt=0.5)
    assert density.t == 0.5
    assert np.sum(density.density) * density.bin_width == pytest.approx(1.0)
    assert density.density == pytest.approx(stats.norm.pdf(density.centers), abs=0.01)
    assert not density.sparse

def test_histogram_counts_dropped_increments():
    series = np.array([0.0, 1.0, 0.0, 5.0, 5.5])
    density = empirical_density(series, 1, bins=5, value_range=(-2.0, 2.0))
    assert density.dropped == 1
    assert density.sample_count == 3
    assert density.sparse
    assert density.range == (-2.0, 2.0)

def test_histogram_rejects_bad_settings():
    series = np.arange(50.0)
    with pytest.raises(ParameterError):
        empirical_density(series, 1, bins=4)
    with pytest.raises(ParameterError):
        empirical_density(series, 1, value_range=(1.0, 1.0))
    with pytest.raises(DataError):
        empirical_density(series, 1, value_range=(5.0, 6.0))

# ---------- truncated sampling ----------

def test_truncated_draws_stay_inside_bound():
    draws = sample_truncated_stable(CAUCHY, 2.0, 500, seed=1)
    assert draws.shape == (500,)
    assert np.all(np.abs(draws) <= 2.0)

def test_truncation_with_tiny_acceptance_is_rejected():
    with pytest.raises(ParameterError):
        sample_truncated_stable(CAUCHY, 1e-4, 10, seed=1)

def test_truncated_paths_start_at_given_value():
    paths = truncated_paths(CAUCHY, 1.0, paths=4, steps=25, start=3.0, seed=7)
    assert paths.shape == (4, 26)
    assert np.all(paths[:, 0] == 3.0)
    assert np.all(np.abs(np.diff(paths, axis=1)) <= 1.0 + 1e-12)

def test_truncated_paths_are_reproducible():
    first = truncated_paths(CAUCHY, 1.0, paths=2, steps=10, seed=7)
    second = truncated_paths(CAUCHY, 1.0, paths=2, steps=10, seed=7)
    assert np.array_equal(first, second)

# ---------- rescale_series ----------

def test_rescale_series_round_trip():
    series = np.array([1.0, 2.0, 4.0])
    scaled, scaling = rescale_series(series, 8.0)
    assert scaled == pytest.approx([8.0, 16.0, 32.0])
    assert scaling.unscale_series(scaled) == pytest.approx(series)
    assert scaling.unscale_gamma(4.0) == 0.5
    with pytest.raises(ParameterError):
        rescale_series(series, 0.0)
