import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.integrate import quad

from errors import ConfigurationError, NumericalError, ParameterDomainError
from hazard import (
    AssetSite,
    DiscoveryProcess,
    FloodFieldParams,
    FragilityCurve,
    HurricaneParams,
    RepairPrior,
    ScenarioConfig,
    _cholesky_with_jitter,
    combine_hazards,
    draw_failure_matrix,
    fragility_exceedance,
    generate_scenario,
    holland_b_estimate,
    load_scenario,
    sample_arrival_counts,
    sample_arrival_times,
    sample_correlated_failures,
    sample_flood_depths,
    sample_repair_time,
    save_scenario,
    wind_speed_at,
)


def _standard_normal_cdf(x: float) -> float:
    """Numerical-integration oracle for the normal CDF"""
    value, _ = quad(lambda t: math.exp(-t * t / 2.0) / math.sqrt(2.0 * math.pi), -np.inf, x)
    return value


# -- wind -----------------------------------------------------------------------

def test_wind_speed_at_radius_of_maximum_winds():
    params = HurricaneParams(delta_p=50, r_m=40, b_shape=1.5, rho_air=1.15, v_bg=5)
    assert wind_speed_at(params, 40.0) == pytest.approx(53.98, abs=0.01)


def test_wind_speed_far_field_is_background():
    params = HurricaneParams(delta_p=50, r_m=40, b_shape=1.5, rho_air=1.15, v_bg=5)
    assert wind_speed_at(params, 1e9) == pytest.approx(5.0, abs=1e-3)


@pytest.mark.parametrize("r", [0.0, -3.0, float('nan')])
def test_wind_speed_rejects_non_positive_range(r):
    with pytest.raises(ParameterDomainError):
        wind_speed_at(HurricaneParams(), r)


def test_wind_speed_rejects_invalid_params():
    with pytest.raises(ParameterDomainError):
        wind_speed_at(HurricaneParams(b_shape=3.5), 10.0)


def test_holland_b_estimate_and_clamp():
    assert holland_b_estimate(1010, 962) == pytest.approx(1.7)
    assert holland_b_estimate(1010, 850) == pytest.approx(1.0)
    assert holland_b_estimate(1010, 770) == pytest.approx(1.0)
    with pytest.raises(ParameterDomainError):
        holland_b_estimate(960, 960)


def test_hurricane_from_dict_estimates_shape_from_pressures():
    params = HurricaneParams.from_dict({'delta_p': 48, 'p_env': 1010, 'p_c': 962})
    assert params.b_shape == pytest.approx(1.7)


# -- fragility and combination ------------------------------------------------------

def test_fragility_at_median_is_one_half():
    curve = FragilityCurve("pole", median=60.0, dispersion=0.2)
    assert abs(fragility_exceedance(60.0, curve) - 0.5) <= 1e-12


def test_fragility_one_dispersion_above_median_matches_quadrature():
    curve = FragilityCurve("pole", median=60.0, dispersion=0.2)
    p = fragility_exceedance(60.0 * math.exp(0.2), curve)
    assert p == pytest.approx(0.8413, abs=1e-4)
    assert p == pytest.approx(_standard_normal_cdf(1.0), abs=1e-9)


def test_fragility_zero_intensity():
    assert fragility_exceedance(0.0, FragilityCurve("riser", 0.9, 0.4)) == 0.0
    with pytest.raises(ParameterDomainError):
        fragility_exceedance(-1.0, FragilityCurve("riser", 0.9, 0.4))


def test_fragility_curve_needs_positive_parameters():
    with pytest.raises(ParameterDomainError):
        FragilityCurve("pole", median=0.0, dispersion=0.2)


def test_combine_hazards():
    assert combine_hazards(0.3, 0.2) == pytest.approx(0.44)
    assert combine_hazards(0.37, 0.0) == pytest.approx(0.37)
    assert combine_hazards(1.0, 0.6) == 1.0
    with pytest.raises(ParameterDomainError):
        combine_hazards(1.2, 0.0)


# -- flood field -------------------------------------------------------------------

def _site(site_id, x, y, component_class="riser"):
    return AssetSite(site_id, x, y, component_class, f"L_{site_id}")


def test_flood_zero_variance_returns_baseline(rng):
    params = FloodFieldParams(baseline={'a': 0.7}, default_depth=0.2, variance=0.0, range_km=2.0)
    depths = sample_flood_depths(params, [_site('a', 0, 0), _site('b', 3, 1)], rng)
    assert depths == {'a': 0.7, 'b': 0.2}


def test_flood_co_located_sites_share_perturbation(rng):
    params = FloodFieldParams(default_depth=1.0, variance=0.25, range_km=2.0)
    for _ in range(50):
        depths = sample_flood_depths(params, [_site('a', 1, 1), _site('b', 1, 1), _site('c', 4, 0)], rng)
        assert depths['a'] == depths['b']


def test_flood_single_site_variance(rng):
    params = FloodFieldParams(default_depth=2.0, variance=0.25, range_km=1.0)
    site = [_site('a', 0, 0)]
    samples = np.array([sample_flood_depths(params, site, rng)['a'] for _ in range(100_000)])
    assert np.var(samples - 2.0) == pytest.approx(0.25, rel=0.05)


def test_flood_needs_sites(rng):
    with pytest.raises(ParameterDomainError):
        sample_flood_depths(FloodFieldParams(variance=0.1), [], rng)


def test_cholesky_gives_up_on_indefinite_matrix():
    with pytest.raises(NumericalError):
        _cholesky_with_jitter(np.array([[1.0, 2.0], [2.0, 1.0]]))


# -- copula failures ----------------------------------------------------------------

def test_copula_marginals_match_probabilities(rng):
    p = [0.1, 0.35, 0.5, 0.8]
    locations = np.array([(0, 0), (0.5, 0), (1, 1), (3, 2)], dtype=float)
    _, _, failed = draw_failure_matrix(p, locations, 2.0, rng, n_draws=100_000)
    assert np.all(np.abs(failed.mean(axis=0) - p) <= 0.01)


def test_copula_impossible_and_certain_events(rng):
    sites = [_site('a', 0, 0), _site('b', 1, 0), _site('c', 2, 0)]
    for _ in range(20):
        assert not any(d.failed for d in sample_correlated_failures({'a': 0, 'b': 0, 'c': 0}, sites, 2.0, rng))
        assert all(d.failed for d in sample_correlated_failures({'a': 1, 'b': 1, 'c': 1}, sites, 2.0, rng))


def test_copula_joint_failure_extremes(rng):
    together = np.array([(0, 0), (0, 0)], dtype=float)
    _, _, failed = draw_failure_matrix([0.5, 0.5], together, 2.0, rng, n_draws=100_000)
    assert np.mean(failed[:, 0] & failed[:, 1]) == pytest.approx(0.5, abs=0.01)

    apart = np.array([(0, 0), (100, 0)], dtype=float)
    _, _, failed = draw_failure_matrix([0.5, 0.5], apart, 0.01, rng, n_draws=100_000)
    assert np.mean(failed[:, 0] & failed[:, 1]) == pytest.approx(0.25, abs=0.01)


def test_copula_rejects_bad_probability(rng):
    with pytest.raises(ParameterDomainError):
        draw_failure_matrix([1.5], np.zeros((1, 2)), 1.0, rng)


# -- discovery --------------------------------------------------------------------

def test_arrival_counts_zero_rate():
    process = DiscoveryProcess((0.0, 5.0), (0.0, 3.0), 10.0)
    rng = np.random.default_rng(1)
    assert all(sample_arrival_counts(process, 1.0, 2.0, rng) == 0 for _ in range(100))


def test_arrival_counts_mean(rng):
    process = DiscoveryProcess((0.0,), (4.0,), 10.0)
    counts = [sample_arrival_counts(process, 2.0, 0.5, rng) for _ in range(100_000)]
    assert np.mean(counts) == pytest.approx(2.0, rel=0.02)


def test_arrival_counts_over_horizon_with_constant_rate(rng):
    process = DiscoveryProcess((0.0,), (1.5,), 8.0)
    counts = [sample_arrival_counts(process, 0.0, 8.0, rng) for _ in range(20_000)]
    assert np.mean(counts) == pytest.approx(12.0, rel=0.02)


def test_arrival_counts_reject_non_positive_dt(rng):
    process = DiscoveryProcess((0.0,), (1.0,), 10.0)
    with pytest.raises(ParameterDomainError):
        sample_arrival_counts(process, 1.0, 0.0, rng)


def test_piecewise_cumulative_rate():
    process = DiscoveryProcess((0.0, 6.0, 18.0), (1.5, 0.8, 0.2), 48.0)
    assert process.cumulative(48.0) == pytest.approx(24.6)
    assert process.cumulative(10.0) == pytest.approx(9.0 + 3.2)
    assert process.rate_at(6.0) == 0.8


def test_discovery_process_validation():
    with pytest.raises(ParameterDomainError):
        DiscoveryProcess((1.0,), (1.0,), 10.0)
    with pytest.raises(ParameterDomainError):
        DiscoveryProcess((0.0, 4.0), (1.0, -1.0), 10.0)


def test_arrival_times_follow_rate(rng):
    process = DiscoveryProcess((0.0, 6.0), (3.0, 0.0), 12.0)
    times = sample_arrival_times(process, 500, rng)
    assert times == sorted(times)
    assert all(0.0 <= t < 6.0 for t in times)


def test_arrival_times_with_zero_rate_and_pending_damage(rng):
    process = DiscoveryProcess((0.0,), (0.0,), 12.0)
    assert sample_arrival_times(process, 0, rng) == []
    with pytest.raises(ConfigurationError):
        sample_arrival_times(process, 3, rng)


# -- repair times ------------------------------------------------------------------

def test_repair_time_median(rng):
    prior = RepairPrior("pole", mu=math.log(2.0), sigma=0.5, truncation_h=None)
    samples = [sample_repair_time(prior, rng) for _ in range(100_000)]
    assert np.median(samples) == pytest.approx(2.0, rel=0.03)


def test_repair_time_truncation(rng):
    prior = RepairPrior("pole", mu=math.log(2.0), sigma=0.5, truncation_h=12.0)
    samples = np.array([sample_repair_time(prior, rng) for _ in range(100_000)])
    assert samples.max() <= 12.0


def test_repair_time_degenerate_spread(rng):
    prior = RepairPrior("pole", mu=math.log(3.0), sigma=1e-12, truncation_h=None)
    assert sample_repair_time(prior, rng) == pytest.approx(3.0, rel=1e-9)


def test_repair_time_unsatisfiable_truncation(rng):
    prior = RepairPrior("transformer", mu=math.log(10.0), sigma=0.3, truncation_h=1.0)
    with pytest.raises(ConfigurationError):
        sample_repair_time(prior, rng)


# -- scenarios ---------------------------------------------------------------------

def test_scenario_generation_is_deterministic(scenario_config13, feeder13, roads13, tmp_path):
    first = save_scenario(generate_scenario(scenario_config13, 7, feeder13, roads13), tmp_path / "a.yaml")
    second = save_scenario(generate_scenario(scenario_config13, 7, feeder13, roads13), tmp_path / "b.yaml")
    assert first.read_bytes() == second.read_bytes()


def test_scenario_file_reloads(scenario_config13, feeder13, roads13, tmp_path):
    scenario = generate_scenario(scenario_config13, 11, feeder13, roads13)
    loaded = load_scenario(save_scenario(scenario, tmp_path / "s.yaml"))
    assert loaded == scenario


def _with_medians(config: ScenarioConfig, median_wind: float, median_flood: float) -> ScenarioConfig:
    wind = {cls: FragilityCurve(cls, median_wind, c.dispersion) for cls, c in config.wind_fragility.items()}
    flood = {cls: FragilityCurve(cls, median_flood, c.dispersion) for cls, c in config.flood_fragility.items()}
    return replace(config, wind_fragility=wind, flood_fragility=flood)


def test_unbreakable_components_give_empty_scenario(scenario_config13, feeder13, roads13):
    config = _with_medians(scenario_config13, 1e9, 1e9)
    for seed in range(5):
        scenario = generate_scenario(config, seed, feeder13, roads13)
        assert scenario.initial_damage == ()
        assert scenario.arrivals == ()
        assert scenario.road_closures == ()


def test_initial_confirmation_split(scenario_config13, feeder13, roads13):
    config = _with_medians(scenario_config13, 1e-9, 1e-9)
    n_sites = len(feeder13.branch_by_site)
    confirmed = 0
    for seed in range(200):
        scenario = generate_scenario(config, seed, feeder13, roads13)
        assert len(scenario.damaged_sites) == n_sites
        confirmed += len(scenario.initial_damage)
    assert confirmed / (200 * n_sites) == pytest.approx(0.4, abs=0.04)


def test_shifted_preset_scales_storm_and_tickets(scenario_config13):
    shifted = scenario_config13.shifted()
    assert shifted.preset == "shifted"
    assert shifted.hurricane.delta_p == pytest.approx(1.5 * scenario_config13.hurricane.delta_p)
    assert shifted.discovery.rates == pytest.approx(tuple(1.5 * r for r in scenario_config13.discovery.rates))


def test_scenario_config_rejects_unknown_key():
    with pytest.raises(ConfigurationError, match="surge"):
        ScenarioConfig.from_dict({
            'feeder': 'feeder_13.yaml', 'roads': 'roads_13.yaml', 'surge': 1,
            'discovery': {'breakpoints': [0], 'rates': [1.0]}, 'repair_priors': {},
        })
