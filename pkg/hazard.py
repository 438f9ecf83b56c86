"""
Hurricane and flood damage scenarios

Turns compact storm parameters into site intensities, failure probabilities,
spatially correlated failure draws, progressive ticket arrivals and repair
durations, and materializes everything into a replayable HazardScenario.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import yaml
from scipy.spatial.distance import cdist
from scipy.stats import lognorm, norm

from errors import ConfigurationError, NumericalError, ParameterDomainError
from feeder import FeederModel, RoadGraph, load_feeder, load_roads
from settings import resolve_data_path

logger = logging.getLogger(__name__)

SCENARIO_FORMAT_VERSION = 1
CONFIG_FORMAT_VERSION = 1

HAZARDS = ("wind", "flood")
ROAD_CLASS = "road"

JITTER_START = 1e-10
JITTER_MAX = 1e-6
MAX_REPAIR_RESAMPLES = 10000
MIN_RANGE_KM = 0.01


# ---------------------------------------------------------------------------
# Parameter types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HurricaneParams:
    """Holland wind-field parameters; delta_p in hPa, r_m in km, v_bg in m/s"""
    delta_p: float = 50.0
    r_m: float = 40.0
    b_shape: float = 1.5
    rho_air: float = 1.15
    v_bg: float = 5.0
    p_env: Optional[float] = None
    p_c: Optional[float] = None
    center_km: Tuple[float, float] = (0.0, 0.0)

    def validate(self) -> None:
        if self.delta_p <= 0:
            raise ParameterDomainError(f"delta_p must be positive, got {self.delta_p}")
        if self.r_m <= 0:
            raise ParameterDomainError(f"r_m must be positive, got {self.r_m}")
        if not 1.0 <= self.b_shape <= 3.0:
            raise ParameterDomainError(f"b_shape must lie in [1, 3], got {self.b_shape}")
        if self.rho_air <= 0:
            raise ParameterDomainError(f"rho_air must be positive, got {self.rho_air}")
        if self.v_bg < 0:
            raise ParameterDomainError(f"v_bg must be non-negative, got {self.v_bg}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "HurricaneParams":
        _check_keys(data, ("delta_p", "r_m", "b_shape", "rho_air", "v_bg", "p_env", "p_c", "center_km"), "hurricane")
        values = dict(data)
        if 'center_km' in values:
            values['center_km'] = tuple(float(v) for v in values['center_km'])
        if 'b_shape' not in values and values.get('p_env') is not None and values.get('p_c') is not None:
            values['b_shape'] = holland_b_estimate(float(values['p_env']), float(values['p_c']))
        params = cls(**values)
        params.validate()
        return params


@dataclass(frozen=True)
class FloodFieldParams:
    """Baseline inundation plus an exponential-kernel Gaussian perturbation (m, m^2, km)"""
    baseline: Mapping[str, float] = field(default_factory=dict)
    default_depth: float = 0.0
    variance: float = 0.0
    range_km: float = 1.0
    jitter: float = JITTER_START

    def validate(self) -> None:
        if self.variance < 0:
            raise ParameterDomainError(f"flood variance must be non-negative, got {self.variance}")
        if self.range_km <= 0:
            raise ParameterDomainError(f"flood range_km must be positive, got {self.range_km}")
        if self.default_depth < 0 or any(d < 0 for d in self.baseline.values()):
            raise ParameterDomainError("baseline flood depths must be non-negative")
        if self.jitter <= 0:
            raise ParameterDomainError("flood jitter must be positive")

    def baseline_at(self, location_id: str) -> float:
        return float(self.baseline.get(location_id, self.default_depth))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "FloodFieldParams":
        _check_keys(data, ("baseline", "default_depth", "variance", "range_km", "jitter"), "flood")
        values = dict(data)
        values['baseline'] = {str(k): float(v) for k, v in (values.get('baseline') or {}).items()}
        params = cls(**values)
        params.validate()
        return params


@dataclass(frozen=True)
class FragilityCurve:
    component_class: str
    median: float
    dispersion: float
    damage_state: str = "failed"

    def __post_init__(self):
        if self.median <= 0 or self.dispersion <= 0:
            raise ParameterDomainError(
                f"fragility for '{self.component_class}' needs positive median and dispersion"
            )


@dataclass(frozen=True)
class AssetSite:
    id: str
    x_km: float
    y_km: float
    component_class: str
    branch_id: str


@dataclass(frozen=True)
class DamageDraw:
    site_id: str
    p_wind: float
    p_flood: float
    p_combined: float
    z_latent: float
    u_uniform: float
    failed: bool


@dataclass(frozen=True)
class DiscoveryProcess:
    """
    Piecewise-constant ticket confirmation rate (tickets/hour)

    `breakpoints[i]` is where `rates[i]` starts; the first breakpoint is 0 and
    the last piece runs to the horizon.
    """
    breakpoints: Tuple[float, ...]
    rates: Tuple[float, ...]
    horizon_h: float

    def __post_init__(self):
        if len(self.breakpoints) != len(self.rates) or not self.breakpoints:
            raise ParameterDomainError("discovery breakpoints and rates must be non-empty and equal length")
        if self.breakpoints[0] != 0:
            raise ParameterDomainError("first discovery breakpoint must be 0")
        if any(b2 <= b1 for b1, b2 in zip(self.breakpoints, self.breakpoints[1:])):
            raise ParameterDomainError("discovery breakpoints must be strictly increasing")
        if any(r < 0 for r in self.rates):
            raise ParameterDomainError("discovery rates must be non-negative")
        if self.horizon_h <= 0 or self.breakpoints[-1] >= self.horizon_h:
            raise ParameterDomainError("discovery breakpoints must lie inside the horizon")

    @property
    def max_rate(self) -> float:
        return max(self.rates)

    def rate_at(self, t: float) -> float:
        index = int(np.searchsorted(self.breakpoints, t, side='right')) - 1
        return self.rates[max(index, 0)]

    def cumulative(self, t: float) -> float:
        """Expected tickets on [0, t]"""
        t = min(max(t, 0.0), self.horizon_h)
        edges = list(self.breakpoints) + [self.horizon_h]
        total = 0.0
        for start, end, rate in zip(edges, edges[1:], self.rates):
            if t <= start:
                break
            total += rate * (min(t, end) - start)
        return total

    def scaled(self, factor: float) -> "DiscoveryProcess":
        return replace(self, rates=tuple(r * factor for r in self.rates))


@dataclass(frozen=True)
class RepairPrior:
    component_class: str
    mu: float
    sigma: float
    truncation_h: Optional[float] = 12.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ParameterDomainError(f"repair prior sigma must be positive for '{self.component_class}'")
        if self.truncation_h is not None and self.truncation_h <= 0:
            raise ParameterDomainError(f"repair truncation must be positive for '{self.component_class}'")

    @property
    def median_h(self) -> float:
        """Point estimate shown to dispatchers"""
        median = math.exp(self.mu)
        return median if self.truncation_h is None else min(median, self.truncation_h)


@dataclass(frozen=True)
class CongestionProfile:
    """Travel-time inflation rho(t), constant over fixed-length blocks"""
    block_h: float
    values: Tuple[float, ...]
    rho_lo: float = 1.2
    rho_hi: float = 2.0

    def at(self, t: float) -> float:
        if not self.values:
            return 1.0
        index = min(max(int(t // self.block_h), 0), len(self.values) - 1)
        return self.values[index]


@dataclass(frozen=True)
class HazardScenario:
    """One fully materialized storm outcome; replayable without this module"""
    seed: int
    feeder_name: str
    horizon_h: float
    initial_damage: Tuple[str, ...]
    arrivals: Tuple[Tuple[float, str], ...]
    repair_times: Mapping[str, float]
    road_closures: Tuple[str, ...]
    congestion: CongestionProfile
    preset: str = "base"

    @property
    def damaged_sites(self) -> Tuple[str, ...]:
        return tuple(sorted(set(self.initial_damage) | {site for _, site in self.arrivals}))

    def validate(self) -> None:
        initial = set(self.initial_damage)
        times = [t for t, _ in self.arrivals]
        if any(t2 < t1 for t1, t2 in zip(times, times[1:])):
            raise ConfigurationError("scenario arrivals are not time-ordered")
        if any(t < 0 or t > self.horizon_h for t in times):
            raise ConfigurationError("scenario arrival outside the horizon")
        for _, site in self.arrivals:
            if site in initial:
                raise ConfigurationError(f"site '{site}' is both initially confirmed and arriving")
        missing = set(self.damaged_sites) - set(self.repair_times)
        if missing:
            raise ConfigurationError(f"no repair time for damaged sites {sorted(missing)}")
        for rho in self.congestion.values:
            if not self.congestion.rho_lo <= rho <= self.congestion.rho_hi:
                raise ConfigurationError(f"congestion value {rho} outside [{self.congestion.rho_lo}, {self.congestion.rho_hi}]")


# ---------------------------------------------------------------------------
# Intensities and probabilities
# ---------------------------------------------------------------------------

def holland_b_estimate(p_env: float, p_c: float) -> float:
    """Shape parameter from environmental and central pressure (hPa), clamped to [1, 3]"""
    if p_env <= p_c:
        raise ParameterDomainError(f"p_env ({p_env}) must exceed p_c ({p_c})")
    return float(min(3.0, max(1.0, 2.0 - (p_env - p_c) / 160.0)))


def wind_speed_at(params: HurricaneParams, r: float) -> float:
    """Gradient wind plus background translation at range r (km), m/s"""
    params.validate()
    if not r > 0:
        raise ParameterDomainError(f"range must be positive, got {r}")
    delta_p_pa = params.delta_p * 100.0
    scaled = (params.r_m / r) ** params.b_shape
    gradient = math.sqrt(params.b_shape * delta_p_pa / params.rho_air * scaled * math.exp(-scaled))
    return gradient + params.v_bg


def fragility_exceedance(intensity: float, curve: FragilityCurve) -> float:
    """Lognormal exceedance probability; wind (m/s) and flood depth (m) share the form"""
    if intensity < 0:
        raise ParameterDomainError(f"intensity must be non-negative, got {intensity}")
    if intensity == 0:
        return 0.0
    return float(norm.cdf(math.log(intensity / curve.median) / curve.dispersion))


def combine_hazards(p_wind: float, p_flood: float) -> float:
    """Failure probability when either hazard can fail the component"""
    for p in (p_wind, p_flood):
        if not 0.0 <= p <= 1.0:
            raise ParameterDomainError(f"probability out of [0, 1]: {p}")
    return 1.0 - (1.0 - p_wind) * (1.0 - p_flood)


def _cholesky_with_jitter(matrix: np.ndarray, jitter: float = JITTER_START) -> np.ndarray:
    jitter = max(jitter, JITTER_START)
    identity = np.eye(matrix.shape[0])
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            return np.linalg.cholesky(matrix + jitter * identity)
        except np.linalg.LinAlgError:
            logger.warning(f"⚠️ Covariance factorization failed with jitter {jitter:.0e}, escalating")
            jitter *= 10.0
    raise NumericalError(f"covariance factorization failed with jitter up to {JITTER_MAX:.0e}")


def _unique_locations(locations: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Distinct points and the index of each input point among them"""
    unique, inverse = np.unique(np.asarray(locations, dtype=float).reshape(-1, 2), axis=0, return_inverse=True)
    return unique, inverse.reshape(-1)


def sample_flood_field(params: FloodFieldParams, ids: Sequence[str], locations: np.ndarray,
                       rng: np.random.Generator) -> np.ndarray:
    """One joint depth draw (m) at arbitrary labelled points"""
    params.validate()
    if len(ids) == 0:
        raise ParameterDomainError("flood field needs at least one location")
    baseline = np.array([params.baseline_at(i) for i in ids], dtype=float)
    if params.variance == 0:
        return baseline
    unique, inverse = _unique_locations(locations)
    covariance = params.variance * np.exp(-cdist(unique, unique) / params.range_km)
    chol = _cholesky_with_jitter(covariance, params.jitter)
    perturbation = chol @ rng.standard_normal(unique.shape[0])
    return np.maximum(baseline + perturbation[inverse], 0.0)


def sample_flood_depths(params: FloodFieldParams, sites: Sequence[AssetSite], rng: np.random.Generator) -> Dict[str, float]:
    if not sites:
        raise ParameterDomainError("sites must be non-empty")
    locations = np.array([(s.x_km, s.y_km) for s in sites])
    depths = sample_flood_field(params, [s.id for s in sites], locations, rng)
    return {site.id: float(d) for site, d in zip(sites, depths)}


def draw_failure_matrix(probabilities: Sequence[float], locations: np.ndarray, range_km: float,
                        rng: np.random.Generator, n_draws: int = 1) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Gaussian-copula failure draws

    Returns (z, u, failed), each shaped (n_draws, n_sites). Co-located sites
    share one latent value.
    """
    p = np.asarray(probabilities, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ParameterDomainError("failure probabilities must lie in [0, 1]")
    if range_km <= 0:
        raise ParameterDomainError(f"copula range must be positive, got {range_km}")
    unique, inverse = _unique_locations(locations)
    correlation = np.exp(-cdist(unique, unique) / range_km)
    chol = _cholesky_with_jitter(correlation)
    latent = (chol @ rng.standard_normal((unique.shape[0], n_draws))).T
    z = latent[:, inverse]
    u = norm.cdf(z)
    failed = (u < p) | (p >= 1.0)
    return z, u, failed


def sample_correlated_failures(probabilities: Mapping[str, float], sites: Sequence[AssetSite], range_km: float,
                               rng: np.random.Generator, p_wind: Optional[Mapping[str, float]] = None,
                               p_flood: Optional[Mapping[str, float]] = None) -> List[DamageDraw]:
    if not sites:
        return []
    p = [probabilities[s.id] for s in sites]
    z, u, failed = draw_failure_matrix(p, np.array([(s.x_km, s.y_km) for s in sites]), range_km, rng)
    p_wind = p_wind or {}
    p_flood = p_flood or {}
    return [
        DamageDraw(
            site_id=site.id,
            p_wind=float(p_wind.get(site.id, 0.0)),
            p_flood=float(p_flood.get(site.id, 0.0)),
            p_combined=float(p[i]),
            z_latent=float(z[0, i]),
            u_uniform=float(u[0, i]),
            failed=bool(failed[0, i]),
        )
        for i, site in enumerate(sites)
    ]


# ---------------------------------------------------------------------------
# Discovery and repair
# ---------------------------------------------------------------------------

def sample_arrival_counts(process: DiscoveryProcess, t: float, dt: float, rng: np.random.Generator) -> int:
    """Tickets confirmed on [t, t + dt); pieces of the rate are integrated separately"""
    if dt <= 0:
        raise ParameterDomainError(f"dt must be positive, got {dt}")
    mean = process.cumulative(t + dt) - process.cumulative(t)
    return int(rng.poisson(mean)) if mean > 0 else 0


def sample_arrival_times(process: DiscoveryProcess, count: int, rng: np.random.Generator) -> List[float]:
    """
    Confirmation times for `count` tickets by thinning

    Candidates are uniform over the horizon and kept with probability
    rate(t) / max_rate, which yields i.i.d. times with density rate / cumulative.
    """
    if count <= 0:
        return []
    if process.max_rate <= 0:
        raise ConfigurationError("discovery rate is zero over the horizon but damage awaits confirmation")
    accepted: List[float] = []
    while len(accepted) < count:
        candidates = rng.uniform(0.0, process.horizon_h, size=2 * count)
        keep = rng.random(2 * count) * process.max_rate < np.array([process.rate_at(c) for c in candidates])
        accepted.extend(float(c) for c in candidates[keep])
    return sorted(accepted[:count])


def sample_repair_time(prior: RepairPrior, rng: np.random.Generator) -> float:
    """Lognormal repair duration (h), resampled until under the truncation"""
    if prior.truncation_h is None:
        return float(math.exp(rng.normal(prior.mu, prior.sigma)))
    floor = float(lognorm.ppf(0.001, s=prior.sigma, scale=math.exp(prior.mu)))
    if prior.truncation_h < floor:
        raise ConfigurationError(
            f"repair truncation {prior.truncation_h} h for '{prior.component_class}' is below the 0.1% quantile {floor:.3g} h"
        )
    for _ in range(MAX_REPAIR_RESAMPLES):
        duration = float(math.exp(rng.normal(prior.mu, prior.sigma)))
        if duration <= prior.truncation_h:
            return duration
    logger.warning(f"⚠️ Repair time for '{prior.component_class}' hit the resample limit; clipping to truncation")
    return float(prior.truncation_h)


# ---------------------------------------------------------------------------
# Scenario configuration and generation
# ---------------------------------------------------------------------------

def _check_keys(data: Mapping[str, Any], allowed: Sequence[str], where: str) -> None:
    unknown = sorted(set(data) - set(allowed) - {'__line__'})
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _fragility_table(data: Mapping[str, Any], hazard: str) -> Dict[str, FragilityCurve]:
    table = {}
    for component_class, entry in (data or {}).items():
        _check_keys(entry, ("median", "dispersion"), f"fragility.{hazard}.{component_class}")
        table[str(component_class)] = FragilityCurve(str(component_class), float(entry['median']), float(entry['dispersion']))
    return table


def _repair_priors(data: Mapping[str, Any]) -> Dict[str, RepairPrior]:
    priors = {}
    for component_class, entry in (data or {}).items():
        _check_keys(entry, ("mu", "median_h", "sigma", "truncation_h"), f"repair_priors.{component_class}")
        if 'mu' in entry:
            mu = float(entry['mu'])
        elif 'median_h' in entry:
            mu = math.log(float(entry['median_h']))
        else:
            raise ConfigurationError(f"repair prior '{component_class}' needs mu or median_h")
        truncation = entry.get('truncation_h', 12.0)
        priors[str(component_class)] = RepairPrior(
            str(component_class), mu, float(entry['sigma']),
            None if truncation is None else float(truncation),
        )
    return priors


@dataclass(frozen=True)
class ScenarioConfig:
    feeder: str
    roads: str
    hurricane: HurricaneParams
    flood: FloodFieldParams
    wind_fragility: Mapping[str, FragilityCurve]
    flood_fragility: Mapping[str, FragilityCurve]
    discovery: DiscoveryProcess
    repair_priors: Mapping[str, RepairPrior]
    horizon_h: float = 48.0
    hazards: Tuple[str, ...] = HAZARDS
    copula_range_km: float = 2.0
    initial_confirm_probability: float = 0.4
    congestion_block_h: float = 6.0
    rho_lo: float = 1.2
    rho_hi: float = 2.0
    preset: str = "base"
    base_dir: Optional[str] = None

    def validate(self) -> None:
        if self.horizon_h <= 0:
            raise ConfigurationError("horizon_h must be positive")
        unknown = set(self.hazards) - set(HAZARDS)
        if unknown:
            raise ConfigurationError(f"unknown hazards: {sorted(unknown)}")
        if self.copula_range_km <= 0:
            raise ConfigurationError("copula_range_km must be positive")
        if not 0.0 <= self.initial_confirm_probability <= 1.0:
            raise ConfigurationError("initial_confirm_probability must lie in [0, 1]")
        if not 0 < self.rho_lo <= self.rho_hi:
            raise ConfigurationError("congestion bounds must satisfy 0 < rho_lo <= rho_hi")
        if self.congestion_block_h <= 0:
            raise ConfigurationError("congestion block length must be positive")
        if abs(self.discovery.horizon_h - self.horizon_h) > 1e-12:
            raise ConfigurationError("discovery horizon differs from scenario horizon")

    def feeder_path(self) -> Path:
        return _resolve(self.feeder, self.base_dir)

    def roads_path(self) -> Path:
        return _resolve(self.roads, self.base_dir)

    def shifted(self, factor: float = 1.5) -> "ScenarioConfig":
        """Out-of-range preset: stronger storm and faster ticket inflow"""
        return replace(
            self,
            hurricane=replace(self.hurricane, delta_p=self.hurricane.delta_p * factor),
            discovery=self.discovery.scaled(factor),
            preset="shifted",
        )

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_dir: Optional[str] = None) -> "ScenarioConfig":
        _check_keys(data, (
            "format_version", "feeder", "roads", "horizon_h", "hazards", "hurricane", "flood", "fragility",
            "copula_range_km", "discovery", "repair_priors", "initial_confirm_probability", "congestion", "preset",
        ), "scenario config")
        if data.get('format_version', CONFIG_FORMAT_VERSION) != CONFIG_FORMAT_VERSION:
            raise ConfigurationError(f"unsupported scenario config format_version {data.get('format_version')!r}")
        for key in ("feeder", "roads", "discovery", "repair_priors"):
            if key not in data:
                raise ConfigurationError(f"scenario config is missing '{key}'")

        horizon = float(data.get('horizon_h', 48.0))
        fragility = data.get('fragility') or {}
        _check_keys(fragility, HAZARDS, "fragility")
        discovery = data['discovery']
        _check_keys(discovery, ("breakpoints", "rates"), "discovery")
        congestion = data.get('congestion') or {}
        _check_keys(congestion, ("block_h", "rho_lo", "rho_hi"), "congestion")

        try:
            config = cls(
                feeder=str(data['feeder']),
                roads=str(data['roads']),
                hurricane=HurricaneParams.from_dict(data.get('hurricane') or {}),
                flood=FloodFieldParams.from_dict(data.get('flood') or {}),
                wind_fragility=_fragility_table(fragility.get('wind'), 'wind'),
                flood_fragility=_fragility_table(fragility.get('flood'), 'flood'),
                discovery=DiscoveryProcess(
                    tuple(float(b) for b in discovery['breakpoints']),
                    tuple(float(r) for r in discovery['rates']),
                    horizon,
                ),
                repair_priors=_repair_priors(data['repair_priors']),
                horizon_h=horizon,
                hazards=tuple(data.get('hazards', HAZARDS)),
                copula_range_km=float(data.get('copula_range_km', 2.0)),
                initial_confirm_probability=float(data.get('initial_confirm_probability', 0.4)),
                congestion_block_h=float(congestion.get('block_h', 6.0)),
                rho_lo=float(congestion.get('rho_lo', 1.2)),
                rho_hi=float(congestion.get('rho_hi', 2.0)),
                preset=str(data.get('preset', 'base')),
                base_dir=base_dir,
            )
        except ParameterDomainError as e:
            raise ConfigurationError(f"invalid scenario config: {e}") from e
        config.validate()
        if config.preset == "shifted":
            config = config.shifted()
        return config


def _resolve(name: str, base_dir: Optional[str]) -> Path:
    if base_dir is not None:
        candidate = Path(base_dir) / name
        if candidate.exists():
            return candidate
    return resolve_data_path(name)


def load_scenario_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        with open(path, 'r') as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError(f"cannot parse scenario config {path}: {e}") from e
    return ScenarioConfig.from_dict(data, base_dir=str(path.parent))


def asset_sites(feeder: FeederModel) -> List[AssetSite]:
    """One site per repairable branch, located at the branch midpoint, in id order"""
    sites = []
    for site_id, branch in sorted(feeder.branch_by_site.items()):
        x, y = feeder.branch_midpoint(branch.id)
        sites.append(AssetSite(site_id, x, y, branch.component_class, branch.id))
    return sites


def _wind_probability(config: ScenarioConfig, component_class: str, x: float, y: float) -> float:
    curve = config.wind_fragility.get(component_class)
    if 'wind' not in config.hazards or curve is None:
        return 0.0
    cx, cy = config.hurricane.center_km
    r = max(math.hypot(x - cx, y - cy), MIN_RANGE_KM)
    return fragility_exceedance(wind_speed_at(config.hurricane, r), curve)


def _flood_probability(config: ScenarioConfig, component_class: str, depth: float) -> float:
    curve = config.flood_fragility.get(component_class)
    if 'flood' not in config.hazards or curve is None:
        return 0.0
    return fragility_exceedance(depth, curve)


def generate_scenario(config: ScenarioConfig, seed: int, feeder: Optional[FeederModel] = None,
                      roads: Optional[RoadGraph] = None) -> HazardScenario:
    """Draw one storm outcome; identical (config, seed) gives an identical scenario"""
    config.validate()
    feeder = feeder or load_feeder(config.feeder_path())
    roads = roads or load_roads(config.roads_path(), feeder)
    rng = np.random.default_rng(seed)

    sites = asset_sites(feeder)
    segment_ids = sorted(roads.segments)
    midpoints = [roads.segment_midpoint(s) for s in segment_ids]

    # Flood field: one joint draw over asset sites and road midpoints
    point_ids = [s.id for s in sites] + segment_ids
    points = np.array([(s.x_km, s.y_km) for s in sites] + midpoints, dtype=float).reshape(-1, 2)
    if 'flood' in config.hazards and len(point_ids) > 0:
        depths = sample_flood_field(config.flood, point_ids, points, rng)
    else:
        depths = np.zeros(len(point_ids))

    p_wind = {s.id: _wind_probability(config, s.component_class, s.x_km, s.y_km) for s in sites}
    p_flood = {s.id: _flood_probability(config, s.component_class, float(depths[i])) for i, s in enumerate(sites)}
    p_site = {s.id: combine_hazards(p_wind[s.id], p_flood[s.id]) for s in sites}

    draws = sample_correlated_failures(p_site, sites, config.copula_range_km, rng, p_wind, p_flood)
    damaged = [d.site_id for d in draws if d.failed]

    closures = []
    if segment_ids:
        offset = len(sites)
        q_road = np.array([
            combine_hazards(
                _wind_probability(config, ROAD_CLASS, x, y),
                _flood_probability(config, ROAD_CLASS, float(depths[offset + k])),
            )
            for k, (x, y) in enumerate(midpoints)
        ])
        closed_mask = rng.random(len(segment_ids)) < q_road
        closures = [seg for seg, closed in zip(segment_ids, closed_mask) if closed]

    confirm = rng.random(len(damaged)) < config.initial_confirm_probability
    initial = sorted(site for site, now in zip(damaged, confirm) if now)
    pending = [site for site, now in zip(damaged, confirm) if not now]
    times = sample_arrival_times(config.discovery, len(pending), rng)
    order = [pending[i] for i in rng.permutation(len(pending))] if pending else []
    arrivals = tuple(zip(times, order))

    by_site = {s.id: s for s in sites}
    repair_times = {}
    for site_id in sorted(damaged):
        prior = config.repair_priors.get(by_site[site_id].component_class)
        if prior is None:
            raise ConfigurationError(f"no repair prior for component class '{by_site[site_id].component_class}'")
        repair_times[site_id] = sample_repair_time(prior, rng)

    n_blocks = int(math.ceil(config.horizon_h / config.congestion_block_h))
    congestion = CongestionProfile(
        block_h=config.congestion_block_h,
        values=tuple(float(v) for v in rng.uniform(config.rho_lo, config.rho_hi, n_blocks)),
        rho_lo=config.rho_lo,
        rho_hi=config.rho_hi,
    )

    scenario = HazardScenario(
        seed=int(seed),
        feeder_name=feeder.name,
        horizon_h=config.horizon_h,
        initial_damage=tuple(initial),
        arrivals=arrivals,
        repair_times=repair_times,
        road_closures=tuple(closures),
        congestion=congestion,
        preset=config.preset,
    )
    scenario.validate()
    logger.debug(
        f"Scenario seed={seed}: {len(damaged)} damaged ({len(initial)} confirmed at t=0), {len(closures)} road closures"
    )
    return scenario


# ---------------------------------------------------------------------------
# Scenario files
# ---------------------------------------------------------------------------

def scenario_to_dict(scenario: HazardScenario) -> Dict[str, Any]:
    return {
        'format_version': SCENARIO_FORMAT_VERSION,
        'seed': scenario.seed,
        'feeder': scenario.feeder_name,
        'preset': scenario.preset,
        'horizon_h': float(scenario.horizon_h),
        'initial_damage': list(scenario.initial_damage),
        'arrivals': [{'time_h': float(t), 'site': site} for t, site in scenario.arrivals],
        'repair_times': {site: float(scenario.repair_times[site]) for site in sorted(scenario.repair_times)},
        'road_closures': list(scenario.road_closures),
        'congestion': {
            'block_h': float(scenario.congestion.block_h),
            'rho_lo': float(scenario.congestion.rho_lo),
            'rho_hi': float(scenario.congestion.rho_hi),
            'values': [float(v) for v in scenario.congestion.values],
        },
    }


def scenario_from_dict(data: Mapping[str, Any]) -> HazardScenario:
    if data.get('format_version') != SCENARIO_FORMAT_VERSION:
        raise ConfigurationError(f"unsupported scenario format_version {data.get('format_version')!r}")
    congestion = data['congestion']
    scenario = HazardScenario(
        seed=int(data['seed']),
        feeder_name=str(data['feeder']),
        horizon_h=float(data['horizon_h']),
        initial_damage=tuple(str(s) for s in data.get('initial_damage', [])),
        arrivals=tuple((float(a['time_h']), str(a['site'])) for a in data.get('arrivals', [])),
        repair_times={str(k): float(v) for k, v in (data.get('repair_times') or {}).items()},
        road_closures=tuple(str(s) for s in data.get('road_closures', [])),
        congestion=CongestionProfile(
            block_h=float(congestion['block_h']),
            values=tuple(float(v) for v in congestion['values']),
            rho_lo=float(congestion['rho_lo']),
            rho_hi=float(congestion['rho_hi']),
        ),
        preset=str(data.get('preset', 'base')),
    )
    scenario.validate()
    return scenario


def save_scenario(scenario: HazardScenario, path) -> Path:
    path = Path(path)
    with open(path, 'w') as f:
        yaml.safe_dump(scenario_to_dict(scenario), f, sort_keys=False, default_flow_style=False)
    return path


def load_scenario(path) -> HazardScenario:
    with open(path, 'r') as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict):
        raise ConfigurationError(f"scenario file {path} is not a mapping")
    return scenario_from_dict(data)
