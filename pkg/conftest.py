"""
Shared fixtures: a hand-checkable four-bus feeder with its roads, the bundled
IEEE 13-node feeder, and scenario helpers
"""

from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pytest

from env import CrewType, CrewView, DispatchState, EnvConfig, JointAction, RestorationEnv, TargetView
from feeder import (
    COMPONENT_CLASSES,
    HOLD,
    RETURN,
    Branch,
    Bus,
    CrewStatus,
    Depot,
    FeasibilityMask,
    FeederModel,
    RoadGraph,
    RoadSegment,
    load_feeder,
    load_roads,
    site_road_nodes,
)
from hazard import CongestionProfile, HazardScenario, load_scenario_config

ROOT = Path(__file__).resolve().parent
CONFIG_13 = ROOT / "configs" / "scenario_13bus.yaml"

ALL_SKILLS = CrewType("utility", 30.0, frozenset(COMPONENT_CLASSES))
TINY_PRIORS = {cls: 1.0 for cls in COMPONENT_CLASSES}


def make_tiny_feeder(capacity_kw: float = 1000.0, crew_counts: Tuple[int, ...] = (1, 2)) -> FeederModel:
    """
    A(root) - B - C chain plus a critical lateral A - D

        D (0,10) 200 kW critical
        |
        A (0,0) --- B (10,0) 100 kW --- C (20,0) 50 kW
    """
    buses = {
        "A": Bus("A", 0.0, x_km=0.0, y_km=0.0),
        "B": Bus("B", 100.0, x_km=10.0, y_km=0.0),
        "C": Bus("C", 50.0, x_km=20.0, y_km=0.0),
        "D": Bus("D", 200.0, critical=True, x_km=0.0, y_km=10.0),
    }
    branches = {
        "L_AB": Branch("L_AB", "A", "B", capacity_kw, component_class="conductor"),
        "L_BC": Branch("L_BC", "B", "C", capacity_kw, component_class="pole"),
        "L_AD": Branch("L_AD", "A", "D", capacity_kw, component_class="lateral"),
    }
    depots = {"D1": Depot("D1", 0.0, 0.0, road_node="n0")}
    return FeederModel("tiny", "A", buses, branches, {}, depots, crew_counts)


def make_tiny_roads() -> RoadGraph:
    """Street along the feeder with a node at every branch midpoint"""
    nodes = {
        "n0": (0.0, 0.0), "m_ab": (5.0, 0.0), "n1": (10.0, 0.0), "m_bc": (15.0, 0.0), "n2": (20.0, 0.0),
        "m_ad": (0.0, 5.0), "n3": (0.0, 10.0),
    }
    pairs = [("n0", "m_ab"), ("m_ab", "n1"), ("n1", "m_bc"), ("m_bc", "n2"), ("n0", "m_ad"), ("m_ad", "n3")]
    segments = {f"s_{u}_{v}": RoadSegment(f"s_{u}_{v}", u, v, 5.0) for u, v in pairs}
    return RoadGraph(nodes=nodes, segments=segments, description="tiny street")


def make_scenario(initial: Sequence[str] = (), arrivals: Sequence[Tuple[float, str]] = (),
                  repair_times: Optional[Dict[str, float]] = None, horizon_h: float = 10.0,
                  rho: float = 1.0, seed: int = 0, feeder_name: str = "tiny",
                  closures: Sequence[str] = ()) -> HazardScenario:
    """Hand-built scenario with constant congestion"""
    damaged = set(initial) | {site for _, site in arrivals}
    times = {site: 1.0 for site in damaged}
    times.update(repair_times or {})
    return HazardScenario(
        seed=seed,
        feeder_name=feeder_name,
        horizon_h=horizon_h,
        initial_damage=tuple(sorted(initial)),
        arrivals=tuple(arrivals),
        repair_times=times,
        road_closures=tuple(closures),
        congestion=CongestionProfile(block_h=horizon_h, values=(rho,), rho_lo=rho, rho_hi=rho),
    )


def tiny_env_config(n_crews: int = 1, **overrides) -> EnvConfig:
    values = dict(
        n_crews=n_crews,
        break_h=0.0,
        relief_shifts=False,
        crew_types=(ALL_SKILLS,),
        prior_medians=TINY_PRIORS,
    )
    values.update(overrides)
    return EnvConfig(**values)


@pytest.fixture
def tiny_feeder() -> FeederModel:
    return make_tiny_feeder()


@pytest.fixture
def tiny_roads() -> RoadGraph:
    return make_tiny_roads()


@pytest.fixture
def tiny_env(tiny_feeder, tiny_roads):
    def build(n_crews: int = 1, **overrides) -> RestorationEnv:
        return RestorationEnv(tiny_feeder, tiny_roads, tiny_env_config(n_crews, **overrides))
    return build


@pytest.fixture(scope="session")
def scenario_config13():
    return load_scenario_config(CONFIG_13)


@pytest.fixture(scope="session")
def feeder13(scenario_config13) -> FeederModel:
    return load_feeder(scenario_config13.feeder_path())


@pytest.fixture(scope="session")
def roads13(scenario_config13, feeder13) -> RoadGraph:
    return load_roads(scenario_config13.roads_path(), feeder13)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


# -- seeded random instances ---------------------------------------------------------

TINY_SITES = ("site_L_AB", "site_L_AD", "site_L_BC")


def random_dispatch_state(seed: int) -> Tuple[DispatchState, FeederModel, RoadGraph]:
    """Crews, confirmed targets, road closures and line ratings drawn at random on the tiny feeder"""
    rng = np.random.default_rng(seed)
    feeder = make_tiny_feeder(capacity_kw=float(rng.choice([120.0, 180.0, 1000.0])))
    roads = make_tiny_roads()
    roads = roads.with_closures([s for s in sorted(roads.segments) if rng.random() < 0.15])
    nodes = sorted(roads.nodes)
    site_nodes = site_road_nodes(feeder, roads)

    crews = []
    for k in range(int(rng.integers(1, 4))):
        available = bool(rng.random() < 0.8)
        crews.append(CrewView(
            id=f"C{k + 1:02d}", crew_type="utility", depot="D1", depot_node="n0",
            position=str(rng.choice(nodes)), speed_kmh=float(rng.uniform(20.0, 50.0)),
            skills=frozenset(c for c in COMPONENT_CLASSES if rng.random() < 0.6),
            status=CrewStatus.IDLE if available else CrewStatus.REPAIRING, available=available,
            remaining_shift_h=float(rng.uniform(0.0, 4.0)), target=None,
        ))

    targets = []
    for site in TINY_SITES:
        if rng.random() < 0.3:
            continue
        branch = feeder.branch_by_site[site]
        owner = crews[int(rng.integers(len(crews)))].id if rng.random() < 0.25 else None
        targets.append(TargetView(
            site_id=site, branch_id=branch.id, component_class=branch.component_class, road_node=site_nodes[site],
            est_repair_h=float(rng.uniform(0.25, 2.0)), assigned_to=owner, in_repair=False,
            restorable_kw=0.0, critical_kw=0.0, value=0.0, travel_h=(0.0,) * len(crews), min_travel_h=0.0,
        ))

    state = DispatchState(
        clock=0.0, horizon_h=10.0, time_of_day=0.0, rho=float(rng.uniform(1.0, 3.0)), targets=tuple(targets),
        crews=tuple(crews), known_damaged=frozenset(t.branch_id for t in targets), unserved_kw=0.0,
        critical_unserved_kw=0.0, total_load_kw=feeder.total_load_kw, critical_unserved=(False,),
    )
    return state, feeder, roads


def random_heuristic_instance(seed: int, n_crews: int = 3, n_targets: int = 4) -> Tuple[DispatchState, FeasibilityMask]:
    """Abstract dispatch state with random values, travel times and a random mask"""
    rng = np.random.default_rng(seed)
    crew_ids = tuple(f"C{k + 1:02d}" for k in range(n_crews))
    crews = tuple(
        CrewView(id=c, crew_type="utility", depot="D1", depot_node="n0", position="n0", speed_kmh=30.0,
                 skills=frozenset(COMPONENT_CLASSES), status=CrewStatus.IDLE, available=True,
                 remaining_shift_h=12.0, target=None)
        for c in crew_ids
    )
    targets = []
    for j in range(n_targets):
        travel = tuple(float(t) for t in rng.uniform(0.0, 3.0, n_crews))
        value = float(rng.uniform(1.0, 100.0))
        targets.append(TargetView(
            site_id=f"T{j}", branch_id=f"T{j}", component_class="pole", road_node="n0", est_repair_h=1.0,
            assigned_to=None, in_repair=False, restorable_kw=value, critical_kw=0.0, value=value,
            travel_h=travel, min_travel_h=min(travel),
        ))
    allowed = np.ones((n_crews, n_targets + 2), dtype=bool)
    allowed[:, :n_targets] = rng.random((n_crews, n_targets)) < 0.75
    reasons = {(crew_ids[k], f"T{j}"): "skill" for k in range(n_crews) for j in range(n_targets) if not allowed[k, j]}
    state = DispatchState(
        clock=0.0, horizon_h=10.0, time_of_day=0.0, rho=1.0, targets=tuple(targets), crews=crews,
        known_damaged=frozenset(t.branch_id for t in targets), unserved_kw=0.0, critical_unserved_kw=0.0,
        total_load_kw=0.0, critical_unserved=(),
    )
    return state, FeasibilityMask(crew_ids, tuple(t.site_id for t in targets), allowed, reasons)


def random_tiny_scenario(seed: int, arrivals: bool = True, horizon_h: float = 8.0) -> HazardScenario:
    """Random damage, late tickets, repair times, congestion and closures on the tiny feeder"""
    rng = np.random.default_rng(seed)
    damaged = [s for s in TINY_SITES if rng.random() < 0.7] or [TINY_SITES[int(rng.integers(3))]]
    initial, late = [], []
    for site in damaged:
        if arrivals and rng.random() < 0.3:
            late.append((float(rng.uniform(0.0, horizon_h / 2.0)), site))
        else:
            initial.append(site)
    closures = [s for s in sorted(make_tiny_roads().segments) if rng.random() < 0.1]
    return make_scenario(
        initial=initial, arrivals=sorted(late), horizon_h=horizon_h, rho=float(rng.uniform(1.0, 2.5)), seed=seed,
        repair_times={site: float(rng.uniform(0.25, 3.0)) for site in damaged}, closures=closures,
    )


class RandomMaskedDispatcher:
    """Uniform choice among each available crew's feasible entries, one crew per target"""
    name = "random_masked"

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def reset(self) -> None:
        self.rng = np.random.default_rng(self.seed)

    def decide(self, state: DispatchState, mask: FeasibilityMask, env: RestorationEnv) -> JointAction:
        claimed, assignments = set(), {}
        for crew in state.available_crews:
            options = [c for c in mask.feasible_choices(crew.id) if c not in claimed]
            choice = options[int(self.rng.integers(len(options)))]
            if choice not in (HOLD, RETURN):
                claimed.add(choice)
            assignments[crew.id] = choice
        return JointAction(assignments)
