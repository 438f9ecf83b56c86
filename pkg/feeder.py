"""
Radial feeder and road network model

Holds the immutable grid (buses, branches, switches, depots) and road graph,
the energization / unserved-power / capacity screening queries, travel times,
and the per-crew feasibility mask used before every dispatch decision.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property, lru_cache
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple

import networkx as nx
import numpy as np
import yaml

from errors import ParameterDomainError, TopologyError

if TYPE_CHECKING:
    from env import DispatchState

logger = logging.getLogger(__name__)

FEEDER_FORMAT_VERSION = 1
ROAD_FORMAT_VERSION = 1

COMPONENT_CLASSES = ("pole", "conductor", "lateral", "riser", "transformer", "substation")

HOLD = "hold"
RETURN = "return"

# Reason codes carried by blocked mask entries
REASON_UNAVAILABLE = "unavailable"
REASON_ASSIGNED = "assigned"
REASON_SKILL = "skill"
REASON_UNREACHABLE = "unreachable"
REASON_SHIFT = "shift"
REASON_CAPACITY = "capacity"
REASON_RADIALITY = "radiality"


# ---------------------------------------------------------------------------
# Grid model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Bus:
    id: str
    load_kw: float
    critical: bool = False
    x_km: float = 0.0
    y_km: float = 0.0


@dataclass(frozen=True)
class Branch:
    id: str
    from_bus: str
    to_bus: str
    capacity_kw: float
    repairable: bool = True
    component_class: str = "conductor"
    site_id: Optional[str] = None

    @property
    def asset_site_id(self) -> str:
        return self.site_id or f"site_{self.id}"


@dataclass(frozen=True)
class Switch:
    id: str
    branch_id: str
    normally_open: bool = False


@dataclass(frozen=True)
class Depot:
    id: str
    x_km: float
    y_km: float
    road_node: Optional[str] = None


@dataclass(frozen=True, eq=False)
class FeederModel:
    """Radial distribution network; immutable after load"""
    name: str
    root: str
    buses: Mapping[str, Bus]
    branches: Mapping[str, Branch]
    switches: Mapping[str, Switch]
    depots: Mapping[str, Depot]
    supported_crew_counts: Tuple[int, ...] = ()

    @cached_property
    def total_load_kw(self) -> float:
        return float(sum(bus.load_kw for bus in self.buses.values()))

    @cached_property
    def critical_buses(self) -> Tuple[str, ...]:
        return tuple(sorted(b.id for b in self.buses.values() if b.critical))

    @cached_property
    def switch_by_branch(self) -> Dict[str, Switch]:
        return {sw.branch_id: sw for sw in self.switches.values()}

    @cached_property
    def branch_by_site(self) -> Dict[str, Branch]:
        return {br.asset_site_id: br for br in self.branches.values() if br.repairable}

    @cached_property
    def bounding_box(self) -> Tuple[float, float, float, float]:
        xs = [b.x_km for b in self.buses.values()] + [d.x_km for d in self.depots.values()]
        ys = [b.y_km for b in self.buses.values()] + [d.y_km for d in self.depots.values()]
        return min(xs), min(ys), max(xs), max(ys)

    def branch_midpoint(self, branch_id: str) -> Tuple[float, float]:
        branch = self.branches[branch_id]
        a, b = self.buses[branch.from_bus], self.buses[branch.to_bus]
        return (a.x_km + b.x_km) / 2.0, (a.y_km + b.y_km) / 2.0

    def default_switch_states(self) -> Dict[str, bool]:
        """Normal configuration: True means closed"""
        return {sw.id: not sw.normally_open for sw in self.switches.values()}

    def closed_graph(self, damaged: Iterable[str] = (), switch_states: Optional[Mapping[str, bool]] = None) -> nx.Graph:
        """Graph of buses joined by closed, undamaged branches"""
        states = self.default_switch_states() if switch_states is None else switch_states
        damaged = set(damaged)
        graph = nx.Graph()
        graph.add_nodes_from(self.buses)
        for branch in self.branches.values():
            if branch.id in damaged:
                continue
            switch = self.switch_by_branch.get(branch.id)
            if switch is not None and not states.get(switch.id, not switch.normally_open):
                continue
            graph.add_edge(branch.from_bus, branch.to_bus, branch=branch.id)
        return graph


# ---------------------------------------------------------------------------
# YAML loading with line diagnostics
# ---------------------------------------------------------------------------

class _LineLoader(yaml.SafeLoader):
    """SafeLoader that records the source line of every mapping"""

    def construct_mapping(self, node, deep=False):
        mapping = super().construct_mapping(node, deep=deep)
        mapping['__line__'] = node.start_mark.line + 1
        return mapping


def _read_yaml(path: Path, kind: str) -> Dict[str, Any]:
    try:
        with open(path, 'r') as f:
            document = yaml.load(f, Loader=_LineLoader)
    except yaml.YAMLError as e:
        mark = getattr(e, 'problem_mark', None)
        line = mark.line + 1 if mark is not None else None
        raise TopologyError(f"cannot parse {kind} file: {getattr(e, 'problem', e)}", str(path), line) from e
    if not isinstance(document, dict):
        raise TopologyError(f"{kind} file must contain a mapping", str(path), 1)
    return document


def _require(item: Dict[str, Any], key: str, path: Path) -> Any:
    if key not in item:
        raise TopologyError(f"missing required field '{key}'", str(path), item.get('__line__'))
    return item[key]


def _check_version(document: Dict[str, Any], expected: int, path: Path) -> None:
    version = document.get('format_version')
    if version != expected:
        raise TopologyError(f"unsupported format_version {version!r} (expected {expected})", str(path), 1)


def load_feeder(path) -> FeederModel:
    """Load and validate a feeder topology file"""
    path = Path(path)
    document = _read_yaml(path, "feeder")
    _check_version(document, FEEDER_FORMAT_VERSION, path)

    buses: Dict[str, Bus] = {}
    for item in document.get('buses', []):
        bus_id = str(_require(item, 'id', path))
        if bus_id in buses:
            raise TopologyError(f"duplicate bus id '{bus_id}'", str(path), item['__line__'])
        load_kw = float(item.get('load_kw', 0.0))
        if load_kw < 0:
            raise TopologyError(f"bus '{bus_id}' has negative load", str(path), item['__line__'])
        buses[bus_id] = Bus(
            id=bus_id,
            load_kw=load_kw,
            critical=bool(item.get('critical', False)),
            x_km=float(item.get('x_km', 0.0)),
            y_km=float(item.get('y_km', 0.0)),
        )

    root = str(_require(document, 'root', path))
    if root not in buses:
        raise TopologyError(f"root bus '{root}' is not defined", str(path), document['__line__'])

    branches: Dict[str, Branch] = {}
    site_ids = set()
    for item in document.get('branches', []):
        branch_id = str(_require(item, 'id', path))
        line = item['__line__']
        if branch_id in branches:
            raise TopologyError(f"duplicate branch id '{branch_id}'", str(path), line)
        from_bus, to_bus = str(_require(item, 'from', path)), str(_require(item, 'to', path))
        for bus_id in (from_bus, to_bus):
            if bus_id not in buses:
                raise TopologyError(f"branch '{branch_id}' references unknown bus '{bus_id}'", str(path), line)
        capacity = float(_require(item, 'capacity_kw', path))
        if capacity <= 0:
            raise TopologyError(f"branch '{branch_id}' capacity must be positive", str(path), line)
        component_class = str(item.get('class', 'conductor'))
        if component_class not in COMPONENT_CLASSES:
            raise TopologyError(f"branch '{branch_id}' has unknown class '{component_class}'", str(path), line)
        branch = Branch(
            id=branch_id,
            from_bus=from_bus,
            to_bus=to_bus,
            capacity_kw=capacity,
            repairable=bool(item.get('repairable', True)),
            component_class=component_class,
            site_id=str(item['site']) if 'site' in item else None,
        )
        if branch.repairable:
            if branch.asset_site_id in site_ids:
                raise TopologyError(f"duplicate asset site '{branch.asset_site_id}'", str(path), line)
            site_ids.add(branch.asset_site_id)
        branches[branch_id] = branch

    switches: Dict[str, Switch] = {}
    switched_branches = set()
    for item in document.get('switches', []):
        switch_id = str(_require(item, 'id', path))
        line = item['__line__']
        branch_id = str(_require(item, 'branch', path))
        if branch_id not in branches:
            raise TopologyError(f"switch '{switch_id}' references unknown branch '{branch_id}'", str(path), line)
        if switch_id in switches or branch_id in switched_branches:
            raise TopologyError(f"duplicate switch '{switch_id}' or second switch on '{branch_id}'", str(path), line)
        switched_branches.add(branch_id)
        switches[switch_id] = Switch(switch_id, branch_id, bool(item.get('normally_open', False)))

    depots: Dict[str, Depot] = {}
    for item in document.get('depots', []):
        depot_id = str(_require(item, 'id', path))
        if depot_id in depots:
            raise TopologyError(f"duplicate depot id '{depot_id}'", str(path), item['__line__'])
        depots[depot_id] = Depot(
            id=depot_id,
            x_km=float(_require(item, 'x_km', path)),
            y_km=float(_require(item, 'y_km', path)),
            road_node=str(item['road_node']) if 'road_node' in item else None,
        )
    if not depots:
        raise TopologyError("feeder defines no depots", str(path), document['__line__'])

    feeder = FeederModel(
        name=str(document.get('name', path.stem)),
        root=root,
        buses=buses,
        branches=branches,
        switches=switches,
        depots=depots,
        supported_crew_counts=tuple(int(k) for k in document.get('supported_crew_counts', [])),
    )
    _validate_radiality(feeder, path)
    logger.debug(f"Loaded feeder {feeder.name}: {len(buses)} buses, {len(branches)} branches, {len(depots)} depots")
    return feeder


def _validate_radiality(feeder: FeederModel, path: Path) -> None:
    graph = feeder.closed_graph()
    closed_count = sum(
        1 for br in feeder.branches.values()
        if br.id not in feeder.switch_by_branch or not feeder.switch_by_branch[br.id].normally_open
    )
    if closed_count != graph.number_of_edges():
        raise TopologyError("parallel closed branches between the same buses", str(path))
    if not nx.is_connected(graph):
        unreachable = sorted(set(feeder.buses) - nx.node_connected_component(graph, feeder.root))
        raise TopologyError(f"buses unreachable from root in normal state: {unreachable}", str(path))
    if not nx.is_tree(graph):
        cycle = nx.find_cycle(graph)
        raise TopologyError(f"closed-switch graph is not radial; loop through {[e[0] for e in cycle]}", str(path))


# ---------------------------------------------------------------------------
# Energization and screening
# ---------------------------------------------------------------------------

def energized_set(feeder: FeederModel, damaged: Iterable[str] = (), switch_states: Optional[Mapping[str, bool]] = None) -> FrozenSet[str]:
    """Buses connected to the root through closed, undamaged branches"""
    graph = feeder.closed_graph(damaged, switch_states)
    return frozenset(nx.node_connected_component(graph, feeder.root))


def unserved_power(feeder: FeederModel, energized: Iterable[str]) -> Tuple[float, float]:
    """Return (unserved kW, critical unserved kW)"""
    energized = set(energized)
    total = 0.0
    critical = 0.0
    for bus in feeder.buses.values():
        if bus.id in energized:
            continue
        total += bus.load_kw
        if bus.critical:
            critical += bus.load_kw
    return total, critical


def downstream_loads(feeder: FeederModel, energized: Iterable[str], switch_states: Optional[Mapping[str, bool]] = None,
                     damaged: Iterable[str] = ()) -> Dict[str, float]:
    """Energized load carried by each closed branch, walking the tree away from the root"""
    graph = feeder.closed_graph(damaged, switch_states)
    sub = graph.subgraph(set(energized) | {feeder.root})
    carried = {node: feeder.buses[node].load_kw for node in sub.nodes}
    flows: Dict[str, float] = {}
    for parent, child in reversed(list(nx.bfs_edges(sub, feeder.root, sort_neighbors=sorted))):
        carried[parent] += carried[child]
        flows[graph.edges[parent, child]['branch']] = carried[child]
    return flows


def capacity_screen(feeder: FeederModel, energized: Iterable[str], switch_states: Optional[Mapping[str, bool]] = None,
                    damaged: Iterable[str] = ()) -> Tuple[str, ...]:
    """Closed branches whose downstream energized load exceeds capacity; empty means ok"""
    flows = downstream_loads(feeder, energized, switch_states, damaged)
    return tuple(sorted(bid for bid, kw in flows.items() if kw > feeder.branches[bid].capacity_kw))


def is_radial(feeder: FeederModel, damaged: Iterable[str] = (), switch_states: Optional[Mapping[str, bool]] = None) -> bool:
    """True when the energized closed subgraph is a tree"""
    graph = feeder.closed_graph(damaged, switch_states)
    component = nx.node_connected_component(graph, feeder.root)
    return nx.is_tree(graph.subgraph(component))


def restore_switching(feeder: FeederModel, damaged: Iterable[str] = ()) -> Dict[str, bool]:
    """
    Safe re-energization after a repair

    Starts from the normal configuration and closes normally-open ties, in
    ascending id, when a tie picks up a de-energized island without creating
    a loop or failing the capacity screen.
    """
    damaged = frozenset(damaged)
    states = feeder.default_switch_states()
    energized = energized_set(feeder, damaged, states)
    for switch in sorted(feeder.switches.values(), key=lambda s: s.id):
        if not switch.normally_open or switch.branch_id in damaged:
            continue
        branch = feeder.branches[switch.branch_id]
        if (branch.from_bus in energized) == (branch.to_bus in energized):
            continue
        trial = dict(states)
        trial[switch.id] = True
        trial_energized = energized_set(feeder, damaged, trial)
        if not is_radial(feeder, damaged, trial):
            continue
        if capacity_screen(feeder, trial_energized, trial, damaged):
            continue
        states, energized = trial, trial_energized
    return states


@dataclass(frozen=True)
class GridOutcome:
    """Grid state after the automatic switching step for a given damage set"""
    switch_states: Tuple[Tuple[str, bool], ...]
    energized: FrozenSet[str]
    unserved_kw: float
    critical_unserved_kw: float
    violations: Tuple[str, ...]
    radial: bool


@lru_cache(maxsize=8192)
def grid_outcome(feeder: FeederModel, damaged: FrozenSet[str]) -> GridOutcome:
    """Switch, energize and screen for a damage set (memoized; the feeder is immutable)"""
    states = restore_switching(feeder, damaged)
    energized = energized_set(feeder, damaged, states)
    unserved, critical = unserved_power(feeder, energized)
    return GridOutcome(
        switch_states=tuple(sorted(states.items())),
        energized=energized,
        unserved_kw=unserved,
        critical_unserved_kw=critical,
        violations=capacity_screen(feeder, energized, states, damaged),
        radial=is_radial(feeder, damaged, states),
    )


# ---------------------------------------------------------------------------
# Roads
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RoadSegment:
    id: str
    u: str
    v: str
    length_km: float


@dataclass(frozen=True, eq=False)
class RoadGraph:
    """Road network; `closed` holds segments impaired by the storm"""
    nodes: Mapping[str, Tuple[float, float]]
    segments: Mapping[str, RoadSegment]
    closed: FrozenSet[str] = frozenset()
    description: str = ""
    _distance_cache: Dict[str, Dict[str, float]] = field(default_factory=dict, repr=False, compare=False)

    def with_closures(self, closed: Iterable[str]) -> "RoadGraph":
        closed = frozenset(closed)
        unknown = closed - set(self.segments)
        if unknown:
            raise ParameterDomainError(f"unknown road segments: {sorted(unknown)}")
        return replace(self, closed=closed, _distance_cache={})

    @cached_property
    def open_graph(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(self.nodes)
        for segment in self.segments.values():
            if segment.id in self.closed:
                continue
            if graph.has_edge(segment.u, segment.v) and graph.edges[segment.u, segment.v]['length'] <= segment.length_km:
                continue
            graph.add_edge(segment.u, segment.v, length=segment.length_km)
        return graph

    def distances_from(self, node: str) -> Dict[str, float]:
        """Single-source open-road distances (km), cached per node"""
        if node not in self.nodes:
            raise ParameterDomainError(f"unknown road node '{node}'")
        if node not in self._distance_cache:
            self._distance_cache[node] = nx.single_source_dijkstra_path_length(self.open_graph, node, weight='length')
        return self._distance_cache[node]

    def path(self, source: str, target: str) -> List[str]:
        return nx.dijkstra_path(self.open_graph, source, target, weight='length')

    def nearest_node(self, x_km: float, y_km: float) -> str:
        return min(self.nodes, key=lambda n: (math.hypot(self.nodes[n][0] - x_km, self.nodes[n][1] - y_km), n))

    def segment_midpoint(self, segment_id: str) -> Tuple[float, float]:
        segment = self.segments[segment_id]
        (x1, y1), (x2, y2) = self.nodes[segment.u], self.nodes[segment.v]
        return (x1 + x2) / 2.0, (y1 + y2) / 2.0


def shortest_open_path(roads: RoadGraph, source: str, target: str) -> float:
    """Shortest distance over open segments (km); math.inf when unreachable"""
    if target not in roads.nodes:
        raise ParameterDomainError(f"unknown road node '{target}'")
    return roads.distances_from(source).get(target, math.inf)


def travel_time(distance_km: float, speed_kmh: float, rho: float) -> float:
    """Congestion-inflated travel time (h)"""
    if speed_kmh <= 0:
        raise ParameterDomainError(f"crew speed must be positive, got {speed_kmh}")
    if math.isinf(distance_km):
        return math.inf
    return rho * distance_km / speed_kmh


def grid_overlay(feeder: FeederModel, spacing_km: float, margin_km: float = 1.0) -> RoadGraph:
    """Synthetic rectangular street grid covering the feeder's bounding box"""
    if spacing_km <= 0:
        raise ParameterDomainError("grid spacing must be positive")
    xmin, ymin, xmax, ymax = feeder.bounding_box
    x0, y0 = xmin - margin_km, ymin - margin_km
    nx_cols = int(math.ceil((xmax - xmin + 2 * margin_km) / spacing_km)) + 1
    ny_rows = int(math.ceil((ymax - ymin + 2 * margin_km) / spacing_km)) + 1

    nodes: Dict[str, Tuple[float, float]] = {}
    segments: Dict[str, RoadSegment] = {}
    for i in range(nx_cols):
        for j in range(ny_rows):
            nodes[f"g{i:03d}_{j:03d}"] = (round(x0 + i * spacing_km, 6), round(y0 + j * spacing_km, 6))
    for i in range(nx_cols):
        for j in range(ny_rows):
            here = f"g{i:03d}_{j:03d}"
            if i + 1 < nx_cols:
                east = f"g{i + 1:03d}_{j:03d}"
                segments[f"h_{here}"] = RoadSegment(f"h_{here}", here, east, spacing_km)
            if j + 1 < ny_rows:
                north = f"g{i:03d}_{j + 1:03d}"
                segments[f"v_{here}"] = RoadSegment(f"v_{here}", here, north, spacing_km)
    return RoadGraph(nodes=nodes, segments=segments,
                     description=f"grid overlay {nx_cols}x{ny_rows}, spacing {spacing_km} km")


def load_roads(path, feeder: Optional[FeederModel] = None) -> RoadGraph:
    """Load a road file: explicit nodes/segments, or a grid overlay over `feeder`"""
    path = Path(path)
    document = _read_yaml(path, "road")
    _check_version(document, ROAD_FORMAT_VERSION, path)

    if 'grid' in document:
        if feeder is None:
            raise TopologyError("grid road files need the feeder they overlay", str(path), document['grid']['__line__'])
        grid = document['grid']
        return grid_overlay(feeder, float(_require(grid, 'spacing_km', path)), float(grid.get('margin_km', 1.0)))

    nodes: Dict[str, Tuple[float, float]] = {}
    for item in document.get('nodes', []):
        node_id = str(_require(item, 'id', path))
        if node_id in nodes:
            raise TopologyError(f"duplicate road node '{node_id}'", str(path), item['__line__'])
        nodes[node_id] = (float(_require(item, 'x_km', path)), float(_require(item, 'y_km', path)))

    segments: Dict[str, RoadSegment] = {}
    for item in document.get('segments', []):
        seg_id = str(_require(item, 'id', path))
        line = item['__line__']
        u, v = str(_require(item, 'u', path)), str(_require(item, 'v', path))
        if u not in nodes or v not in nodes:
            raise TopologyError(f"segment '{seg_id}' references an unknown node", str(path), line)
        if 'length_km' in item:
            length = float(item['length_km'])
        else:
            length = math.hypot(nodes[u][0] - nodes[v][0], nodes[u][1] - nodes[v][1])
        if length <= 0:
            raise TopologyError(f"segment '{seg_id}' must have positive length", str(path), line)
        if seg_id in segments:
            raise TopologyError(f"duplicate segment '{seg_id}'", str(path), line)
        segments[seg_id] = RoadSegment(seg_id, u, v, length)
    return RoadGraph(nodes=nodes, segments=segments, description=str(document.get('description', '')))


def site_road_nodes(feeder: FeederModel, roads: RoadGraph) -> Dict[str, str]:
    """Road node serving each asset site (nearest node to the branch midpoint)"""
    return {
        site_id: roads.nearest_node(*feeder.branch_midpoint(branch.id))
        for site_id, branch in sorted(feeder.branch_by_site.items())
    }


def depot_road_nodes(feeder: FeederModel, roads: RoadGraph) -> Dict[str, str]:
    nodes = {}
    for depot in sorted(feeder.depots.values(), key=lambda d: d.id):
        if depot.road_node is not None:
            if depot.road_node not in roads.nodes:
                raise TopologyError(f"depot '{depot.id}' references unknown road node '{depot.road_node}'")
            nodes[depot.id] = depot.road_node
        else:
            nodes[depot.id] = roads.nearest_node(depot.x_km, depot.y_km)
    return nodes


# ---------------------------------------------------------------------------
# Crews and the feasibility mask
# ---------------------------------------------------------------------------

class CrewStatus(str, Enum):
    IDLE = "idle"
    TRAVELING = "traveling"
    REPAIRING = "repairing"
    ON_BREAK = "on_break"
    OFF_DUTY = "off_duty"


@dataclass
class Crew:
    """Field crew; mutable, owned by one environment episode"""
    id: str
    depot: str
    depot_node: str
    crew_type: str
    speed_kmh: float
    skills: FrozenSet[str]
    shift_start: float
    shift_end: float
    break_at: Optional[float] = None
    break_h: float = 0.0
    status: CrewStatus = CrewStatus.IDLE
    position: str = ""
    target: Optional[str] = None
    trip: int = 0
    trip_path: Tuple[str, ...] = ()
    trip_cum_km: Tuple[float, ...] = ()
    depart_time: float = 0.0
    arrive_time: float = 0.0
    break_taken: bool = False
    break_pending: bool = False
    retire_pending: bool = False

    @property
    def on_duty(self) -> bool:
        return self.status not in (CrewStatus.OFF_DUTY, CrewStatus.ON_BREAK)

    @property
    def available(self) -> bool:
        return self.status in (CrewStatus.IDLE, CrewStatus.TRAVELING) and not self.retire_pending

    def remaining_shift(self, clock: float) -> float:
        """Working hours left, net of an untaken break"""
        if self.status == CrewStatus.OFF_DUTY:
            return 0.0
        remaining = self.shift_end - clock
        if self.break_at is not None and not self.break_taken and self.break_h > 0:
            remaining -= self.break_h
        return max(0.0, remaining)


@dataclass(frozen=True)
class FeasibilityMask:
    """
    Per-crew feasibility over [targets..., hold, return]

    `allowed[k, j]` is True when crew k may take choice j; every blocked entry
    has a reason code in `reasons`.
    """
    crew_ids: Tuple[str, ...]
    targets: Tuple[str, ...]
    allowed: np.ndarray
    reasons: Mapping[Tuple[str, str], str]

    @property
    def choices(self) -> Tuple[str, ...]:
        return self.targets + (HOLD, RETURN)

    def column(self, choice: str) -> int:
        return self.choices.index(choice)

    def row(self, crew_id: str) -> int:
        return self.crew_ids.index(crew_id)

    def is_allowed(self, crew_id: str, choice: str) -> bool:
        if choice not in self.choices or crew_id not in self.crew_ids:
            return False
        return bool(self.allowed[self.row(crew_id), self.column(choice)])

    def feasible_choices(self, crew_id: str) -> List[str]:
        row = self.allowed[self.row(crew_id)]
        return [c for c, ok in zip(self.choices, row) if ok]

    def reason(self, crew_id: str, choice: str) -> Optional[str]:
        return self.reasons.get((crew_id, choice))


def post_repair_check(feeder: FeederModel, known_damaged: FrozenSet[str], branch_id: str) -> Optional[str]:
    """Reason code if re-energizing after repairing `branch_id` fails the screen"""
    outcome = grid_outcome(feeder, frozenset(known_damaged - {branch_id}))
    if not outcome.radial:
        return REASON_RADIALITY
    if outcome.violations:
        return REASON_CAPACITY
    return None


def build_mask(state: "DispatchState", feeder: FeederModel, roads: RoadGraph) -> FeasibilityMask:
    """Evaluate the crew/target feasibility rules for the current state"""
    targets = tuple(t.site_id for t in state.targets)
    n_choices = len(targets) + 2
    hold_col, return_col = len(targets), len(targets) + 1
    allowed = np.zeros((len(state.crews), n_choices), dtype=bool)
    reasons: Dict[Tuple[str, str], str] = {}

    grid_reason = {t.site_id: post_repair_check(feeder, state.known_damaged, t.branch_id) for t in state.targets}

    for k, crew in enumerate(state.crews):
        allowed[k, hold_col] = True
        if not crew.available:
            for choice in targets + (RETURN,):
                reasons[(crew.id, choice)] = REASON_UNAVAILABLE
            continue

        distances = roads.distances_from(crew.position)
        for j, target in enumerate(state.targets):
            reason = None
            if target.assigned_to is not None and target.assigned_to != crew.id:
                reason = REASON_ASSIGNED
            elif target.component_class not in crew.skills:
                reason = REASON_SKILL
            else:
                distance = distances.get(target.road_node, math.inf)
                if math.isinf(distance):
                    reason = REASON_UNREACHABLE
                elif crew.remaining_shift_h < travel_time(distance, crew.speed_kmh, state.rho) + target.est_repair_h:
                    reason = REASON_SHIFT
                else:
                    reason = grid_reason[target.site_id]
            if reason is None:
                allowed[k, j] = True
            else:
                reasons[(crew.id, target.site_id)] = reason

        if math.isinf(distances.get(crew.depot_node, math.inf)):
            reasons[(crew.id, RETURN)] = REASON_UNREACHABLE
        else:
            allowed[k, return_col] = True

    return FeasibilityMask(
        crew_ids=tuple(c.id for c in state.crews),
        targets=targets,
        allowed=allowed,
        reasons=reasons,
    )
