"""
Event-driven restoration environment

Advances a simulation clock from event to event (ticket arrivals, travel and
repair completions, duty changes, periodic replan ticks), integrates energy
not supplied over each gap, and hands control back to a dispatcher whenever a
replan fires and at least one crew can take a new assignment.
"""

import copy
import heapq
import logging
import math
from bisect import bisect_right
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from itertools import accumulate
from time import perf_counter
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Protocol, Sequence, Tuple

import networkx as nx
import numpy as np

from errors import ConfigurationError, ContractViolation
from feeder import (
    COMPONENT_CLASSES,
    HOLD,
    RETURN,
    Crew,
    CrewStatus,
    FeasibilityMask,
    FeederModel,
    RoadGraph,
    build_mask,
    depot_road_nodes,
    grid_outcome,
    site_road_nodes,
    travel_time,
)
from hazard import HazardScenario

logger = logging.getLogger(__name__)

TRAVEL_SENTINEL_H = 100.0
VALUE_EPS_H = 1e-6


class EventKind(str, Enum):
    TICKET = "ticket"
    TRAVEL_END = "travel_end"
    REPAIR_END = "repair_end"
    DUTY_CHANGE = "duty_change"
    REPLAN = "replan"


@dataclass(frozen=True)
class Event:
    time: float
    seq: int
    kind: EventKind
    crew: Optional[str] = None
    site: Optional[str] = None
    detail: Optional[str] = None
    trip: int = 0


@dataclass(frozen=True)
class RewardWeights:
    alpha: float = 1.0        # per MWh not supplied
    beta: float = 0.01        # per km travelled
    gamma_idle: float = 0.05  # per idle crew-hour
    eta: float = 100.0        # per feasibility violation
    kappa: float = 5.0        # per critical load restored

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma_idle", "eta", "kappa"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"reward weight '{name}' must be non-negative")


@dataclass(frozen=True)
class CrewType:
    name: str
    speed_kmh: float
    skills: FrozenSet[str]


DEFAULT_CREW_TYPES = (
    CrewType("line", 40.0, frozenset({"pole", "conductor", "lateral", "riser"})),
    CrewType("heavy", 30.0, frozenset(COMPONENT_CLASSES)),
)


@dataclass(frozen=True)
class EnvConfig:
    n_crews: int = 3
    horizon_h: Optional[float] = None
    replan_period_h: float = 1.0
    shift_h: float = 12.0
    break_h: float = 0.5
    rest_h: float = 12.0
    relief_shifts: bool = True
    crew_types: Tuple[CrewType, ...] = DEFAULT_CREW_TYPES
    repair_estimate: str = "prior_median"
    prior_medians: Mapping[str, float] = field(default_factory=dict)
    audit_mode: bool = False
    weights: RewardWeights = field(default_factory=RewardWeights)
    start_hour: float = 0.0
    record_trace: bool = True

    def validate(self) -> None:
        if self.n_crews < 1:
            raise ConfigurationError("at least one crew is required")
        if self.replan_period_h <= 0 or self.shift_h <= 0 or self.break_h < 0 or self.rest_h < 0:
            raise ConfigurationError("replan period and shift length must be positive, break and rest non-negative")
        if self.break_h >= self.shift_h:
            raise ConfigurationError("break must be shorter than the shift")
        if self.repair_estimate not in ("prior_median", "oracle"):
            raise ConfigurationError(f"unknown repair_estimate '{self.repair_estimate}'")
        if not self.crew_types:
            raise ConfigurationError("at least one crew type is required")
        for crew_type in self.crew_types:
            if crew_type.speed_kmh <= 0:
                raise ConfigurationError(f"crew type '{crew_type.name}' needs a positive speed")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], n_crews: int, prior_medians: Mapping[str, float],
                  weights: Optional[Mapping[str, Any]] = None) -> "EnvConfig":
        """Build from the `env` / `reward` sections of a YAML config"""
        allowed = {"horizon_h", "replan_period_h", "shift_h", "break_h", "rest_h", "relief_shifts",
                   "crew_types", "repair_estimate", "audit_mode", "start_hour", "record_trace"}
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ConfigurationError(f"unknown key(s) in env config: {', '.join(unknown)}")
        values = dict(data)
        if 'crew_types' in values:
            values['crew_types'] = tuple(
                CrewType(str(t['name']), float(t['speed_kmh']), frozenset(t['skills'])) for t in values['crew_types']
            )
        try:
            reward = RewardWeights(**(weights or {}))
        except TypeError as e:
            raise ConfigurationError(f"invalid reward weights: {e}") from e
        config = cls(n_crews=n_crews, prior_medians=dict(prior_medians), weights=reward, **values)
        config.validate()
        return config

    def to_dict(self) -> Dict[str, Any]:
        """Plain sections `from_saved` rebuilds this config from; stored in checkpoints"""
        return {
            'n_crews': self.n_crews,
            'prior_medians': {name: float(h) for name, h in sorted(self.prior_medians.items())},
            'env': {
                'horizon_h': self.horizon_h,
                'replan_period_h': self.replan_period_h,
                'shift_h': self.shift_h,
                'break_h': self.break_h,
                'rest_h': self.rest_h,
                'relief_shifts': self.relief_shifts,
                'crew_types': [
                    {'name': t.name, 'speed_kmh': t.speed_kmh, 'skills': sorted(t.skills)} for t in self.crew_types
                ],
                'repair_estimate': self.repair_estimate,
                'audit_mode': self.audit_mode,
                'start_hour': self.start_hour,
                'record_trace': self.record_trace,
            },
            'reward': asdict(self.weights),
        }

    @classmethod
    def from_saved(cls, data: Mapping[str, Any]) -> "EnvConfig":
        try:
            return cls.from_dict(data['env'], int(data['n_crews']), data['prior_medians'], data['reward'])
        except KeyError as e:
            raise ConfigurationError(f"saved env config is missing {e}") from e


@dataclass(frozen=True)
class TargetView:
    """One confirmed, unrepaired component as the dispatcher sees it"""
    site_id: str
    branch_id: str
    component_class: str
    road_node: str
    est_repair_h: float
    assigned_to: Optional[str]
    in_repair: bool
    restorable_kw: float
    critical_kw: float
    value: float
    travel_h: Tuple[float, ...]
    min_travel_h: float


@dataclass(frozen=True)
class CrewView:
    id: str
    crew_type: str
    depot: str
    depot_node: str
    position: str
    speed_kmh: float
    skills: FrozenSet[str]
    status: CrewStatus
    available: bool
    remaining_shift_h: float
    target: Optional[str]
    x_km: float = 0.0
    y_km: float = 0.0


@dataclass(frozen=True)
class DispatchState:
    clock: float
    horizon_h: float
    time_of_day: float
    rho: float
    targets: Tuple[TargetView, ...]
    crews: Tuple[CrewView, ...]
    known_damaged: FrozenSet[str]
    unserved_kw: float
    critical_unserved_kw: float
    total_load_kw: float
    critical_unserved: Tuple[bool, ...]

    @property
    def available_crews(self) -> Tuple[CrewView, ...]:
        return tuple(c for c in self.crews if c.available)

    def target(self, site_id: str) -> TargetView:
        for t in self.targets:
            if t.site_id == site_id:
                return t
        raise KeyError(site_id)


@dataclass(frozen=True)
class JointAction:
    """Choice per available crew: a target site id, HOLD or RETURN"""
    assignments: Mapping[str, str] = field(default_factory=dict)

    def choice_for(self, crew_id: str) -> str:
        return self.assignments.get(crew_id, HOLD)

    @classmethod
    def hold_all(cls, state: DispatchState) -> "JointAction":
        return cls({c.id: HOLD for c in state.available_crews})


@dataclass(frozen=True)
class IntervalMetrics:
    dt_h: float = 0.0
    ens_mwh: float = 0.0
    travel_km: float = 0.0
    idle_crew_h: float = 0.0
    violations: int = 0
    critical_restored: int = 0


@dataclass(frozen=True)
class EpisodeMetrics:
    seed: Optional[int]
    ens_mwh: float
    critical_restore_min: Mapping[str, float]
    critical_t95_min: float
    travel_km: float
    replans: int
    decision_ms: Tuple[float, ...]
    violations: int
    idle_crew_h: float
    total_reward: float
    end_time_h: float
    fully_restored: bool

    def as_row(self) -> Dict[str, Any]:
        return {
            'seed': self.seed,
            'ens_mwh': self.ens_mwh,
            'critical_t95_min': self.critical_t95_min,
            'travel_km': self.travel_km,
            'replans': self.replans,
            'decision_ms_median': float(np.median(self.decision_ms)) if self.decision_ms else 0.0,
            'violations': self.violations,
            'idle_crew_h': self.idle_crew_h,
            'total_reward': self.total_reward,
            'end_time_h': self.end_time_h,
            'fully_restored': self.fully_restored,
        }


def compute_reward(interval: IntervalMetrics, weights: RewardWeights) -> float:
    """Signed reward for one decision gap"""
    return (
        - weights.alpha * interval.ens_mwh
        - weights.beta * interval.travel_km
        - weights.gamma_idle * interval.idle_crew_h
        - weights.eta * interval.violations
        + weights.kappa * interval.critical_restored
    )


def replan_trigger(state: Optional[DispatchState], event: Event) -> bool:
    """Whether processing `event` should hand control back to the dispatcher"""
    if event.kind in (EventKind.TICKET, EventKind.REPAIR_END, EventKind.DUTY_CHANGE, EventKind.REPLAN):
        return True
    if event.kind == EventKind.TRAVEL_END:
        return event.detail == "stalled"
    return False


def critical_t95(restore_min: Sequence[float]) -> float:
    """95th percentile (linear interpolation) of critical restoration times; 0 when none were out"""
    if len(restore_min) == 0:
        return 0.0
    return float(np.percentile(np.asarray(restore_min, dtype=float), 95, method='linear'))


def replay_ens(trace: Iterable[Mapping[str, Any]]) -> float:
    """Integrate unserved kW over a trajectory log; MWh"""
    total_kwh = 0.0
    previous: Optional[Mapping[str, Any]] = None
    for entry in trace:
        if 'unserved_kw' not in entry:
            continue
        if previous is not None:
            total_kwh += previous['unserved_kw'] * (entry['t'] - previous['t'])
        previous = entry
    return total_kwh / 1000.0


@dataclass
class _Episode:
    """Mutable per-episode state; cloned wholesale for lookahead"""
    clock: float
    horizon_h: float
    queue: List[Tuple[float, int, Event]]
    seq: int
    physical_damaged: set
    confirmed: set
    repaired: set
    assigned: Dict[str, str]
    crews: Dict[str, Crew]
    energized: FrozenSet[str]
    unserved_kw: float
    critical_unserved_kw: float
    critical_out: Dict[str, Optional[float]]
    ens_kwh: float = 0.0
    travel_km: float = 0.0
    idle_crew_h: float = 0.0
    violations: int = 0
    replans: int = 0
    total_reward: float = 0.0
    done: bool = False
    interval: Dict[str, float] = field(default_factory=dict)
    trace: List[Dict[str, Any]] = field(default_factory=list)


class RestorationEnv:
    """Single-threaded environment; one instance per rollout worker"""

    def __init__(self, feeder: FeederModel, roads: RoadGraph, config: Optional[EnvConfig] = None):
        self.feeder = feeder
        self.base_roads = roads
        self.config = config or EnvConfig()
        self.config.validate()
        self.site_nodes = site_road_nodes(feeder, roads)
        self.depot_nodes = depot_road_nodes(feeder, roads)
        self.roads = roads
        self.scenario: Optional[HazardScenario] = None
        self.seed: Optional[int] = None
        self._ep: Optional[_Episode] = None
        self._state: Optional[DispatchState] = None
        self._mask: Optional[FeasibilityMask] = None
        self._estimates: Dict[str, float] = {}

    # -- lifecycle ----------------------------------------------------------

    def reset(self, scenario: HazardScenario, seed: Optional[int] = None) -> DispatchState:
        cfg = self.config
        if scenario.feeder_name != self.feeder.name:
            raise ConfigurationError(f"scenario is for feeder '{scenario.feeder_name}', env has '{self.feeder.name}'")
        unknown = set(scenario.damaged_sites) - set(self.feeder.branch_by_site)
        if unknown:
            raise ConfigurationError(f"scenario damages unknown sites {sorted(unknown)}")

        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.roads = self.base_roads.with_closures(scenario.road_closures)
        self._estimates = self._repair_estimates(scenario)

        horizon = cfg.horizon_h if cfg.horizon_h is not None else scenario.horizon_h
        depots = sorted(self.feeder.depots)
        crews: Dict[str, Crew] = {}
        for k in range(cfg.n_crews):
            crew_type = cfg.crew_types[k % len(cfg.crew_types)]
            depot = depots[k % len(depots)]
            crew = Crew(
                id=f"C{k + 1:02d}",
                depot=depot,
                depot_node=self.depot_nodes[depot],
                crew_type=crew_type.name,
                speed_kmh=crew_type.speed_kmh,
                skills=crew_type.skills,
                shift_start=0.0,
                shift_end=cfg.shift_h,
                break_at=cfg.shift_h / 2.0 if cfg.break_h > 0 else None,
                break_h=cfg.break_h,
                position=self.depot_nodes[depot],
            )
            crews[crew.id] = crew

        physical = {self.feeder.branch_by_site[s].id for s in scenario.damaged_sites}
        outcome = grid_outcome(self.feeder, frozenset(physical))
        self._ep = _Episode(
            clock=0.0,
            horizon_h=horizon,
            queue=[],
            seq=0,
            physical_damaged=physical,
            confirmed=set(scenario.initial_damage),
            repaired=set(),
            assigned={},
            crews=crews,
            energized=outcome.energized,
            unserved_kw=outcome.unserved_kw,
            critical_unserved_kw=outcome.critical_unserved_kw,
            critical_out={b: None for b in self.feeder.critical_buses if b not in outcome.energized},
        )
        self._reset_interval()

        for time_h, site in scenario.arrivals:
            if time_h <= horizon:
                self._push(time_h, EventKind.TICKET, site=site)
        for crew in crews.values():
            self._schedule_shift(crew)
        tick = cfg.replan_period_h
        while tick < horizon:
            self._push(tick, EventKind.REPLAN)
            tick += cfg.replan_period_h

        self._log('reset', unserved_kw=self._ep.unserved_kw, initial_damage=list(scenario.initial_damage))
        self._invalidate()
        logger.debug(f"Reset seed={self.seed}: {len(physical)} damaged branches, {self._ep.unserved_kw:.0f} kW unserved")
        return self.state

    def _repair_estimates(self, scenario: HazardScenario) -> Dict[str, float]:
        estimates = {}
        for site in scenario.damaged_sites:
            if self.config.repair_estimate == "oracle":
                estimates[site] = scenario.repair_times[site]
                continue
            component_class = self.feeder.branch_by_site[site].component_class
            if component_class not in self.config.prior_medians:
                raise ConfigurationError(f"no prior median repair time for class '{component_class}'")
            estimates[site] = float(self.config.prior_medians[component_class])
        return estimates

    def clone(self, drop_future_arrivals: bool = False) -> "RestorationEnv":
        """
        Independent copy for lookahead; the immutable feeder and roads are shared.

        With drop_future_arrivals the copy only knows confirmed damage:
        pending tickets and unconfirmed physical damage are removed.
        """
        twin = copy.copy(self)
        twin._ep = copy.deepcopy(self._ep)
        twin._ep.trace = []
        twin._invalidate()
        if drop_future_arrivals:
            ep = twin._ep
            ep.queue = [item for item in ep.queue if item[2].kind != EventKind.TICKET]
            heapq.heapify(ep.queue)
            known = set(ep.confirmed)
            ep.physical_damaged = {self.feeder.branch_by_site[s].id for s in known}
            twin._regrid(audit=False)
        return twin

    # -- views ----------------------------------------------------------------

    @property
    def done(self) -> bool:
        return self._ep is not None and self._ep.done

    @property
    def clock(self) -> float:
        return self._ep.clock

    @property
    def trace(self) -> List[Dict[str, Any]]:
        return self._ep.trace

    @property
    def unserved_kw(self) -> float:
        return self._ep.unserved_kw

    @property
    def ens_mwh(self) -> float:
        return self._ep.ens_kwh / 1000.0

    @property
    def travel_km(self) -> float:
        return self._ep.travel_km

    @property
    def state(self) -> DispatchState:
        if self._state is None:
            self._state = self._build_state()
        return self._state

    def mask(self) -> FeasibilityMask:
        if self._mask is None:
            self._mask = build_mask(self.state, self.feeder, self.roads)
        return self._mask

    def _invalidate(self) -> None:
        self._state = None
        self._mask = None

    def _rho(self) -> float:
        return self.scenario.congestion.at(self._ep.clock)

    def _build_state(self) -> DispatchState:
        ep = self._ep
        rho = self._rho()
        crews = tuple(ep.crews[c] for c in sorted(ep.crews))
        crew_views = tuple(
            CrewView(
                id=c.id,
                crew_type=c.crew_type,
                depot=c.depot,
                depot_node=c.depot_node,
                position=self._decision_position(c),
                speed_kmh=c.speed_kmh,
                skills=c.skills,
                status=c.status,
                available=c.available,
                remaining_shift_h=c.remaining_shift(ep.clock),
                target=c.target,
                x_km=self.roads.nodes[self._decision_position(c)][0],
                y_km=self.roads.nodes[self._decision_position(c)][1],
            )
            for c in crews
        )

        known_damaged = frozenset(self.feeder.branch_by_site[s].id for s in ep.confirmed)
        known_now = grid_outcome(self.feeder, known_damaged)
        targets = []
        for site in sorted(ep.confirmed):
            branch = self.feeder.branch_by_site[site]
            node = self.site_nodes[site]
            travel = []
            for view in crew_views:
                distance = self.roads.distances_from(view.position).get(node, math.inf)
                hours = travel_time(distance, view.speed_kmh, rho)
                travel.append(hours if math.isfinite(hours) else TRAVEL_SENTINEL_H)
            finite = [t for t in travel if t < TRAVEL_SENTINEL_H]
            after = grid_outcome(self.feeder, known_damaged - {branch.id})
            restorable = max(0.0, known_now.unserved_kw - after.unserved_kw)
            critical = max(0.0, known_now.critical_unserved_kw - after.critical_unserved_kw)
            estimate = self._estimates[site]
            value = restorable / max(estimate + min(finite), VALUE_EPS_H) if finite else 0.0
            assignee = ep.assigned.get(site)
            targets.append(TargetView(
                site_id=site,
                branch_id=branch.id,
                component_class=branch.component_class,
                road_node=node,
                est_repair_h=estimate,
                assigned_to=assignee,
                in_repair=assignee is not None and ep.crews[assignee].status == CrewStatus.REPAIRING,
                restorable_kw=restorable,
                critical_kw=critical,
                value=value,
                travel_h=tuple(travel),
                min_travel_h=min(finite) if finite else TRAVEL_SENTINEL_H,
            ))

        return DispatchState(
            clock=ep.clock,
            horizon_h=ep.horizon_h,
            time_of_day=(self.config.start_hour + ep.clock) % 24.0,
            rho=rho,
            targets=tuple(targets),
            crews=crew_views,
            known_damaged=known_damaged,
            unserved_kw=ep.unserved_kw,
            critical_unserved_kw=ep.critical_unserved_kw,
            total_load_kw=self.feeder.total_load_kw,
            critical_unserved=tuple(b not in ep.energized for b in self.feeder.critical_buses),
        )

    def _decision_position(self, crew: Crew) -> str:
        if crew.status == CrewStatus.TRAVELING:
            return self._snap_point(crew)[0]
        return crew.position

    # -- stepping ---------------------------------------------------------------

    def step(self, action: JointAction) -> Tuple[DispatchState, float, bool, Dict[str, Any]]:
        ep = self._ep
        if ep is None or ep.done:
            raise ContractViolation("step called on a finished or unreset environment")
        ep.replans += 1
        self._commit(action)

        start = ep.clock
        events = 0
        while True:
            if ep.unserved_kw <= 0.0 or ep.clock >= ep.horizon_h:
                ep.done = True
                break
            if ep.queue and ep.queue[0][0] <= ep.horizon_h:
                t_next = ep.queue[0][0]
            else:
                self._advance(ep.horizon_h)
                continue
            self._advance(t_next)
            _, _, event = heapq.heappop(ep.queue)
            processed = self._process(event)
            events += 1
            if processed is not None and replan_trigger(None, processed) and any(c.available for c in ep.crews.values()):
                if ep.unserved_kw > 0.0:
                    break

        interval = IntervalMetrics(
            dt_h=ep.clock - start,
            ens_mwh=ep.interval['ens_kwh'] / 1000.0,
            travel_km=ep.interval['travel_km'],
            idle_crew_h=ep.interval['idle_crew_h'],
            violations=int(ep.interval['violations']),
            critical_restored=int(ep.interval['critical_restored']),
        )
        reward = compute_reward(interval, self.config.weights)
        ep.total_reward += reward
        self._reset_interval()
        self._invalidate()
        self._log('step', unserved_kw=ep.unserved_kw, reward=reward, done=ep.done)
        if ep.done:
            self._log('end', unserved_kw=ep.unserved_kw)
        return self.state, reward, ep.done, {'dt_h': interval.dt_h, 'events': events, 'interval': interval}

    def _reset_interval(self) -> None:
        self._ep.interval = {'ens_kwh': 0.0, 'travel_km': 0.0, 'idle_crew_h': 0.0, 'violations': 0, 'critical_restored': 0}

    def _advance(self, t_next: float) -> None:
        ep = self._ep
        dt = t_next - ep.clock
        if dt > 0:
            ens = ep.unserved_kw * dt
            idle = dt * sum(1 for c in ep.crews.values() if c.status == CrewStatus.IDLE)
            ep.ens_kwh += ens
            ep.idle_crew_h += idle
            ep.interval['ens_kwh'] += ens
            ep.interval['idle_crew_h'] += idle
            ep.clock = t_next

    def _push(self, time_h: float, kind: EventKind, **kwargs) -> None:
        ep = self._ep
        ep.seq += 1
        heapq.heappush(ep.queue, (time_h, ep.seq, Event(time_h, ep.seq, kind, **kwargs)))

    def _log(self, event: str, **fields) -> None:
        if self.config.record_trace:
            self._ep.trace.append({'t': self._ep.clock, 'event': event, **fields})

    def _violation(self, message: str) -> None:
        self._ep.violations += 1
        self._ep.interval['violations'] += 1
        logger.warning(f"⚠️ Feasibility violation at t={self._ep.clock:.3f} h: {message}")

    # -- commit ---------------------------------------------------------------

    def _commit(self, action: JointAction) -> None:
        ep = self._ep
        mask = self.mask()
        state = self.state
        available = {c.id for c in state.available_crews}
        claimed: Dict[str, str] = {}
        plan = []
        for crew_id in sorted(action.assignments):
            choice = action.assignments[crew_id]
            if crew_id not in ep.crews:
                raise ContractViolation(f"unknown crew '{crew_id}'")
            if crew_id not in available:
                if choice == HOLD:
                    continue
                self._reject(f"crew {crew_id} is not available")
                continue
            reason = None
            if not mask.is_allowed(crew_id, choice):
                reason = mask.reason(crew_id, choice) or "unknown choice"
            elif choice not in (HOLD, RETURN) and choice in claimed:
                reason = f"already claimed by {claimed[choice]}"
            if reason is not None:
                self._reject(f"crew {crew_id} -> {choice}: {reason}")
            if choice not in (HOLD, RETURN):
                claimed.setdefault(choice, crew_id)
            plan.append((crew_id, choice))

        self._log('decision', unserved_kw=ep.unserved_kw, action=dict(sorted(action.assignments.items())))
        for crew_id, choice in plan:
            crew = ep.crews[crew_id]
            if choice == HOLD:
                continue
            if choice == RETURN:
                self._release(crew)
                self._start_trip(crew, crew.depot_node, RETURN)
                continue
            if choice not in ep.confirmed:
                continue
            if crew.target == choice and crew.status == CrewStatus.TRAVELING:
                continue
            holder = ep.assigned.get(choice)
            if holder is not None and holder != crew_id:
                continue
            self._release(crew)
            ep.assigned[choice] = crew_id
            self._start_trip(crew, self.site_nodes[choice], choice)
        self._invalidate()

    def _reject(self, message: str) -> None:
        if not self.config.audit_mode:
            raise ContractViolation(f"infeasible action: {message}")
        self._violation(message)

    def _release(self, crew: Crew) -> None:
        if crew.target is not None and self._ep.assigned.get(crew.target) == crew.id:
            del self._ep.assigned[crew.target]

    # -- movement ---------------------------------------------------------------

    def _snap_point(self, crew: Crew) -> Tuple[str, float]:
        """Last path node passed by a travelling crew, and km covered to it"""
        span = crew.arrive_time - crew.depart_time
        fraction = 1.0 if span <= 0 else min(1.0, max(0.0, (self._ep.clock - crew.depart_time) / span))
        covered = fraction * crew.trip_cum_km[-1]
        index = bisect_right(crew.trip_cum_km, covered + 1e-12) - 1
        return crew.trip_path[index], crew.trip_cum_km[index]

    def _stop_travel(self, crew: Crew) -> None:
        node, km = self._snap_point(crew)
        crew.position = node
        self._credit_travel(km)
        crew.trip += 1

    def _credit_travel(self, km: float) -> None:
        self._ep.travel_km += km
        self._ep.interval['travel_km'] += km

    def _start_trip(self, crew: Crew, node: str, target: str) -> None:
        if crew.status == CrewStatus.TRAVELING:
            self._stop_travel(crew)
        try:
            path = self.roads.path(crew.position, node)
        except nx.NetworkXNoPath:
            self._violation(f"crew {crew.id} has no open route to {target}")
            crew.status, crew.target = CrewStatus.IDLE, None
            if self._ep.assigned.get(target) == crew.id:
                del self._ep.assigned[target]
            return
        cum = [0.0] + list(accumulate(self.roads.open_graph.edges[u, v]['length'] for u, v in zip(path, path[1:])))
        hours = travel_time(cum[-1], crew.speed_kmh, self._rho())
        crew.trip += 1
        crew.status = CrewStatus.TRAVELING
        crew.target = target
        crew.trip_path = tuple(path)
        crew.trip_cum_km = tuple(cum)
        crew.depart_time = self._ep.clock
        crew.arrive_time = self._ep.clock + hours
        self._push(crew.arrive_time, EventKind.TRAVEL_END, crew=crew.id, site=target, trip=crew.trip)

    # -- event processing ---------------------------------------------------------

    def _process(self, event: Event) -> Optional[Event]:
        handler = {
            EventKind.TICKET: self._on_ticket,
            EventKind.TRAVEL_END: self._on_travel_end,
            EventKind.REPAIR_END: self._on_repair_end,
            EventKind.DUTY_CHANGE: self._on_duty_change,
            EventKind.REPLAN: lambda e: e,
        }[event.kind]
        processed = handler(event)
        if processed is not None:
            self._log(processed.kind.value, crew=processed.crew, site=processed.site,
                      detail=processed.detail, unserved_kw=self._ep.unserved_kw)
        return processed

    def _on_ticket(self, event: Event) -> Event:
        ep = self._ep
        if event.site not in ep.repaired:
            ep.confirmed.add(event.site)
        return event

    def _on_travel_end(self, event: Event) -> Optional[Event]:
        ep = self._ep
        crew = ep.crews[event.crew]
        if event.trip != crew.trip or crew.status != CrewStatus.TRAVELING:
            return None
        crew.position = crew.trip_path[-1]
        self._credit_travel(crew.trip_cum_km[-1])
        if crew.target == RETURN:
            crew.status, crew.target = CrewStatus.IDLE, None
            return event
        site = crew.target
        component_class = self.feeder.branch_by_site[site].component_class
        if site in ep.confirmed and ep.assigned.get(site) == crew.id and component_class in crew.skills:
            crew.status = CrewStatus.REPAIRING
            self._push(ep.clock + self.scenario.repair_times[site], EventKind.REPAIR_END, crew=crew.id, site=site)
            return event
        if component_class not in crew.skills:
            self._violation(f"crew {crew.id} cannot repair class '{component_class}'")
        self._release(crew)
        crew.status, crew.target = CrewStatus.IDLE, None
        return replace(event, detail="stalled")

    def _on_repair_end(self, event: Event) -> Event:
        ep = self._ep
        crew = ep.crews[event.crew]
        site = event.site
        ep.physical_damaged.discard(self.feeder.branch_by_site[site].id)
        ep.confirmed.discard(site)
        ep.repaired.add(site)
        ep.assigned.pop(site, None)
        crew.status, crew.target = CrewStatus.IDLE, None
        self._regrid(audit=True)
        if crew.retire_pending:
            self._go_off_duty(crew)
        elif crew.break_pending:
            self._begin_break(crew)
        return event

    def _regrid(self, audit: bool) -> None:
        ep = self._ep
        outcome = grid_outcome(self.feeder, frozenset(ep.physical_damaged))
        if audit and (outcome.violations or not outcome.radial):
            self._violation(f"re-energization failed screening: {outcome.violations or 'loop'}")
        ep.energized = outcome.energized
        ep.unserved_kw = outcome.unserved_kw
        ep.critical_unserved_kw = outcome.critical_unserved_kw
        for bus, restored_at in ep.critical_out.items():
            if restored_at is None and bus in ep.energized:
                ep.critical_out[bus] = ep.clock
                ep.interval['critical_restored'] += 1

    # -- duty schedule ---------------------------------------------------------------

    def _schedule_shift(self, crew: Crew) -> None:
        if crew.break_at is not None:
            self._push(crew.break_at, EventKind.DUTY_CHANGE, crew=crew.id, detail="break_start")
        self._push(crew.shift_end, EventKind.DUTY_CHANGE, crew=crew.id, detail="shift_end")

    def _on_duty_change(self, event: Event) -> Optional[Event]:
        crew = self._ep.crews[event.crew]
        if event.detail == "break_start":
            if crew.status == CrewStatus.OFF_DUTY or crew.break_taken:
                return None
            if crew.status == CrewStatus.REPAIRING:
                crew.break_pending = True
                return None
            self._begin_break(crew)
        elif event.detail == "break_end":
            if crew.status != CrewStatus.ON_BREAK:
                return None
            crew.status = CrewStatus.IDLE
            if crew.retire_pending:
                self._go_off_duty(crew)
            elif crew.target is not None:
                node = crew.depot_node if crew.target == RETURN else self.site_nodes[crew.target]
                self._start_trip(crew, node, crew.target)
        elif event.detail == "shift_end":
            if crew.status == CrewStatus.REPAIRING:
                crew.retire_pending = True
                return None
            self._go_off_duty(crew)
        elif event.detail == "shift_start":
            crew.status = CrewStatus.IDLE
            crew.position = crew.depot_node
            crew.shift_start = self._ep.clock
            crew.shift_end = self._ep.clock + self.config.shift_h
            crew.break_at = self._ep.clock + self.config.shift_h / 2.0 if self.config.break_h > 0 else None
            crew.break_taken = crew.break_pending = crew.retire_pending = False
            self._schedule_shift(crew)
        return event

    def _begin_break(self, crew: Crew) -> None:
        if crew.status == CrewStatus.TRAVELING:
            self._stop_travel(crew)
        crew.status = CrewStatus.ON_BREAK
        crew.break_taken = True
        crew.break_pending = False
        self._push(self._ep.clock + crew.break_h, EventKind.DUTY_CHANGE, crew=crew.id, detail="break_end")

    def _go_off_duty(self, crew: Crew) -> None:
        if crew.status == CrewStatus.TRAVELING:
            self._stop_travel(crew)
        self._release(crew)
        crew.status, crew.target = CrewStatus.OFF_DUTY, None
        crew.retire_pending = crew.break_pending = False
        if self.config.relief_shifts:
            self._push(self._ep.clock + self.config.rest_h, EventKind.DUTY_CHANGE, crew=crew.id, detail="shift_start")

    # -- results ---------------------------------------------------------------

    def metrics(self, decision_ms: Sequence[float] = ()) -> EpisodeMetrics:
        ep = self._ep
        restore_min = {
            bus: (t if t is not None else ep.horizon_h) * 60.0
            for bus, t in sorted(ep.critical_out.items())
        }
        t95 = critical_t95(list(restore_min.values()))
        return EpisodeMetrics(
            seed=self.seed,
            ens_mwh=ep.ens_kwh / 1000.0,
            critical_restore_min=restore_min,
            critical_t95_min=t95,
            travel_km=ep.travel_km,
            replans=ep.replans,
            decision_ms=tuple(decision_ms),
            violations=ep.violations,
            idle_crew_h=ep.idle_crew_h,
            total_reward=ep.total_reward,
            end_time_h=ep.clock,
            fully_restored=ep.unserved_kw <= 0.0,
        )


class Dispatcher(Protocol):
    name: str

    def reset(self) -> None:
        ...

    def decide(self, state: DispatchState, mask: FeasibilityMask, env: RestorationEnv) -> JointAction:
        ...


class HoldDispatcher:
    """Never dispatches anyone"""
    name = "hold"

    def reset(self) -> None:
        pass

    def decide(self, state: DispatchState, mask: FeasibilityMask, env: RestorationEnv) -> JointAction:
        return JointAction.hold_all(state)


def run_episode(env: RestorationEnv, scenario: HazardScenario, dispatcher: Dispatcher,
                seed: Optional[int] = None) -> EpisodeMetrics:
    """Drive one episode to completion, timing mask build + decision per replan"""
    state = env.reset(scenario, seed)
    dispatcher.reset()
    decision_ms: List[float] = []
    while not env.done:
        started = perf_counter()
        mask = env.mask()
        action = dispatcher.decide(state, mask, env)
        decision_ms.append((perf_counter() - started) * 1000.0)
        state, _, _, _ = env.step(action)
    return env.metrics(decision_ms)
