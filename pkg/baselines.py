"""
Heuristic dispatchers and a short-horizon exact-search oracle

All three read the same DispatchState and FeasibilityMask the learned policy
sees, and only ever choose entries the mask allows.
"""

import logging
from dataclasses import dataclass
from itertools import combinations_with_replacement, permutations
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

from env import DispatchState, JointAction, RestorationEnv
from errors import ConfigurationError, OracleRefusal
from feeder import HOLD, RETURN, CrewStatus, FeasibilityMask

logger = logging.getLogger(__name__)

ORACLE_MAX_TARGETS = 6
ORACLE_MAX_CREWS = 3
ORACLE_MAX_DEPTH = 4

Plan = Tuple[Tuple[str, ...], ...]


@dataclass(frozen=True)
class HeuristicConfig:
    variant: str = "greedy_value"
    depth: int = ORACLE_MAX_DEPTH
    max_targets: int = ORACLE_MAX_TARGETS
    max_crews: int = ORACLE_MAX_CREWS

    def validate(self) -> None:
        if self.variant not in ("greedy_value", "travel_aware", "oracle"):
            raise ConfigurationError(f"unknown heuristic variant '{self.variant}'")
        if not 1 <= self.depth <= ORACLE_MAX_DEPTH:
            raise ConfigurationError(f"oracle depth must lie in [1, {ORACLE_MAX_DEPTH}]")


def greedy_value(state: DispatchState, mask: FeasibilityMask) -> JointAction:
    """Crews in ascending id each claim the feasible unclaimed target with the highest value"""
    claimed = set()
    assignments = {}
    for crew in sorted(state.available_crews, key=lambda c: c.id):
        best = None
        for target in state.targets:
            if target.site_id in claimed or not mask.is_allowed(crew.id, target.site_id):
                continue
            if best is None or target.value > best.value:
                best = target
        if best is None:
            assignments[crew.id] = HOLD
        else:
            assignments[crew.id] = best.site_id
            claimed.add(best.site_id)
    return JointAction(assignments)


def travel_aware(state: DispatchState, mask: FeasibilityMask) -> JointAction:
    """Greedy matching on value / (1 + travel hours), best pair first"""
    crew_index = {c.id: k for k, c in enumerate(state.crews)}
    pairs = []
    for crew in state.available_crews:
        for target in state.targets:
            if mask.is_allowed(crew.id, target.site_id):
                score = target.value / (1.0 + target.travel_h[crew_index[crew.id]])
                pairs.append((-score, crew.id, target.site_id))
    assignments = {c.id: HOLD for c in state.available_crews}
    busy_crews, claimed = set(), set()
    for _, crew_id, site_id in sorted(pairs):
        if crew_id in busy_crews or site_id in claimed:
            continue
        assignments[crew_id] = site_id
        busy_crews.add(crew_id)
        claimed.add(site_id)
    return JointAction(assignments)


# ---------------------------------------------------------------------------
# Exact short-horizon search
# ---------------------------------------------------------------------------

def enumerate_plans(crew_ids: Sequence[str], targets: Sequence[str], depth: int) -> Iterator[Plan]:
    """Every split of up to `depth` distinct targets into ordered per-crew sequences"""
    n_crews = len(crew_ids)
    if n_crews == 0:
        yield ()
        return
    for n in range(0, min(depth, len(targets)) + 1):
        for sequence in permutations(targets, n):
            for cuts in combinations_with_replacement(range(n + 1), n_crews - 1):
                bounds = (0,) + cuts + (n,)
                yield tuple(sequence[bounds[i]:bounds[i + 1]] for i in range(n_crews))


class _PlanExecutor:
    """Runs a fixed plan as soon as each step becomes feasible"""

    def __init__(self, crew_ids: Sequence[str], plan: Plan):
        self.queues: Dict[str, List[str]] = {crew_id: list(seq) for crew_id, seq in zip(crew_ids, plan)}

    def exhausted(self) -> bool:
        return not any(self.queues.values())

    def decide(self, state: DispatchState, mask: FeasibilityMask) -> JointAction:
        open_sites = {t.site_id for t in state.targets}
        for queue in self.queues.values():
            while queue and queue[0] not in open_sites:
                queue.pop(0)
        assignments = {}
        for crew in state.available_crews:
            if crew.id not in self.queues:
                # busy when the plan was made; it finishes its own work
                assignments[crew.id] = HOLD
                continue
            queue = self.queues[crew.id]
            if not queue:
                traveling_to_site = crew.status == CrewStatus.TRAVELING and crew.target not in (None, RETURN)
                assignments[crew.id] = RETURN if traveling_to_site and mask.is_allowed(crew.id, RETURN) else HOLD
            elif crew.target == queue[0]:
                assignments[crew.id] = HOLD
            elif mask.is_allowed(crew.id, queue[0]):
                assignments[crew.id] = queue[0]
            else:
                assignments[crew.id] = HOLD
        return JointAction(assignments)


def _work_in_hand(state: DispatchState) -> bool:
    """Some crew is repairing, or holds a site it resumes after a break"""
    return any(c.status == CrewStatus.REPAIRING or c.target not in (None, RETURN) for c in state.crews)


def _simulate_plan(env: RestorationEnv, crew_ids: Sequence[str], plan: Plan) -> Tuple[float, float, JointAction]:
    """Lookahead ENS (MWh) and travel (km) of a plan on a certainty-equivalent copy"""
    twin = env.clone(drop_future_arrivals=True)
    start_ens, start_travel = twin.ens_mwh, twin.travel_km
    executor = _PlanExecutor(crew_ids, plan)
    first_action: Optional[JointAction] = None
    while not twin.done:
        action = executor.decide(twin.state, twin.mask())
        if first_action is None:
            first_action = action
        if executor.exhausted() and not _work_in_hand(twin.state):
            # nothing left to do: unserved load stays constant until the horizon
            remaining = twin.unserved_kw * (twin.state.horizon_h - twin.clock) / 1000.0
            return twin.ens_mwh - start_ens + remaining, twin.travel_km - start_travel, first_action
        twin.step(action)
    return twin.ens_mwh - start_ens, twin.travel_km - start_travel, first_action or JointAction()


def exact_short_horizon(state: DispatchState, env: RestorationEnv, depth: int = ORACLE_MAX_DEPTH,
                        max_targets: int = ORACLE_MAX_TARGETS, max_crews: int = ORACLE_MAX_CREWS
                        ) -> Tuple[JointAction, float]:
    """
    Best first action over all assignment sequences of up to `depth` repairs

    Future tickets are ignored. Plans are ranked by lookahead ENS, then
    travel, then lexicographically.
    """
    if len(state.targets) > max_targets or len(state.available_crews) > max_crews:
        raise OracleRefusal(
            f"instance has {len(state.targets)} targets and {len(state.available_crews)} available crews; "
            f"oracle accepts at most {max_targets} and {max_crews}"
        )
    if not 1 <= depth <= ORACLE_MAX_DEPTH:
        raise OracleRefusal(f"depth {depth} outside [1, {ORACLE_MAX_DEPTH}]")

    crews = sorted(state.available_crews, key=lambda c: c.id)
    crew_ids = [c.id for c in crews]
    skills = {c.id: c.skills for c in crews}
    in_hand = {c.id for c in state.crews if not c.available}
    plannable = [t for t in state.targets if t.assigned_to is None or t.assigned_to not in in_hand]
    classes = {t.site_id: t.component_class for t in plannable}

    # the all-hold plan is always enumerated and always skill-feasible, so `best` is set
    best = None
    for plan in enumerate_plans(crew_ids, [t.site_id for t in plannable], depth):
        if any(classes[site] not in skills[crew_id] for crew_id, seq in zip(crew_ids, plan) for site in seq):
            continue
        ens, travel, first = _simulate_plan(env, crew_ids, plan)
        key = (ens, travel, plan)
        if best is None or key < best[0]:
            best = (key, first)
    return best[1], best[0][0]


# ---------------------------------------------------------------------------
# Dispatchers
# ---------------------------------------------------------------------------

class GreedyValueDispatcher:
    name = "greedy_value"

    def reset(self) -> None:
        pass

    def decide(self, state: DispatchState, mask: FeasibilityMask, env: RestorationEnv) -> JointAction:
        return greedy_value(state, mask)


class TravelAwareDispatcher:
    name = "travel_aware"

    def reset(self) -> None:
        pass

    def decide(self, state: DispatchState, mask: FeasibilityMask, env: RestorationEnv) -> JointAction:
        return travel_aware(state, mask)


class OracleDispatcher:
    """
    Re-plans with exact_short_horizon at every decision

    With `fallback` set, instances above the caps are dispatched by that
    heuristic instead of being refused.
    """
    name = "oracle"

    def __init__(self, config: HeuristicConfig = HeuristicConfig(variant="oracle"), fallback: Optional[str] = None):
        config.validate()
        if fallback not in (None, "greedy_value", "travel_aware"):
            raise ConfigurationError(f"unknown oracle fallback '{fallback}'")
        self.config = config
        self.fallback = fallback
        self.refusals = 0

    def reset(self) -> None:
        self.refusals = 0

    def decide(self, state: DispatchState, mask: FeasibilityMask, env: RestorationEnv) -> JointAction:
        try:
            action, _ = exact_short_horizon(state, env, self.config.depth, self.config.max_targets, self.config.max_crews)
            return action
        except OracleRefusal:
            if self.fallback is None:
                raise
            self.refusals += 1
            logger.debug(f"Oracle refused at t={state.clock:.2f} h; using {self.fallback}")
            return greedy_value(state, mask) if self.fallback == "greedy_value" else travel_aware(state, mask)


def make_dispatcher(name: str, **kwargs):
    """Heuristic dispatchers by CLI name"""
    if name == "greedy_value":
        return GreedyValueDispatcher()
    if name == "travel_aware":
        return TravelAwareDispatcher()
    if name == "oracle":
        return OracleDispatcher(HeuristicConfig(variant="oracle", depth=kwargs.get('depth', ORACLE_MAX_DEPTH)),
                                fallback=kwargs.get('fallback'))
    raise ConfigurationError(f"unknown dispatcher '{name}'")
