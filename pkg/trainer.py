"""
Masked PPO training for the recurrent dispatcher

Collects sampled episodes under the feasibility mask, computes GAE
advantages, and optimizes the clipped surrogate with value and entropy terms
using full-episode backpropagation through the recurrent cell.
"""

import copy
import logging
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path
from time import perf_counter
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, TypeVar

import numpy as np
import pandas as pd
import torch
import yaml

from env import EnvConfig, EpisodeMetrics, RestorationEnv, run_episode
from errors import ConfigurationError, ContractViolation, TrainingDivergedError
from feeder import FeederModel, RoadGraph, load_feeder, load_roads
from hazard import HazardScenario, ScenarioConfig, generate_scenario, load_scenario_config
from policy import (
    ActionDistribution,
    EncodedState,
    PolicyConfig,
    PolicyDispatcher,
    PolicyStep,
    RecurrentDispatchPolicy,
    SlateConfig,
    load_checkpoint,
    save_checkpoint,
    stack_encoded,
)
from settings import max_workers

logger = logging.getLogger(__name__)

TRAIN_FORMAT_VERSION = 1
LOG_COLUMNS = ["epoch", "policy_loss", "value_loss", "entropy", "eval_reward", "approx_kl", "clip_fraction", "eval_ens_mwh"]
ADV_STD_FLOOR = 1e-8
GRAD_CHECK_FLOOR = 1e-4

T = TypeVar("T")
R = TypeVar("R")


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    learning_rate: float = 3e-4
    rollouts_per_epoch: int = 8
    update_iters: int = 4
    epochs: int = 40
    max_grad_norm: float = 0.5
    minibatch_episodes: int = 4
    eval_scenarios: int = 10
    seed: int = 0
    train_seed_base: int = 0
    eval_seed_base: int = 1_000_000
    discount_mode: str = "step"  # or "hour"
    normalize_advantages: bool = True

    def validate(self) -> None:
        if not 0 < self.gamma <= 1:
            raise ConfigurationError("gamma must lie in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ConfigurationError("gae_lambda must lie in [0, 1]")
        if self.clip_eps <= 0:
            raise ConfigurationError("clip_eps must be positive")
        if min(self.value_coef, self.entropy_coef, self.learning_rate, self.max_grad_norm) < 0:
            raise ConfigurationError("coefficients, learning rate and clip norm must be non-negative")
        if min(self.rollouts_per_epoch, self.update_iters, self.epochs, self.minibatch_episodes) < 1:
            raise ConfigurationError("rollouts, update iterations, epochs and minibatch size must be positive")
        if self.eval_scenarios < 0:
            raise ConfigurationError("eval_scenarios must be non-negative")
        if self.discount_mode not in ("step", "hour"):
            raise ConfigurationError(f"unknown discount_mode '{self.discount_mode}'")

    def train_seeds(self, epoch: int) -> List[int]:
        start = self.train_seed_base + (epoch - 1) * self.rollouts_per_epoch
        return list(range(start, start + self.rollouts_per_epoch))

    def train_seed_range(self) -> Tuple[int, int]:
        """Half-open interval of every scenario seed the training rollouts draw"""
        return self.train_seed_base, self.train_seed_base + self.epochs * self.rollouts_per_epoch

    def eval_seeds(self) -> List[int]:
        return list(range(self.eval_seed_base, self.eval_seed_base + self.eval_scenarios))

    def check_disjoint_seeds(self) -> None:
        train_lo, train_hi = self.train_seed_range()
        eval_lo, eval_hi = self.eval_seed_base, self.eval_seed_base + self.eval_scenarios
        if self.eval_scenarios and train_lo < eval_hi and eval_lo < train_hi:
            raise ConfigurationError(
                f"training seeds [{train_lo}, {train_hi}) overlap evaluation seeds [{eval_lo}, {eval_hi})"
            )


@dataclass
class Trajectory:
    """One sampled episode: per-decision policy records plus rewards"""
    seed: int
    steps: List[PolicyStep]
    rewards: List[float]
    dt_h: List[float]
    dones: List[bool]
    metrics: Optional[EpisodeMetrics] = None

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def values(self) -> np.ndarray:
        """Stored value estimates plus a zero bootstrap at episode end"""
        return np.array([s.value for s in self.steps] + [0.0])

    @property
    def old_log_probs(self) -> torch.Tensor:
        return torch.tensor([s.log_prob for s in self.steps], dtype=torch.float64)


@dataclass(frozen=True)
class AdvantageEstimate:
    advantages: np.ndarray
    returns: np.ndarray
    mean: float = 0.0
    std: float = 1.0


def compute_gae(rewards: Sequence[float], values: Sequence[float], gamma: float, lam: float,
                discounts: Optional[Sequence[float]] = None) -> AdvantageEstimate:
    """
    Backward GAE recursion

    Args:
        rewards: r_0 .. r_{T-1}
        values: V(s_0) .. V(s_T); the last entry is the bootstrap (0 at termination)
        gamma: per-step discount, ignored when `discounts` is given
        lam: GAE mixing parameter
        discounts: optional per-step discounts (gamma ** dt for per-hour discounting)

    Returns:
        AdvantageEstimate with advantages A_t and return targets A_t + V(s_t)
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.shape[0] != rewards.shape[0] + 1:
        raise ContractViolation(f"need {rewards.shape[0] + 1} values for {rewards.shape[0]} rewards, got {values.shape[0]}")
    if discounts is None:
        discounts = np.full(rewards.shape[0], gamma)
    discounts = np.asarray(discounts, dtype=float)
    if discounts.shape != rewards.shape:
        raise ContractViolation("discounts must match rewards")

    advantages = np.zeros_like(rewards)
    running = 0.0
    for t in reversed(range(rewards.shape[0])):
        delta = rewards[t] + discounts[t] * values[t + 1] - values[t]
        running = delta + discounts[t] * lam * running
        advantages[t] = running
    return AdvantageEstimate(advantages=advantages, returns=advantages + values[:-1])


def _trajectory_advantages(trajectory: Trajectory, config: PPOConfig) -> AdvantageEstimate:
    discounts = None
    if config.discount_mode == "hour":
        discounts = [config.gamma ** dt for dt in trajectory.dt_h]
    return compute_gae(trajectory.rewards, trajectory.values, config.gamma, config.gae_lambda, discounts)


# ---------------------------------------------------------------------------
# Episode sources and fan-out
# ---------------------------------------------------------------------------

class EpisodeFactory:
    """Fresh environments and seeded scenarios for one feeder and scenario config"""

    def __init__(self, scenario_config: ScenarioConfig, env_config: EnvConfig,
                 feeder: Optional[FeederModel] = None, roads: Optional[RoadGraph] = None):
        self.scenario_config = scenario_config
        self.env_config = env_config
        self.feeder = feeder or load_feeder(scenario_config.feeder_path())
        self.roads = roads or load_roads(scenario_config.roads_path(), self.feeder)
        if self.feeder.supported_crew_counts and env_config.n_crews not in self.feeder.supported_crew_counts:
            logger.warning(
                f"⚠️ {env_config.n_crews} crews is outside the supported set {list(self.feeder.supported_crew_counts)} for {self.feeder.name}"
            )

    def scenario(self, seed: int) -> HazardScenario:
        return generate_scenario(self.scenario_config, seed, self.feeder, self.roads)

    def make_env(self) -> RestorationEnv:
        return RestorationEnv(self.feeder, self.roads, self.env_config)

    def __call__(self, seed: int) -> Tuple[RestorationEnv, HazardScenario]:
        return self.make_env(), self.scenario(seed)


def fan_out(fn: Callable[[T], R], items: Sequence[T], workers: Optional[int] = None, label: str = "task") -> List[R]:
    """Run `fn` over items on a thread pool; results keep the input order"""
    workers = max_workers() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    results: List[Optional[R]] = [None] * len(items)
    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="Restoration-Worker") as executor:
        futures = {executor.submit(fn, item): index for index, item in enumerate(items)}
        for future in as_completed(futures):
            index = futures[future]
            try:
                results[index] = future.result()
            except Exception as e:
                logger.error(f"❌ {label} {index} failed [Thread: {threading.current_thread().name}]: {e}")
                raise
    return results


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------

def rollout_episode(policy: RecurrentDispatchPolicy, slate: SlateConfig, env: RestorationEnv,
                    scenario: HazardScenario, mode: str = "sample", temperature: float = 1.0) -> Trajectory:
    """Run one episode, keeping every decision's encoding, effective mask, action and log-prob"""
    dispatcher = PolicyDispatcher(policy, slate, mode=mode, temperature=temperature, seed=scenario.seed, record=True)
    state = env.reset(scenario)
    dispatcher.reset()
    rewards, dts, dones, decision_ms = [], [], [], []
    while not env.done:
        started = perf_counter()
        mask = env.mask()
        action = dispatcher.decide(state, mask, env)
        decision_ms.append((perf_counter() - started) * 1000.0)
        state, reward, done, info = env.step(action)
        rewards.append(reward)
        dts.append(info['dt_h'])
        dones.append(done)
    return Trajectory(scenario.seed, dispatcher.steps, rewards, dts, dones, env.metrics(decision_ms))


def collect_rollouts(policy: RecurrentDispatchPolicy, slate: SlateConfig, env_factory: Callable[[int], Tuple[RestorationEnv, HazardScenario]],
                     seeds: Sequence[int], workers: Optional[int] = None) -> List[Trajectory]:
    """Sampled episodes for each seed, ordered by seed index"""

    def run(seed: int) -> Trajectory:
        env, scenario = env_factory(seed)
        try:
            return rollout_episode(policy, slate, env, scenario)
        except Exception as e:
            logger.error(f"❌ Rollout for seed {seed} failed: {e}")
            raise

    return fan_out(run, list(seeds), workers, label="rollout")


# ---------------------------------------------------------------------------
# PPO objective and update
# ---------------------------------------------------------------------------

def clipped_surrogate(ratio: torch.Tensor, advantages: torch.Tensor, clip_eps: float) -> torch.Tensor:
    """Per-sample min(r A, clip(r, 1 - eps, 1 + eps) A)"""
    clipped = torch.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    return torch.min(ratio * advantages, clipped * advantages)


def _cast(encoded: EncodedState, dtype: torch.dtype) -> EncodedState:
    return replace(encoded, targets=encoded.targets.to(dtype), crews=encoded.crews.to(dtype),
                   pairs=encoded.pairs.to(dtype), globals=encoded.globals.to(dtype))


def ppo_loss(policy: RecurrentDispatchPolicy, trajectories: Sequence[Trajectory], advantages: Sequence[np.ndarray],
             returns: Sequence[np.ndarray], config: PPOConfig) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Clipped surrogate + value loss - entropy bonus over whole episodes"""
    dtype = policy.config.torch_dtype
    new_log_probs, old_log_probs, values, entropies = [], [], [], []
    for trajectory in trajectories:
        encoded = _cast(stack_encoded([s.encoded for s in trajectory.steps]), dtype)
        allowed = torch.stack([s.allowed for s in trajectory.steps])
        choices = torch.stack([s.choices for s in trajectory.steps])
        logits, episode_values, _ = policy.forward_sequence(encoded, policy.initial_memory())
        distribution = ActionDistribution.from_logits(logits, allowed)
        new_log_probs.append(distribution.log_prob(choices))
        entropies.append(distribution.entropy())
        old_log_probs.append(trajectory.old_log_probs.to(dtype))
        values.append(episode_values)

    new_lp = torch.cat(new_log_probs)
    old_lp = torch.cat(old_log_probs)
    adv = torch.as_tensor(np.concatenate(advantages), dtype=dtype)
    ret = torch.as_tensor(np.concatenate(returns), dtype=dtype)
    value = torch.cat(values)
    entropy = torch.cat(entropies).mean()

    ratio = torch.exp(new_lp - old_lp)
    policy_loss = -clipped_surrogate(ratio, adv, config.clip_eps).mean()
    value_loss = ((value - ret) ** 2).mean()
    total = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy

    with torch.no_grad():
        diagnostics = {
            'policy_loss': float(policy_loss),
            'value_loss': float(value_loss),
            'entropy': float(entropy),
            'approx_kl': float((old_lp - new_lp).mean()),
            'clip_fraction': float(((ratio - 1.0).abs() > config.clip_eps).to(dtype).mean()),
        }
    return total, diagnostics


def _prepared_advantages(trajectories: Sequence[Trajectory], config: PPOConfig) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    estimates = [_trajectory_advantages(t, config) for t in trajectories]
    advantages = [e.advantages for e in estimates]
    returns = [e.returns for e in estimates]
    if config.normalize_advantages:
        flat = np.concatenate(advantages)
        mean, std = float(flat.mean()), max(float(flat.std()), ADV_STD_FLOOR)
        advantages = [(a - mean) / std for a in advantages]
    return advantages, returns


def ppo_update(policy: RecurrentDispatchPolicy, optimizer: torch.optim.Optimizer, trajectories: Sequence[Trajectory],
               config: PPOConfig, rng: np.random.Generator) -> Dict[str, float]:
    """U passes over episode minibatches; returns the mean diagnostics"""
    trajectories = [t for t in trajectories if len(t) > 0]
    if not trajectories:
        return {k: 0.0 for k in ("policy_loss", "value_loss", "entropy", "approx_kl", "clip_fraction")}
    advantages, returns = _prepared_advantages(trajectories, config)

    history: List[Dict[str, float]] = []
    for iteration in range(config.update_iters):
        order = rng.permutation(len(trajectories))
        for start in range(0, len(order), config.minibatch_episodes):
            batch = order[start:start + config.minibatch_episodes]
            loss, diagnostics = ppo_loss(
                policy,
                [trajectories[i] for i in batch],
                [advantages[i] for i in batch],
                [returns[i] for i in batch],
                config,
            )
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite PPO loss at update iteration {iteration}",
                    snapshot={**diagnostics, 'iteration': iteration, 'episodes': [trajectories[i].seed for i in batch]},
                )
            optimizer.zero_grad()
            loss.backward()
            diagnostics['grad_norm'] = float(torch.nn.utils.clip_grad_norm_(policy.parameters(), config.max_grad_norm))
            optimizer.step()
            history.append(diagnostics)
    return {key: float(np.mean([h[key] for h in history])) for key in history[0]}


def grad_check(policy: RecurrentDispatchPolicy, trajectories: Sequence[Trajectory], config: PPOConfig,
               n_weights: int = 200, h: float = 1e-5, seed: int = 0) -> float:
    """
    Max relative error between autograd and central finite differences

    Runs on a float64 copy of the policy over a random subset of at least
    `n_weights` scalar weights (all of them when the network is smaller).
    Relative error is |g - fd| / max(|g|, |fd|, GRAD_CHECK_FLOOR).
    """
    model = copy.deepcopy(policy).double()
    model.config = replace(policy.config, dtype="float64")
    trajectories = [t for t in trajectories if len(t) > 0]
    advantages, returns = _prepared_advantages(trajectories, config)

    def loss_value() -> torch.Tensor:
        loss, _ = ppo_loss(model, trajectories, advantages, returns, config)
        return loss

    model.zero_grad()
    loss_value().backward()
    parameters = [p for p in model.parameters() if p.requires_grad]
    analytic = torch.cat([p.grad.reshape(-1) for p in parameters]).detach().clone()

    sizes = [p.numel() for p in parameters]
    offsets = np.cumsum([0] + sizes)
    total = int(offsets[-1])
    rng = np.random.default_rng(seed)
    picks = np.arange(total) if total <= n_weights else np.sort(rng.choice(total, size=n_weights, replace=False))

    worst = 0.0
    with torch.no_grad():
        for flat_index in picks:
            which = int(np.searchsorted(offsets, flat_index, side='right') - 1)
            local = int(flat_index - offsets[which])
            weights = parameters[which].view(-1)
            original = weights[local].item()
            weights[local] = original + h
            plus = float(loss_value())
            weights[local] = original - h
            minus = float(loss_value())
            weights[local] = original
            numeric = (plus - minus) / (2.0 * h)
            exact = float(analytic[flat_index])
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), GRAD_CHECK_FLOOR)
            worst = max(worst, error)
    logger.debug(f"Gradient check over {len(picks)} weights: max relative error {worst:.3e}")
    return worst


# ---------------------------------------------------------------------------
# Evaluation and the training loop
# ---------------------------------------------------------------------------

def evaluate_policy(policy: RecurrentDispatchPolicy, slate: SlateConfig, env_factory: Callable[[int], Tuple[RestorationEnv, HazardScenario]],
                    seeds: Sequence[int], mode: str = "greedy", temperature: float = 1.0,
                    workers: Optional[int] = None) -> List[EpisodeMetrics]:
    """Run the policy without exploration on held-out scenarios"""

    def run(seed: int) -> EpisodeMetrics:
        env, scenario = env_factory(seed)
        dispatcher = PolicyDispatcher(policy, slate, mode=mode, temperature=temperature, seed=seed)
        return run_episode(env, scenario, dispatcher)

    return fan_out(run, list(seeds), workers, label="evaluation")


@dataclass(frozen=True)
class TrainingSetup:
    scenario_config: ScenarioConfig
    env_config: EnvConfig
    policy_config: PolicyConfig = PolicyConfig()
    slate: SlateConfig = SlateConfig()
    ppo: PPOConfig = PPOConfig()

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_dir: Optional[str] = None) -> "TrainingSetup":
        allowed = {"format_version", "scenario_config", "n_crews", "env", "reward", "policy", "slate", "ppo"}
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ConfigurationError(f"unknown key(s) in training config: {', '.join(unknown)}")
        if data.get('format_version', TRAIN_FORMAT_VERSION) != TRAIN_FORMAT_VERSION:
            raise ConfigurationError(f"unsupported training config format_version {data.get('format_version')!r}")
        if 'scenario_config' not in data:
            raise ConfigurationError("training config is missing 'scenario_config'")

        scenario_path = Path(data['scenario_config'])
        if base_dir is not None and not scenario_path.is_absolute():
            scenario_path = Path(base_dir) / scenario_path
        scenario_config = load_scenario_config(scenario_path)
        feeder = load_feeder(scenario_config.feeder_path())
        n_crews = int(data.get('n_crews', min(feeder.supported_crew_counts or (3,))))

        priors = {cls_name: prior.median_h for cls_name, prior in scenario_config.repair_priors.items()}
        env_config = EnvConfig.from_dict(data.get('env') or {}, n_crews, priors, data.get('reward'))

        try:
            slate_data = dict(data.get('slate') or {})
            slate_data.setdefault('max_crews', max(feeder.supported_crew_counts or (n_crews,)))
            slate = SlateConfig(**slate_data)
            policy_config = PolicyConfig(**(data.get('policy') or {}))
            ppo = PPOConfig(**(data.get('ppo') or {}))
        except TypeError as e:
            raise ConfigurationError(f"invalid training config: {e}") from e
        slate.validate()
        policy_config.validate()
        ppo.validate()
        if n_crews > slate.max_crews:
            raise ConfigurationError(f"{n_crews} crews exceed the slate's {slate.max_crews}")
        return cls(scenario_config, env_config, policy_config, slate, ppo)


def load_training_setup(path) -> TrainingSetup:
    path = Path(path)
    try:
        with open(path, 'r') as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError(f"cannot parse training config {path}: {e}") from e
    return TrainingSetup.from_dict(data, base_dir=str(path.parent))


@dataclass
class TrainingResult:
    log_path: Path
    best_checkpoint: Optional[Path]
    checkpoints: List[Path] = field(default_factory=list)
    best_eval_reward: float = float('-inf')


def _append_log(path: Path, row: Dict[str, Any]) -> None:
    frame = pd.DataFrame([row], columns=LOG_COLUMNS)
    frame.to_csv(path, mode='a', header=not path.exists(), index=False)


def train(setup: TrainingSetup, out_dir, resume: Optional[str] = None,
          env_factory: Optional[EpisodeFactory] = None, workers: Optional[int] = None) -> TrainingResult:
    """Epochs of collect -> GAE -> update -> held-out evaluation, keeping the best checkpoint"""
    config = setup.ppo
    config.validate()
    config.check_disjoint_seeds()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    factory = env_factory or EpisodeFactory(setup.scenario_config, setup.env_config)

    policy = RecurrentDispatchPolicy(setup.policy_config)
    optimizer = torch.optim.Adam(policy.parameters(), lr=config.learning_rate)
    start_epoch = 1
    best_reward = float('-inf')
    log_path = out_dir / "training_log.csv"
    if resume:
        policy, _, payload = load_checkpoint(resume)
        optimizer = torch.optim.Adam(policy.parameters(), lr=config.learning_rate)
        if payload.get('optimizer') is not None:
            optimizer.load_state_dict(payload['optimizer'])
        start_epoch = int(payload['epoch']) + 1
        best_reward = float(payload.get('extra', {}).get('best_eval_reward', best_reward))
        logger.info(f"🔁 Resuming from {resume} at epoch {start_epoch}")
    elif log_path.exists():
        log_path.unlink()

    result = TrainingResult(log_path=log_path, best_checkpoint=None, best_eval_reward=best_reward)
    if resume and (out_dir / "best.pt").exists():
        result.best_checkpoint = out_dir / "best.pt"

    logger.info(f"🚀 Training {config.epochs} epochs on {factory.feeder.name} with {setup.env_config.n_crews} crews")
    for epoch in range(start_epoch, config.epochs + 1):
        try:
            trajectories = collect_rollouts(policy, setup.slate, factory, config.train_seeds(epoch), workers)
            update_rng = np.random.default_rng([config.seed, epoch])
            diagnostics = ppo_update(policy, optimizer, trajectories, config, update_rng)
            evaluation = evaluate_policy(policy, setup.slate, factory, config.eval_seeds(), workers=workers)
        except Exception as e:
            logger.error(f"❌ Training failed in epoch {epoch}: {e}")
            raise

        eval_reward = float(np.mean([m.total_reward for m in evaluation])) if evaluation else float('nan')
        eval_ens = float(np.mean([m.ens_mwh for m in evaluation])) if evaluation else float('nan')
        _append_log(log_path, {
            'epoch': epoch,
            'policy_loss': diagnostics['policy_loss'],
            'value_loss': diagnostics['value_loss'],
            'entropy': diagnostics['entropy'],
            'eval_reward': eval_reward,
            'approx_kl': diagnostics['approx_kl'],
            'clip_fraction': diagnostics['clip_fraction'],
            'eval_ens_mwh': eval_ens,
        })

        improved = bool(evaluation) and eval_reward > result.best_eval_reward
        if improved:
            result.best_eval_reward = eval_reward
        extra = {
            'best_eval_reward': result.best_eval_reward,
            'feeder': factory.feeder.name,
            'n_crews': setup.env_config.n_crews,
            'eval_reward': eval_reward,
            'train_seeds': list(config.train_seed_range()),
            'env_config': setup.env_config.to_dict(),
        }
        checkpoint = save_checkpoint(out_dir / f"epoch_{epoch:03d}.pt", policy, setup.slate, epoch, optimizer, extra)
        result.checkpoints.append(checkpoint)
        if improved:
            result.best_checkpoint = save_checkpoint(out_dir / "best.pt", policy, setup.slate, epoch, optimizer, extra)

        logger.info(
            f"📈 Epoch {epoch}/{config.epochs}: policy {diagnostics['policy_loss']:.4f}, value {diagnostics['value_loss']:.4f}, "
            f"entropy {diagnostics['entropy']:.4f}, eval reward {eval_reward:.3f}{' ⭐' if improved else ''}"
        )
    return result
