import math

import numpy as np
import pandas as pd
import pytest
import torch

from conftest import CONFIG_13, ROOT, make_scenario, make_tiny_feeder, make_tiny_roads, tiny_env_config
from env import EnvConfig, RestorationEnv
from errors import ConfigurationError, ContractViolation, TrainingDivergedError
from policy import PolicyConfig, RecurrentDispatchPolicy, SlateConfig, load_checkpoint
from trainer import (
    LOG_COLUMNS,
    PPOConfig,
    TrainingSetup,
    clipped_surrogate,
    collect_rollouts,
    compute_gae,
    evaluate_policy,
    fan_out,
    grad_check,
    load_training_setup,
    ppo_loss,
    ppo_update,
    rollout_episode,
    train,
)

SMALL = PolicyConfig(hidden_size=8, embed_size=4, seed=11)
SLATE = SlateConfig(max_targets=4, max_crews=2)

DAMAGE_PATTERNS = (
    ("site_L_BC",),
    ("site_L_AD",),
    ("site_L_AB", "site_L_AD"),
    ("site_L_BC", "site_L_AD"),
)


class TinyEpisodes:
    """Seeded tiny-feeder episodes with a late ticket on odd seeds"""

    def __init__(self, n_crews: int = 2):
        self.feeder = make_tiny_feeder()
        self.roads = make_tiny_roads()
        self.config = tiny_env_config(n_crews)

    def __call__(self, seed: int):
        initial = DAMAGE_PATTERNS[seed % len(DAMAGE_PATTERNS)]
        arrivals = [(1.5, "site_L_BC")] if seed % 2 and "site_L_BC" not in initial else []
        scenario = make_scenario(initial=initial, arrivals=arrivals, seed=seed, horizon_h=8.0,
                                 repair_times={site: 1.0 + 0.25 * (seed % 3) for site in initial})
        return RestorationEnv(self.feeder, self.roads, self.config), scenario


def rollouts(policy, seeds=(0, 1, 2, 3)):
    return collect_rollouts(policy, SLATE, TinyEpisodes(), list(seeds), workers=1)


# -- advantages and the surrogate --------------------------------------------------------

def test_gae_single_step():
    estimate = compute_gae([2.0], [0.2, 0.0], gamma=0.99, lam=0.95)
    assert estimate.advantages.tolist() == pytest.approx([1.8])
    assert estimate.returns.tolist() == pytest.approx([2.0])


def test_gae_lambda_zero_is_td_residual():
    rewards, values, gamma = [1.0, 2.0, 3.0], [0.5, 1.0, 1.5, 0.0], 0.9
    estimate = compute_gae(rewards, values, gamma=gamma, lam=0.0)
    expected = [rewards[t] + gamma * values[t + 1] - values[t] for t in range(3)]
    assert estimate.advantages.tolist() == pytest.approx(expected)


def test_gae_lambda_one_is_reward_to_go():
    estimate = compute_gae([1.0, 2.0, 3.0], [0.0] * 4, gamma=1.0, lam=1.0)
    assert estimate.advantages.tolist() == pytest.approx([6.0, 5.0, 3.0])


def test_gae_with_per_hour_discounts():
    gamma = 0.9
    dts = [2.0, 0.5]
    estimate = compute_gae([1.0, 1.0], [0.0, 0.0, 0.0], gamma, 1.0, discounts=[gamma ** dt for dt in dts])
    assert estimate.advantages.tolist() == pytest.approx([1.0 + gamma ** 2.0, 1.0])


def test_gae_length_mismatch():
    with pytest.raises(ContractViolation):
        compute_gae([1.0, 2.0], [0.0, 0.0], gamma=0.99, lam=0.95)
    with pytest.raises(ContractViolation):
        compute_gae([1.0], [0.0, 0.0], gamma=0.99, lam=0.95, discounts=[0.9, 0.9])


def test_clipped_surrogate_examples():
    value = clipped_surrogate(torch.tensor([1.3]), torch.tensor([2.0]), 0.2)
    assert value.item() == pytest.approx(2.4)
    value = clipped_surrogate(torch.tensor([0.7]), torch.tensor([-1.0]), 0.2)
    assert value.item() == pytest.approx(-0.8)
    value = clipped_surrogate(torch.tensor([1.1]), torch.tensor([1.0]), 0.2)
    assert value.item() == pytest.approx(1.1)


# -- configuration ---------------------------------------------------------------------

def test_ppo_config_validation():
    PPOConfig().validate()
    for bad in ({'gamma': 0.0}, {'gae_lambda': 1.5}, {'clip_eps': 0.0}, {'epochs': 0}, {'discount_mode': 'day'}):
        with pytest.raises(ConfigurationError):
            PPOConfig(**bad).validate()


def test_training_and_evaluation_seeds_are_disjoint():
    config = PPOConfig(rollouts_per_epoch=4, epochs=3, eval_scenarios=2, eval_seed_base=100)
    assert config.train_seeds(1) == [0, 1, 2, 3]
    assert config.train_seeds(3) == [8, 9, 10, 11]
    assert config.eval_seeds() == [100, 101]
    config.check_disjoint_seeds()
    with pytest.raises(ConfigurationError, match="overlap"):
        PPOConfig(rollouts_per_epoch=4, epochs=3, eval_scenarios=2, eval_seed_base=10).check_disjoint_seeds()


def test_load_bundled_training_config():
    setup = load_training_setup(ROOT / "configs" / "train_13bus.yaml")
    assert setup.env_config.n_crews == 3
    assert setup.slate.max_crews == 9
    assert setup.env_config.prior_medians['pole'] == pytest.approx(3.0)
    assert setup.policy_config.hidden_size == 128


def test_training_config_rejects_unknown_and_oversized(tmp_path):
    with pytest.raises(ConfigurationError, match="unknown key"):
        TrainingSetup.from_dict({'scenario_config': str(CONFIG_13), 'optimizer': 'sgd'})
    with pytest.raises(ConfigurationError):
        TrainingSetup.from_dict({'scenario_config': str(CONFIG_13), 'n_crews': 6, 'slate': {'max_crews': 3}})
    with pytest.raises(ConfigurationError):
        TrainingSetup.from_dict({'scenario_config': str(CONFIG_13), 'ppo': {'learning_rat': 0.1}})


# -- rollouts and updates ---------------------------------------------------------------

def test_rollout_records_every_decision():
    policy = RecurrentDispatchPolicy(SMALL)
    env, scenario = TinyEpisodes()(3)
    trajectory = rollout_episode(policy, SLATE, env, scenario)
    assert len(trajectory) == len(trajectory.rewards) == trajectory.metrics.replans
    assert trajectory.dones[-1] and not any(trajectory.dones[:-1])
    assert sum(trajectory.rewards) == pytest.approx(trajectory.metrics.total_reward)
    assert sum(trajectory.dt_h) == pytest.approx(trajectory.metrics.end_time_h)
    assert trajectory.values[-1] == 0.0
    assert trajectory.metrics.violations == 0


def test_collect_rollouts_keeps_seed_order():
    policy = RecurrentDispatchPolicy(SMALL)
    trajectories = collect_rollouts(policy, SLATE, TinyEpisodes(), [5, 2, 7], workers=3)
    assert [t.seed for t in trajectories] == [5, 2, 7]


def test_fan_out_order_and_errors():
    assert fan_out(lambda x: x * x, [3, 1, 2], workers=3) == [9, 1, 4]

    def explode(x):
        if x == 2:
            raise ValueError("boom")
        return x

    with pytest.raises(ValueError, match="boom"):
        fan_out(explode, [1, 2, 3], workers=2)


def test_fresh_policy_has_unit_ratio():
    policy = RecurrentDispatchPolicy(SMALL)
    trajectories = rollouts(policy)
    advantages = [np.ones(len(t)) for t in trajectories]
    returns = [np.zeros(len(t)) for t in trajectories]
    _, diagnostics = ppo_loss(policy, trajectories, advantages, returns, PPOConfig())
    assert diagnostics['approx_kl'] == pytest.approx(0.0, abs=1e-9)
    assert diagnostics['clip_fraction'] == 0.0


def test_zero_advantage_gives_zero_policy_gradient():
    policy = RecurrentDispatchPolicy(SMALL)
    trajectories = rollouts(policy)
    config = PPOConfig(value_coef=0.0, entropy_coef=0.0)
    advantages = [np.zeros(len(t)) for t in trajectories]
    returns = [np.zeros(len(t)) for t in trajectories]
    loss, _ = ppo_loss(policy, trajectories, advantages, returns, config)
    policy.zero_grad()
    loss.backward()
    for parameter in policy.parameters():
        if parameter.grad is not None:
            assert torch.count_nonzero(parameter.grad) == 0


def test_zero_learning_rate_leaves_weights_unchanged():
    policy = RecurrentDispatchPolicy(SMALL)
    before = [p.detach().clone() for p in policy.parameters()]
    config = PPOConfig(learning_rate=0.0, update_iters=2, minibatch_episodes=2)
    optimizer = torch.optim.Adam(policy.parameters(), lr=config.learning_rate)
    diagnostics = ppo_update(policy, optimizer, rollouts(policy), config, np.random.default_rng(0))
    assert set(diagnostics) >= {'policy_loss', 'value_loss', 'entropy', 'approx_kl', 'clip_fraction', 'grad_norm'}
    for old, new in zip(before, policy.parameters()):
        assert torch.equal(old, new)


def test_update_moves_weights():
    policy = RecurrentDispatchPolicy(SMALL)
    before = [p.detach().clone() for p in policy.parameters()]
    config = PPOConfig(learning_rate=1e-2, update_iters=1, minibatch_episodes=4)
    optimizer = torch.optim.Adam(policy.parameters(), lr=config.learning_rate)
    ppo_update(policy, optimizer, rollouts(policy), config, np.random.default_rng(0))
    assert any(not torch.equal(old, new) for old, new in zip(before, policy.parameters()))


def test_non_finite_loss_raises_with_snapshot():
    policy = RecurrentDispatchPolicy(SMALL)
    trajectories = rollouts(policy, seeds=(0,))
    trajectories[0].rewards = [math.nan] * len(trajectories[0])
    optimizer = torch.optim.Adam(policy.parameters(), lr=1e-3)
    with pytest.raises(TrainingDivergedError) as excinfo:
        ppo_update(policy, optimizer, trajectories, PPOConfig(), np.random.default_rng(0))
    assert excinfo.value.snapshot['episodes'] == [0]


@pytest.mark.parametrize("nonlinearity", ["tanh", "identity"])
def test_grad_check_agrees_with_finite_differences(nonlinearity):
    policy = RecurrentDispatchPolicy(PolicyConfig(hidden_size=6, embed_size=4, seed=5, nonlinearity=nonlinearity))
    trajectories = rollouts(policy, seeds=(0, 3))
    assert grad_check(policy, trajectories, PPOConfig(), n_weights=60) < 1e-4


def test_evaluate_policy_is_greedy_and_repeatable():
    policy = RecurrentDispatchPolicy(SMALL)
    first = evaluate_policy(policy, SLATE, TinyEpisodes(), [0, 1, 2], workers=2)
    second = evaluate_policy(policy, SLATE, TinyEpisodes(), [0, 1, 2], workers=1)
    assert [m.seed for m in first] == [0, 1, 2]
    assert [m.ens_mwh for m in first] == [m.ens_mwh for m in second]


# -- training loop ---------------------------------------------------------------------

def tiny_setup(scenario_config, epochs: int = 2) -> TrainingSetup:
    ppo = PPOConfig(epochs=epochs, rollouts_per_epoch=2, update_iters=1, minibatch_episodes=2,
                    eval_scenarios=2, eval_seed_base=100, learning_rate=1e-3)
    return TrainingSetup(scenario_config, tiny_env_config(2), SMALL, SLATE, ppo)


def test_train_writes_log_and_checkpoints(tmp_path, scenario_config13):
    result = train(tiny_setup(scenario_config13), tmp_path, env_factory=TinyEpisodes(), workers=1)
    log = pd.read_csv(result.log_path)
    assert list(log.columns) == LOG_COLUMNS
    assert log['epoch'].tolist() == [1, 2]
    assert [p.name for p in result.checkpoints] == ["epoch_001.pt", "epoch_002.pt"]
    assert result.best_checkpoint == tmp_path / "best.pt"
    assert result.best_eval_reward == pytest.approx(log['eval_reward'].max())
    _, slate, payload = load_checkpoint(result.best_checkpoint)
    assert slate == SLATE
    assert payload['extra']['feeder'] == "tiny"
    assert payload['extra']['train_seeds'] == [0, 4]
    assert EnvConfig.from_saved(payload['extra']['env_config']) == tiny_env_config(2)


def test_train_is_reproducible(tmp_path, scenario_config13):
    a = train(tiny_setup(scenario_config13), tmp_path / "a", env_factory=TinyEpisodes(), workers=1)
    b = train(tiny_setup(scenario_config13), tmp_path / "b", env_factory=TinyEpisodes(), workers=1)
    pd.testing.assert_frame_equal(pd.read_csv(a.log_path), pd.read_csv(b.log_path))


def test_train_resumes_epoch_numbering(tmp_path, scenario_config13):
    first = train(tiny_setup(scenario_config13, epochs=2), tmp_path, env_factory=TinyEpisodes(), workers=1)
    resumed = train(tiny_setup(scenario_config13, epochs=3), tmp_path, resume=str(first.checkpoints[-1]),
                    env_factory=TinyEpisodes(), workers=1)
    assert [p.name for p in resumed.checkpoints] == ["epoch_003.pt"]
    assert pd.read_csv(resumed.log_path)['epoch'].tolist() == [1, 2, 3]
    assert resumed.best_eval_reward >= first.best_eval_reward
