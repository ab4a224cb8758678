from __future__ import annotations

import numpy as np
import pytest
import torch

from flowevade import policy_learn
from flowevade.evasion_env import BudgetSpec, MaliciousSampler, make_env_factory
from flowevade.nids_zoo import DimensionMismatch
from flowevade.policy_learn import (
    DivergenceDetected,
    InvalidTrainConfig,
    PolicyError,
    PolicyFormatError,
    PolicyNet,
    RolloutBuffer,
    TrainConfig,
    ValueNet,
    act,
    constant_policy,
    load_policy,
    policy_footprint,
    ppo_loss,
    rescale_policy,
    save_policy,
    saturating_policy,
    train_a2c,
    train_policy,
    train_ppo,
)

TINY = {"total_steps": 128, "n_envs": 4, "rollout_steps": 32, "epochs": 2, "batch_size": 16, "hidden": (16,)}


@pytest.fixture
def gate_factory(make_gate_flow):
    sampler = MaliciousSampler([make_gate_flow(10), make_gate_flow(40), make_gate_flow(150)])
    return make_env_factory(sampler, BudgetSpec(steps=4))


def test_train_config_validation_and_algorithm_defaults():
    with pytest.raises(InvalidTrainConfig):
        TrainConfig(algorithm="DQN")
    with pytest.raises(ValueError):
        TrainConfig(clip_ratio=1.5)
    with pytest.raises(InvalidTrainConfig):
        TrainConfig(n_envs=8, rollout_steps=4)

    a2c = TrainConfig.for_algorithm("A2C")
    assert (a2c.rollout_steps, a2c.epochs, a2c.learning_rate) == (40, 1, 7e-4)
    assert TrainConfig.for_algorithm("A2C", n_envs=2).rollout_steps == 10
    assert TrainConfig.for_algorithm("PPO", seed=4) == TrainConfig(seed=4)


def test_policy_trunk_size_for_the_default_architecture():
    policy = PolicyNet(995, [10_000.0, 10_000.0, 10.0])
    assert policy.trunk_parameter_count() == 68_099


def test_deterministic_actions_stay_inside_the_step_box():
    epsilon = np.array([10_000.0, 10_000.0, 10.0])
    torch.manual_seed(0)
    policy = PolicyNet(12, epsilon, hidden=(8,))
    with torch.no_grad():
        policy.trunk[-1].bias.fill_(50.0)
    actions = policy.deterministic_actions(np.random.default_rng(0).random((5, 12)))
    assert actions.shape == (5, 3)
    assert (np.abs(actions) <= epsilon + 1e-6).all()


def test_fixed_policies():
    epsilon = [100.0, 50.0, 5.0]
    obs = np.zeros((2, 6))
    assert saturating_policy(6, epsilon, hidden=(4,)).deterministic_actions(obs).tolist() == [epsilon, epsilon]
    assert constant_policy(6, epsilon, hidden=(4,)).deterministic_actions(obs).tolist() == [[0.0] * 3] * 2


def test_act_checks_shape_and_mode():
    policy = saturating_policy(6, [100.0, 50.0, 5.0], hidden=(4,))
    assert act(policy, np.zeros(6)).tolist() == [100.0, 50.0, 5.0]
    sampled = act(policy, np.zeros(6), mode="stochastic", generator=torch.Generator().manual_seed(1))
    assert (np.abs(sampled) <= np.array([100.0, 50.0, 5.0]) + 1e-6).all()
    with pytest.raises(DimensionMismatch):
        act(policy, np.zeros(7))
    with pytest.raises(PolicyError):
        act(policy, np.zeros(6), mode="greedy")


def test_policy_artifact_round_trip(tmp_path):
    torch.manual_seed(3)
    policy = PolicyNet(10, [1_000.0, 1_000.0, 1.0], hidden=(8, 8), codec_id="abc123")
    path = save_policy(policy, tmp_path / "policy.pt")
    restored = load_policy(path)
    obs = np.random.default_rng(1).random((4, 10))
    assert np.allclose(restored.deterministic_actions(obs), policy.deterministic_actions(obs))
    assert restored.codec_id == "abc123"

    params, size = policy_footprint(policy)
    assert params == policy.trunk_parameter_count()
    assert size == path.stat().st_size

    garbage = tmp_path / "garbage.pt"
    garbage.write_bytes(b"\x00" * 16)
    with pytest.raises(PolicyFormatError):
        load_policy(garbage)


def test_rescale_policy_leaves_the_original_alone():
    budget = BudgetSpec()
    policy = saturating_policy(4, budget.epsilon, hidden=(4,))
    rescaled = rescale_policy(policy, budget.with_steps(20))
    obs = np.zeros((1, 4))
    assert rescaled.deterministic_actions(obs)[0].tolist() == [5_000.0, 5_000.0, 5.0]
    assert policy.deterministic_actions(obs)[0].tolist() == [10_000.0, 10_000.0, 10.0]


def test_generalized_advantage_estimates_match_hand_computation():
    buffer = RolloutBuffer(n_steps=3, n_envs=1, obs_dim=2)
    for reward, done in ((1.0, 0.0), (0.0, 0.0), (2.0, 1.0)):
        buffer.add(np.zeros((1, 2)), np.zeros((1, 3)), np.zeros(1), np.array([reward]), np.array([0.5]), np.array([done]))
    with pytest.raises(PolicyError):
        buffer.add(np.zeros((1, 2)), np.zeros((1, 3)), np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1))

    buffer.compute_returns_and_advantages(np.array([10.0]), gamma=0.9, gae_lambda=0.8)
    assert buffer.advantages[:, 0] == pytest.approx([1.6916, 1.03, 1.5])
    assert buffer.returns[:, 0] == pytest.approx([2.1916, 1.53, 2.0])


def test_first_ppo_minibatch_has_unit_ratio():
    torch.manual_seed(0)
    config = TrainConfig(**TINY)
    policy = PolicyNet(5, [1.0, 1.0, 1.0], hidden=(8,))
    value = ValueNet(5, hidden=(8,))
    observations = torch.rand(16, 5)
    with torch.no_grad():
        dist = policy.distribution(observations)
        actions = dist.sample()
        log_probs = dist.log_prob(actions).sum(-1)
    batch = {
        "observations": observations,
        "pre_squash_actions": actions,
        "log_probs": log_probs,
        "advantages": torch.randn(16),
        "returns": torch.randn(16),
    }
    loss, stats = ppo_loss(policy, value, batch, config)
    assert torch.isfinite(loss)
    assert torch.allclose(stats["ratio"], torch.ones(16), atol=1e-5)
    assert stats["clip_fraction"] == 0.0
    assert stats["approx_kl"] == pytest.approx(0.0, abs=1e-6)
    assert stats["policy_loss"] == pytest.approx(0.0, abs=1e-5)


def test_ppo_training_is_seed_reproducible(gate_factory, byte_gate):
    config = TrainConfig(seed=5, **TINY)
    messages = []
    first = train_ppo(gate_factory, byte_gate, config, messages.append)
    second = train_ppo(gate_factory, byte_gate, config)

    assert [p.step for p in first.curve] == [32, 64, 96, 128]
    assert [p.mean_reward for p in first.curve] == [p.mean_reward for p in second.curve]
    assert first.policy.codec_id == byte_gate.codec.codec_id
    assert first.curve[0].first_ratio_deviation == pytest.approx(0.0, abs=1e-5)
    assert len(messages) == 4
    assert list(first.curve_frame().columns)[:3] == ["step", "mean_reward", "episode_return"]


def test_training_finishes_the_rollout_that_crosses_total_steps(gate_factory, byte_gate):
    config = TrainConfig(seed=5, **{**TINY, "total_steps": 70, "epochs": 1})
    result = train_ppo(gate_factory, byte_gate, config)
    assert [p.step for p in result.curve] == [32, 64, 96]


def test_a2c_runs_through_the_dispatcher(gate_factory, byte_gate, tmp_path):
    config = TrainConfig.for_algorithm("A2C", total_steps=40, n_envs=4, hidden=(16,), seed=2)
    result = train_policy(gate_factory, byte_gate, config)
    assert result.config.algorithm == "A2C"
    assert len(result.curve) == 2
    assert result.save_curve(tmp_path / "curve.csv").read_text(encoding="utf-8").startswith("step,")
    assert len(train_a2c(gate_factory, byte_gate, config).curve) == 2


def test_non_finite_loss_stops_training(gate_factory, byte_gate, monkeypatch):
    def exploding_loss(policy, value, batch, config):
        loss = policy(batch["observations"]).sum() * float("nan")
        return loss, {"ratio": torch.ones(1), "policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0,
                      "approx_kl": 0.0, "clip_fraction": 0.0}

    monkeypatch.setattr(policy_learn, "ppo_loss", exploding_loss)
    with pytest.raises(DivergenceDetected) as excinfo:
        train_ppo(gate_factory, byte_gate, TrainConfig(**TINY))
    assert excinfo.value.curve == []


@pytest.mark.slow
def test_ppo_learns_to_pass_the_byte_gate(gate_factory, byte_gate):
    config = TrainConfig(total_steps=20_000, n_envs=8, rollout_steps=512, epochs=5, batch_size=64, seed=0)
    result = train_ppo(gate_factory, byte_gate, config)
    assert result.curve[-1].mean_reward > result.curve[0].mean_reward
