"""On-policy actor-critic training (PPO and A2C) for the evasion agent."""

from __future__ import annotations

import copy
import io
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from torch import nn
from torch.distributions import Normal

from .evasion_env import ACTION_DIM, BudgetSpec, VecEnvFactory
from .nids_zoo import DimensionMismatch, FlowClassifier


logger = logging.getLogger(__name__)

POLICY_FORMAT_VERSION = 1
SATURATION_LOGIT = 20.0

ProgressCallback = Optional[Callable[[str], None]]


class PolicyError(Exception):
    """Base class for training and policy persistence failures."""


class InvalidTrainConfig(PolicyError, ValueError):
    pass


class PolicyFormatError(PolicyError):
    pass


class DivergenceDetected(PolicyError):
    """Training produced a non-finite loss; ``curve`` holds the completed updates."""

    def __init__(self, message: str, curve: Sequence["CurvePoint"]) -> None:
        super().__init__(message)
        self.curve = list(curve)


def _notify(message: str, progress_callback: ProgressCallback) -> None:
    logger.info(message)
    if progress_callback:
        progress_callback(message)


# ----------------------------------------------------------------------
# Networks
# ----------------------------------------------------------------------
def _mlp(input_dim: int, hidden: Sequence[int], output_dim: int) -> nn.Sequential:
    layers: List[nn.Module] = []
    width = input_dim
    for size in hidden:
        layers.extend([nn.Linear(width, size), nn.Tanh()])
        width = size
    layers.append(nn.Linear(width, output_dim))
    return nn.Sequential(*layers)


class PolicyNet(nn.Module):
    """Gaussian policy whose mean is squashed by tanh and scaled to the per-step budget.

    The standard deviation is a state-independent parameter. Deterministic
    deployment uses tanh(mean) * epsilon.
    """

    def __init__(
        self,
        input_dim: int,
        epsilon: Sequence[float],
        hidden: Sequence[int] = (64, 64),
        log_std_init: float = 0.0,
        codec_id: str = "",
    ) -> None:
        super().__init__()
        self.input_dim = int(input_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.codec_id = codec_id
        self.trunk = _mlp(self.input_dim, self.hidden, ACTION_DIM)
        self.log_std = nn.Parameter(torch.full((ACTION_DIM,), float(log_std_init)))
        self.register_buffer("epsilon", torch.as_tensor(np.asarray(epsilon, dtype=np.float32)))

    def forward(self, observations: torch.Tensor) -> torch.Tensor:
        return self.trunk(observations)

    def distribution(self, observations: torch.Tensor) -> Normal:
        mean = self(observations)
        return Normal(mean, self.log_std.exp().expand_as(mean))

    def squash(self, pre_squash: torch.Tensor) -> torch.Tensor:
        return torch.tanh(pre_squash) * self.epsilon

    def deterministic_actions(self, observations: np.ndarray) -> np.ndarray:
        batch = torch.as_tensor(np.atleast_2d(observations), dtype=self.epsilon.dtype)
        with torch.no_grad():
            return self.squash(self(batch)).double().numpy()

    def trunk_parameter_count(self) -> int:
        return sum(p.numel() for p in self.trunk.parameters())


class ValueNet(nn.Module):
    def __init__(self, input_dim: int, hidden: Sequence[int] = (64, 64)) -> None:
        super().__init__()
        self.trunk = _mlp(input_dim, hidden, 1)

    def forward(self, observations: torch.Tensor) -> torch.Tensor:
        return self.trunk(observations).squeeze(-1)


def act(
    policy: PolicyNet,
    observation: np.ndarray,
    mode: str = "deterministic",
    generator: Optional[torch.Generator] = None,
) -> np.ndarray:
    """Action for one observation: the squashed mean, or a squashed sample."""
    observation = np.asarray(observation)
    if observation.shape != (policy.input_dim,):
        raise DimensionMismatch(policy.input_dim, int(observation.shape[-1]) if observation.ndim else 0)
    if mode == "deterministic":
        return policy.deterministic_actions(observation)[0]
    if mode != "stochastic":
        raise PolicyError(f"unknown action mode {mode!r}")
    batch = torch.as_tensor(observation[None, :], dtype=policy.epsilon.dtype)
    with torch.no_grad():
        mean = policy(batch)
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        return policy.squash(mean + policy.log_std.exp() * noise)[0].double().numpy()


# ----------------------------------------------------------------------
# Rollouts
# ----------------------------------------------------------------------
class RolloutBuffer:
    """Fixed-size on-policy storage with GAE(lambda).

    Actions are stored before the tanh squash, so the squash Jacobian
    cancels out of the likelihood ratio.
    """

    def __init__(self, n_steps: int, n_envs: int, obs_dim: int) -> None:
        self.n_steps = n_steps
        self.n_envs = n_envs
        self.obs_dim = obs_dim
        self.reset()

    def reset(self) -> None:
        shape = (self.n_steps, self.n_envs)
        self.observations = np.zeros(shape + (self.obs_dim,), dtype=np.float64)
        self.pre_squash_actions = np.zeros(shape + (ACTION_DIM,), dtype=np.float64)
        self.log_probs = np.zeros(shape, dtype=np.float64)
        self.rewards = np.zeros(shape, dtype=np.float64)
        self.values = np.zeros(shape, dtype=np.float64)
        self.dones = np.zeros(shape, dtype=np.float64)
        self.advantages = np.zeros(shape, dtype=np.float64)
        self.returns = np.zeros(shape, dtype=np.float64)
        self.pos = 0

    @property
    def full(self) -> bool:
        return self.pos == self.n_steps

    def add(self, obs, pre_squash_action, log_prob, reward, value, done) -> None:
        if self.full:
            raise PolicyError("rollout buffer is full")
        self.observations[self.pos] = obs
        self.pre_squash_actions[self.pos] = pre_squash_action
        self.log_probs[self.pos] = log_prob
        self.rewards[self.pos] = reward
        self.values[self.pos] = value
        self.dones[self.pos] = done
        self.pos += 1

    def compute_returns_and_advantages(self, last_values: np.ndarray, gamma: float, gae_lambda: float) -> None:
        """``dones[t]`` marks that the transition at t ended its episode."""
        last_gae = np.zeros(self.n_envs)
        for step in reversed(range(self.n_steps)):
            next_values = last_values if step == self.n_steps - 1 else self.values[step + 1]
            non_terminal = 1.0 - self.dones[step]
            delta = self.rewards[step] + gamma * next_values * non_terminal - self.values[step]
            last_gae = delta + gamma * gae_lambda * non_terminal * last_gae
            self.advantages[step] = last_gae
        self.returns = self.advantages + self.values

    def batches(self, batch_size: int, rng: np.random.Generator) -> Iterator[Dict[str, torch.Tensor]]:
        total = self.n_steps * self.n_envs
        flat = {
            "observations": self.observations.reshape(total, self.obs_dim),
            "pre_squash_actions": self.pre_squash_actions.reshape(total, ACTION_DIM),
            "log_probs": self.log_probs.reshape(total),
            "advantages": self.advantages.reshape(total),
            "returns": self.returns.reshape(total),
        }
        order = rng.permutation(total)
        for start in range(0, total, batch_size):
            chosen = order[start : start + batch_size]
            yield {key: torch.as_tensor(value[chosen], dtype=torch.float32) for key, value in flat.items()}


# ----------------------------------------------------------------------
# Configuration and results
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class TrainConfig:
    """Trainer settings.

    Training runs whole rollouts of ``steps_per_env * n_envs`` transitions, so the
    steps actually consumed are ``total_steps`` rounded up to a rollout boundary.
    """

    algorithm: str = "PPO"
    total_steps: int = 100_000
    n_envs: int = 8
    rollout_steps: int = 2048
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 3e-4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    ent_coef: float = 0.0
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    normalize_advantage: bool = True
    hidden: Tuple[int, ...] = (64, 64)
    log_std_init: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.algorithm not in ("PPO", "A2C"):
            raise InvalidTrainConfig(f"unknown algorithm {self.algorithm!r}")
        if self.total_steps < 1 or self.n_envs < 1 or self.epochs < 1 or self.batch_size < 1:
            raise InvalidTrainConfig("total_steps, n_envs, epochs and batch_size must be positive")
        if self.rollout_steps < self.n_envs:
            raise InvalidTrainConfig("rollout_steps must cover at least one step per environment")
        if not 0.0 < self.clip_ratio < 1.0:
            raise InvalidTrainConfig("clip_ratio must lie in (0, 1)")
        if not 0.0 < self.gamma <= 1.0 or not 0.0 <= self.gae_lambda <= 1.0:
            raise InvalidTrainConfig("gamma must lie in (0, 1] and gae_lambda in [0, 1]")
        if self.learning_rate <= 0.0:
            raise InvalidTrainConfig("learning_rate must be positive")

    @classmethod
    def for_algorithm(cls, algorithm: str, **overrides: Any) -> "TrainConfig":
        """Library defaults for the chosen algorithm, with explicit overrides on top."""
        n_envs = overrides.get("n_envs", cls.n_envs)
        if algorithm == "A2C":
            rollout_steps = overrides.get("rollout_steps", 5 * n_envs)
            defaults: Dict[str, Any] = {
                "rollout_steps": rollout_steps,
                "epochs": 1,
                "batch_size": rollout_steps,
                "learning_rate": 7e-4,
                "gae_lambda": 1.0,
                "normalize_advantage": False,
            }
        else:
            defaults = {}
        return cls(algorithm=algorithm, **{**defaults, **overrides})

    @property
    def steps_per_env(self) -> int:
        return self.rollout_steps // self.n_envs


@dataclass(frozen=True)
class CurvePoint:
    step: int
    mean_reward: float
    episode_return: Optional[float]
    evasion_rate: Optional[float]
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    clip_fraction: float
    first_ratio_deviation: float


@dataclass
class TrainingResult:
    policy: PolicyNet
    value: ValueNet
    config: TrainConfig
    curve: List[CurvePoint] = field(default_factory=list)

    def curve_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(point) for point in self.curve])

    def save_curve(self, path: Union[str, Path]) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        self.curve_frame().to_csv(target, index=False)
        return target


# ----------------------------------------------------------------------
# Losses
# ----------------------------------------------------------------------
def _normalized(advantages: torch.Tensor) -> torch.Tensor:
    if advantages.numel() < 2:
        return advantages
    return (advantages - advantages.mean()) / (advantages.std() + 1e-8)


def ppo_loss(
    policy: PolicyNet,
    value: ValueNet,
    batch: Dict[str, torch.Tensor],
    config: TrainConfig,
) -> Tuple[torch.Tensor, Dict[str, Any]]:
    """Clipped surrogate objective plus value and entropy terms."""
    dist = policy.distribution(batch["observations"])
    log_prob = dist.log_prob(batch["pre_squash_actions"]).sum(-1)
    entropy = dist.entropy().sum(-1).mean()
    advantages = batch["advantages"]
    if config.normalize_advantage:
        advantages = _normalized(advantages)

    ratio = torch.exp(log_prob - batch["log_probs"])
    unclipped = advantages * ratio
    clipped = advantages * torch.clamp(ratio, 1.0 - config.clip_ratio, 1.0 + config.clip_ratio)
    policy_loss = -torch.min(unclipped, clipped).mean()
    value_loss = nn.functional.mse_loss(value(batch["observations"]), batch["returns"])
    loss = policy_loss + config.vf_coef * value_loss - config.ent_coef * entropy

    with torch.no_grad():
        log_ratio = log_prob - batch["log_probs"]
        stats = {
            "policy_loss": float(policy_loss),
            "value_loss": float(value_loss),
            "entropy": float(entropy),
            "approx_kl": float(((ratio - 1.0) - log_ratio).mean()),
            "clip_fraction": float(((ratio - 1.0).abs() > config.clip_ratio).float().mean()),
            "ratio": ratio.detach(),
        }
    return loss, stats


def a2c_loss(
    policy: PolicyNet,
    value: ValueNet,
    batch: Dict[str, torch.Tensor],
    config: TrainConfig,
) -> Tuple[torch.Tensor, Dict[str, Any]]:
    dist = policy.distribution(batch["observations"])
    log_prob = dist.log_prob(batch["pre_squash_actions"]).sum(-1)
    entropy = dist.entropy().sum(-1).mean()
    advantages = batch["advantages"]
    if config.normalize_advantage:
        advantages = _normalized(advantages)
    policy_loss = -(advantages * log_prob).mean()
    value_loss = nn.functional.mse_loss(value(batch["observations"]), batch["returns"])
    loss = policy_loss + config.vf_coef * value_loss - config.ent_coef * entropy
    with torch.no_grad():
        ratio = torch.exp(log_prob - batch["log_probs"])
    stats = {
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": float(entropy),
        "approx_kl": 0.0,
        "clip_fraction": 0.0,
        "ratio": ratio,
    }
    return loss, stats


# ----------------------------------------------------------------------
# Training loop
# ----------------------------------------------------------------------
def _collect(env, policy: PolicyNet, value: ValueNet, buffer: RolloutBuffer, obs: np.ndarray, generator):
    episodes: List[Dict[str, Any]] = []
    buffer.reset()
    with torch.no_grad():
        while not buffer.full:
            obs_t = torch.as_tensor(obs, dtype=torch.float32)
            mean = policy(obs_t)
            std = policy.log_std.exp().expand_as(mean)
            pre_squash = mean + std * torch.randn(mean.shape, generator=generator)
            log_prob = Normal(mean, std).log_prob(pre_squash).sum(-1)
            values = value(obs_t)
            next_obs, rewards, dones, infos = env.step(policy.squash(pre_squash).double().numpy())
            buffer.add(obs, pre_squash.numpy(), log_prob.numpy(), rewards, values.numpy(), dones)
            episodes.extend(info["episode"] for info in infos if "episode" in info)
            obs = next_obs
        last_values = value(torch.as_tensor(obs, dtype=torch.float32)).numpy()
    return obs, last_values, episodes


def _train(
    env_factory: VecEnvFactory,
    surrogate: FlowClassifier,
    config: TrainConfig,
    progress_callback: ProgressCallback = None,
) -> TrainingResult:
    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    env = env_factory(surrogate, config.n_envs, config.seed)
    policy = PolicyNet(
        env.observation_dim, env.epsilon, config.hidden, config.log_std_init, codec_id=surrogate.codec.codec_id
    )
    value = ValueNet(env.observation_dim, config.hidden)
    parameters = list(policy.parameters()) + list(value.parameters())
    if config.algorithm == "PPO":
        optimizer: torch.optim.Optimizer = torch.optim.Adam(parameters, lr=config.learning_rate, eps=1e-5)
        loss_fn = ppo_loss
        epochs, batch_size = config.epochs, config.batch_size
    else:
        optimizer = torch.optim.RMSprop(parameters, lr=config.learning_rate, alpha=0.99, eps=1e-5)
        loss_fn = a2c_loss
        epochs, batch_size = 1, config.steps_per_env * config.n_envs

    buffer = RolloutBuffer(config.steps_per_env, config.n_envs, env.observation_dim)
    obs = env.reset()
    curve: List[CurvePoint] = []
    steps_done = 0
    while steps_done < config.total_steps:
        obs, last_values, episodes = _collect(env, policy, value, buffer, obs, generator)
        buffer.compute_returns_and_advantages(last_values, config.gamma, config.gae_lambda)
        steps_done += buffer.n_steps * buffer.n_envs

        first_deviation = float("nan")
        stats: Dict[str, Any] = {}
        for epoch in range(epochs):
            for batch in buffer.batches(batch_size, rng):
                loss, stats = loss_fn(policy, value, batch, config)
                if epoch == 0 and np.isnan(first_deviation):
                    first_deviation = float((stats["ratio"] - 1.0).abs().max())
                if not torch.isfinite(loss):
                    raise DivergenceDetected(f"non-finite loss after {steps_done} steps", curve)
                optimizer.zero_grad()
                loss.backward()
                nn.utils.clip_grad_norm_(parameters, config.max_grad_norm)
                optimizer.step()

        point = CurvePoint(
            step=steps_done,
            mean_reward=float(buffer.rewards.mean()),
            episode_return=float(np.mean([e["return"] for e in episodes])) if episodes else None,
            evasion_rate=float(np.mean([e["evaded"] for e in episodes])) if episodes else None,
            policy_loss=stats["policy_loss"],
            value_loss=stats["value_loss"],
            entropy=stats["entropy"],
            approx_kl=stats["approx_kl"],
            clip_fraction=stats["clip_fraction"],
            first_ratio_deviation=first_deviation,
        )
        curve.append(point)
        _notify(
            f"{config.algorithm} step {steps_done}/{config.total_steps}: mean reward {point.mean_reward:.4f}",
            progress_callback,
        )

    return TrainingResult(policy=policy, value=value, config=config, curve=curve)


def train_ppo(
    env_factory: VecEnvFactory,
    surrogate: FlowClassifier,
    config: Optional[TrainConfig] = None,
    progress_callback: ProgressCallback = None,
) -> TrainingResult:
    config = config or TrainConfig.for_algorithm("PPO")
    return _train(env_factory, surrogate, replace(config, algorithm="PPO"), progress_callback)


def train_a2c(
    env_factory: VecEnvFactory,
    surrogate: FlowClassifier,
    config: Optional[TrainConfig] = None,
    progress_callback: ProgressCallback = None,
) -> TrainingResult:
    config = config or TrainConfig.for_algorithm("A2C")
    return _train(env_factory, surrogate, replace(config, algorithm="A2C"), progress_callback)


def train_policy(
    env_factory: VecEnvFactory,
    surrogate: FlowClassifier,
    config: TrainConfig,
    progress_callback: ProgressCallback = None,
) -> TrainingResult:
    trainer = train_ppo if config.algorithm == "PPO" else train_a2c
    return trainer(env_factory, surrogate, config, progress_callback)


# ----------------------------------------------------------------------
# Deployable artifact
# ----------------------------------------------------------------------
def _container(policy: PolicyNet) -> Dict[str, Any]:
    return {
        "format_version": POLICY_FORMAT_VERSION,
        "input_dim": policy.input_dim,
        "hidden": list(policy.hidden),
        "epsilon": [float(e) for e in policy.epsilon.tolist()],
        "codec_id": policy.codec_id,
        "trunk": {k: v.detach().float().clone() for k, v in policy.trunk.state_dict().items()},
    }


def serialize_policy(policy: PolicyNet) -> bytes:
    buffer = io.BytesIO()
    torch.save(_container(policy), buffer)
    return buffer.getvalue()


def policy_footprint(policy: PolicyNet) -> Tuple[int, int]:
    """(trunk parameter count, serialized bytes); the log-std vector is training-only."""
    return policy.trunk_parameter_count(), len(serialize_policy(policy))


def save_policy(policy: PolicyNet, path: Union[str, Path]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(serialize_policy(policy))
    return target


def load_policy(path: Union[str, Path]) -> PolicyNet:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises pickle and runtime errors alike
        raise PolicyFormatError(f"cannot read policy artifact {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != POLICY_FORMAT_VERSION:
        raise PolicyFormatError(f"{path} is not a version {POLICY_FORMAT_VERSION} policy artifact")
    policy = PolicyNet(
        payload["input_dim"], payload["epsilon"], payload["hidden"], codec_id=payload.get("codec_id", "")
    )
    policy.trunk.load_state_dict(payload["trunk"])
    policy.eval()
    return policy


def rescale_policy(policy: PolicyNet, budget: BudgetSpec) -> PolicyNet:
    """Copy of the policy whose actions scale to a different budget box."""
    rescaled = copy.deepcopy(policy)
    rescaled.epsilon.copy_(torch.as_tensor(budget.epsilon, dtype=rescaled.epsilon.dtype))
    return rescaled


def saturating_policy(input_dim: int, epsilon: Sequence[float], hidden: Sequence[int] = (64, 64)) -> PolicyNet:
    """Policy that always requests the full per-step budget in every feature."""
    policy = PolicyNet(input_dim, epsilon, hidden)
    with torch.no_grad():
        for parameter in policy.trunk.parameters():
            parameter.zero_()
        policy.trunk[-1].bias.fill_(SATURATION_LOGIT)
    return policy


def constant_policy(input_dim: int, epsilon: Sequence[float], hidden: Sequence[int] = (64, 64)) -> PolicyNet:
    """Policy whose actions are always zero."""
    policy = PolicyNet(input_dim, epsilon, hidden)
    with torch.no_grad():
        for parameter in policy.trunk.parameters():
            parameter.zero_()
    return policy


__all__ = [
    "PolicyError",
    "InvalidTrainConfig",
    "PolicyFormatError",
    "DivergenceDetected",
    "PolicyNet",
    "ValueNet",
    "act",
    "RolloutBuffer",
    "TrainConfig",
    "CurvePoint",
    "TrainingResult",
    "ppo_loss",
    "a2c_loss",
    "train_ppo",
    "train_a2c",
    "train_policy",
    "serialize_policy",
    "policy_footprint",
    "save_policy",
    "load_policy",
    "rescale_policy",
    "saturating_policy",
    "constant_policy",
]
