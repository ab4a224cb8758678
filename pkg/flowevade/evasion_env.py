"""Partially observable evasion episodes against a surrogate classifier.

An episode starts from one malicious flow s0. Each step adds a bounded
perturbation to the flow's delay, inbound bytes and inbound packets; the
agent observes only ingress features plus episode progress, and is rewarded
for being judged benign while keeping the cumulative change small.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import gymnasium as gym
import numpy as np
from gymnasium import spaces

from .flow_data import COLUMN_INDEX, FeatureCodec, FlowRecord, flows_to_matrix
from .nids_zoo import DimensionMismatch, FlowClassifier


logger = logging.getLogger(__name__)

ACTION_FEATURES: Tuple[str, ...] = ("FLOW_DURATION_MILLISECONDS", "IN_BYTES", "IN_PKTS")
ACTION_COLUMNS = np.array([COLUMN_INDEX[name] for name in ACTION_FEATURES], dtype=np.int64)
ACTION_DIM = len(ACTION_FEATURES)
_INTEGER_ACTIONS = np.array([False, True, True])
_ROUNDING_SLACK = 1e-9


class EnvError(Exception):
    """Base class for environment failures."""


class NoMaliciousSamples(EnvError):
    pass


class EpisodeDone(EnvError):
    pass


@dataclass(frozen=True)
class BudgetSpec:
    """Per-episode perturbation budget.

    The maxima bound the cumulative change over an episode; each step is
    bounded by maximum / steps in every feature.
    """

    max_bytes: int = 100_000
    max_pkts: int = 100
    max_delay_ms: int = 100_000
    steps: int = 10

    def __post_init__(self) -> None:
        if min(self.max_bytes, self.max_pkts, self.max_delay_ms) < 0:
            raise EnvError("budget maxima must be non-negative")
        if self.steps < 1:
            raise EnvError("an episode needs at least one step")

    @property
    def episode_max(self) -> np.ndarray:
        """Cumulative bound in action order (delay, bytes, packets)."""
        return np.array([self.max_delay_ms, self.max_bytes, self.max_pkts], dtype=np.float64)

    @property
    def epsilon(self) -> np.ndarray:
        return self.episode_max / self.steps

    def with_steps(self, steps: int) -> "BudgetSpec":
        return replace(self, steps=steps)

    def as_tuple(self) -> Tuple[int, int, int]:
        """(bytes, packets, delay) for reporting."""
        return (self.max_bytes, self.max_pkts, self.max_delay_ms)


class ActionSource(Protocol):
    """Anything that maps a batch of observations to bounded actions."""

    input_dim: int

    def deterministic_actions(self, observations: np.ndarray) -> np.ndarray:
        ...


# ----------------------------------------------------------------------
# Perturbation arithmetic shared with the baseline attacks
# ----------------------------------------------------------------------
def clamp_action(action: np.ndarray, budget: BudgetSpec) -> np.ndarray:
    epsilon = budget.epsilon
    return np.clip(np.asarray(action, dtype=np.float64), -epsilon, epsilon)


def advance_delta(delta: np.ndarray, action: np.ndarray, budget: BudgetSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Apply a clamped step to a cumulative delta; returns (new delta, applied change)."""
    updated = np.clip(delta + clamp_action(action, budget), 0.0, budget.episode_max)
    return updated, updated - delta


def realized_delta(delta: np.ndarray) -> np.ndarray:
    """Delta as it lands on the flow: packets and bytes round up to whole units."""
    realized = np.maximum(np.asarray(delta, dtype=np.float64), 0.0).copy()
    realized[..., _INTEGER_ACTIONS] = np.ceil(realized[..., _INTEGER_ACTIONS] - _ROUNDING_SLACK)
    return np.maximum(realized, 0.0)


def materialize_raw(s0_raw: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Raw feature rows of s0 plus the realized delta; broadcasts over leading axes."""
    realized = realized_delta(delta)
    raw = np.array(np.broadcast_to(s0_raw, np.broadcast_shapes(np.shape(s0_raw), realized.shape[:-1] + (s0_raw.shape[-1],))))
    raw[..., ACTION_COLUMNS] += realized
    return raw


def project_delta(delta: np.ndarray, budget: BudgetSpec) -> np.ndarray:
    """Project a candidate delta onto the feasible box (non-negative, within budget, whole units)."""
    clipped = np.clip(np.asarray(delta, dtype=np.float64), 0.0, budget.episode_max)
    return np.minimum(realized_delta(clipped), budget.episode_max)


def perturb_flow(flow: FlowRecord, delta: np.ndarray) -> FlowRecord:
    return flow.with_features(materialize_raw(flow.feature_vector(), delta))


def perturbation_fraction(realized: np.ndarray, budget: BudgetSpec) -> np.ndarray:
    """Largest per-feature share of the episode budget used; features with no budget are skipped."""
    maxima = budget.episode_max
    active = maxima > 0
    if not active.any():
        return np.zeros(np.shape(realized)[:-1])
    shares = np.asarray(realized, dtype=np.float64)[..., active] / maxima[active]
    return shares.max(axis=-1)


def evasion_reward(evaded: np.ndarray, realized: np.ndarray, budget: BudgetSpec) -> np.ndarray:
    return np.where(evaded, 1.0 - perturbation_fraction(realized, budget), 0.0)


def observe(codec: FeatureCodec, raw: np.ndarray, t: np.ndarray, steps: int) -> np.ndarray:
    """Ingress-only encoded features followed by the progress channel t / T."""
    raw = np.atleast_2d(raw)
    encoded = codec.encode_matrix(raw)[:, codec.observation_indices]
    progress = np.broadcast_to(np.asarray(t, dtype=np.float64) / steps, (raw.shape[0],))
    return np.column_stack([encoded, progress])


# ----------------------------------------------------------------------
# Functional episodes
# ----------------------------------------------------------------------
class MaliciousSampler:
    """Uniform sampler over the malicious flows of a split."""

    def __init__(self, flows: Sequence[FlowRecord]) -> None:
        self.flows: Tuple[FlowRecord, ...] = tuple(f for f in flows if f.label == 1)
        if not self.flows:
            raise NoMaliciousSamples("the split contains no malicious flows")
        self.raw = flows_to_matrix(self.flows)

    def __len__(self) -> int:
        return len(self.flows)

    def draw(self, rng: np.random.Generator, size: Optional[int] = None) -> Union[int, np.ndarray]:
        return rng.integers(0, len(self.flows), size=size)


@dataclass
class EvasionEpisode:
    s0: FlowRecord
    budget: BudgetSpec
    codec: FeatureCodec
    delta: np.ndarray = field(default_factory=lambda: np.zeros(ACTION_DIM))
    t: int = 0
    done: bool = False
    first_evasion_step: Optional[int] = None
    trace: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def current(self) -> FlowRecord:
        return perturb_flow(self.s0, self.delta)

    @property
    def realized(self) -> np.ndarray:
        return realized_delta(self.delta)

    def observation(self) -> np.ndarray:
        raw = materialize_raw(self.s0.feature_vector(), self.delta)
        return observe(self.codec, raw, np.array([self.t]), self.budget.steps)[0]


def reset_episode(
    sampler: MaliciousSampler,
    budget: BudgetSpec,
    rng: np.random.Generator,
    codec: FeatureCodec,
) -> Tuple[EvasionEpisode, np.ndarray]:
    s0 = sampler.flows[int(sampler.draw(rng))]
    episode = EvasionEpisode(s0=s0, budget=budget, codec=codec)
    return episode, episode.observation()


def step_episode(
    episode: EvasionEpisode, action: Sequence[float], surrogate: FlowClassifier
) -> Tuple[np.ndarray, float, bool]:
    """Advance one step; the surrogate is the only model consulted."""
    if episode.done:
        raise EpisodeDone("episode already reached its final step")
    requested = np.asarray(action, dtype=np.float64).reshape(ACTION_DIM)
    episode.delta, applied = advance_delta(episode.delta, requested, episode.budget)
    episode.t += 1

    raw = materialize_raw(episode.s0.feature_vector(), episode.delta)
    decision = int(surrogate.decide_raw(raw[None, :])[0])
    evaded = decision == 0
    reward = float(evasion_reward(np.array(evaded), episode.realized, episode.budget))
    if evaded and episode.first_evasion_step is None:
        episode.first_evasion_step = episode.t
    episode.done = episode.t >= episode.budget.steps
    episode.trace.append(
        {
            "t": episode.t,
            "requested": requested.tolist(),
            "applied": applied.tolist(),
            "delta": episode.realized.tolist(),
            "decision": decision,
            "reward": reward,
        }
    )
    return observe(episode.codec, raw, np.array([episode.t]), episode.budget.steps)[0], reward, episode.done


def export_trace(episode: EvasionEpisode, path: Union[str, Path]) -> Path:
    """Write the episode's steps as JSON lines, one object per step."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", encoding="utf-8") as handle:
        for row in episode.trace:
            handle.write(json.dumps({**row, "first_evasion_step": episode.first_evasion_step}) + "\n")
    return target


# ----------------------------------------------------------------------
# Vectorized training environment
# ----------------------------------------------------------------------
class EvasionVecEnv:
    """Batch of independent episodes with automatic reset on completion.

    ``step`` returns the observation of the freshly reset episode for every
    environment whose episode just ended; its final outcome is reported in
    ``infos``.
    """

    def __init__(
        self,
        sampler: MaliciousSampler,
        surrogate: FlowClassifier,
        budget: BudgetSpec,
        *,
        n_envs: int = 1,
        seed: int = 0,
    ) -> None:
        self.sampler = sampler
        self.surrogate = surrogate
        self.codec = surrogate.codec
        self.budget = budget
        self.num_envs = n_envs
        self.observation_dim = self.codec.observation_dim
        self.epsilon = budget.epsilon
        self.rng = np.random.default_rng(seed)
        self._indices = np.zeros(n_envs, dtype=np.int64)
        self._delta = np.zeros((n_envs, ACTION_DIM))
        self._t = np.zeros(n_envs, dtype=np.int64)
        self._returns = np.zeros(n_envs)
        self._first_evasion = np.full(n_envs, -1, dtype=np.int64)

    def _restart(self, mask: np.ndarray) -> None:
        count = int(mask.sum())
        if count:
            self._indices[mask] = self.sampler.draw(self.rng, size=count)
            self._delta[mask] = 0.0
            self._t[mask] = 0
            self._returns[mask] = 0.0
            self._first_evasion[mask] = -1

    def _observe(self) -> np.ndarray:
        raw = materialize_raw(self.sampler.raw[self._indices], self._delta)
        return observe(self.codec, raw, self._t, self.budget.steps)

    def reset(self) -> np.ndarray:
        self._restart(np.ones(self.num_envs, dtype=bool))
        return self._observe()

    def step(self, actions: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, List[Dict[str, Any]]]:
        self._delta, _ = advance_delta(self._delta, np.asarray(actions, dtype=np.float64), self.budget)
        self._t += 1
        raw = materialize_raw(self.sampler.raw[self._indices], self._delta)
        evaded = self.surrogate.decide_raw(raw) == 0
        rewards = evasion_reward(evaded, realized_delta(self._delta), self.budget)
        self._returns += rewards
        self._first_evasion = np.where(evaded & (self._first_evasion < 0), self._t, self._first_evasion)
        dones = self._t >= self.budget.steps

        infos: List[Dict[str, Any]] = [{} for _ in range(self.num_envs)]
        for env in np.flatnonzero(dones):
            infos[env]["episode"] = {
                "return": float(self._returns[env]),
                "evaded": bool(evaded[env]),
                "first_evasion_step": int(self._first_evasion[env]) if self._first_evasion[env] >= 0 else None,
            }
        self._restart(dones)
        return self._observe(), rewards, dones.astype(np.float64), infos


VecEnvFactory = Callable[[FlowClassifier, int, int], Any]


def make_env_factory(sampler: MaliciousSampler, budget: BudgetSpec) -> VecEnvFactory:
    def factory(surrogate: FlowClassifier, n_envs: int, seed: int) -> EvasionVecEnv:
        return EvasionVecEnv(sampler, surrogate, budget, n_envs=n_envs, seed=seed)

    return factory


class EvasionEnv(gym.Env):
    """Single-episode Gymnasium view over the functional episode API."""

    metadata = {"render_modes": []}

    def __init__(self, sampler: MaliciousSampler, surrogate: FlowClassifier, budget: BudgetSpec) -> None:
        super().__init__()
        self.sampler = sampler
        self.surrogate = surrogate
        self.budget = budget
        self.observation_space = spaces.Box(
            low=0.0, high=1.0, shape=(surrogate.codec.observation_dim,), dtype=np.float64
        )
        epsilon = budget.epsilon
        self.action_space = spaces.Box(low=-epsilon, high=epsilon, dtype=np.float64)
        self.episode: Optional[EvasionEpisode] = None

    def reset(self, *, seed: Optional[int] = None, options: Optional[Dict[str, Any]] = None):
        super().reset(seed=seed)
        self.episode, observation = reset_episode(self.sampler, self.budget, self.np_random, self.surrogate.codec)
        return observation, {"attack_name": self.episode.s0.attack_name}

    def step(self, action):
        if self.episode is None:
            raise EnvError("call reset() before step()")
        observation, reward, done = step_episode(self.episode, action, self.surrogate)
        info = {
            "decision": self.episode.trace[-1]["decision"],
            "first_evasion_step": self.episode.first_evasion_step,
        }
        return observation, reward, done, False, info


# ----------------------------------------------------------------------
# Deployment
# ----------------------------------------------------------------------
def rollout_deploy_many(
    policy: ActionSource, flows: Sequence[FlowRecord], budget: BudgetSpec, codec: FeatureCodec
) -> List[FlowRecord]:
    """Run the policy open-loop for T steps on each flow; no classifier is queried."""
    if not flows:
        return []
    if policy.input_dim != codec.observation_dim:
        raise DimensionMismatch(codec.observation_dim, policy.input_dim)
    s0 = flows_to_matrix(flows)
    delta = np.zeros((len(flows), ACTION_DIM))
    for t in range(budget.steps):
        observations = observe(codec, materialize_raw(s0, delta), np.full(len(flows), t), budget.steps)
        delta, _ = advance_delta(delta, policy.deterministic_actions(observations), budget)
    return [perturb_flow(flow, row) for flow, row in zip(flows, delta)]


def rollout_deploy(policy: ActionSource, flow: FlowRecord, budget: BudgetSpec, codec: FeatureCodec) -> FlowRecord:
    return rollout_deploy_many(policy, [flow], budget, codec)[0]


__all__ = [
    "ACTION_FEATURES",
    "ACTION_DIM",
    "EnvError",
    "NoMaliciousSamples",
    "EpisodeDone",
    "BudgetSpec",
    "ActionSource",
    "clamp_action",
    "advance_delta",
    "realized_delta",
    "materialize_raw",
    "project_delta",
    "perturb_flow",
    "evasion_reward",
    "observe",
    "MaliciousSampler",
    "EvasionEpisode",
    "reset_episode",
    "step_episode",
    "export_trace",
    "EvasionVecEnv",
    "make_env_factory",
    "EvasionEnv",
    "rollout_deploy",
    "rollout_deploy_many",
]
