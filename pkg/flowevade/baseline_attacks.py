"""Query-based baselines: random fuzzing and sign-gradient PGD in the budget box."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from types import TracebackType
from typing import Any, Dict, Optional, Tuple, Type, Union

import numpy as np

from .evasion_env import (
    ACTION_COLUMNS,
    ACTION_FEATURES,
    BudgetSpec,
    materialize_raw,
    perturb_flow,
    project_delta,
    realized_delta,
)
from .flow_data import FlowRecord
from .nids_zoo import FlowClassifier


logger = logging.getLogger(__name__)

RESULT_COLUMNS = (
    "flow_index",
    "attacker",
    "attack_name",
    "success",
    "queries",
    "latency_ms",
    "bytes",
    "packets",
    "delay_ms",
)


class AttackError(Exception):
    """Base class for baseline attack failures."""


class GradientUnavailable(AttackError):
    pass


@dataclass(frozen=True)
class AttackResult:
    success: bool
    queries_used: int
    perturbation: Tuple[float, float, float]
    wall_latency_ms: float
    adversarial: FlowRecord
    best_probability: float
    trajectory: Tuple[float, ...] = ()

    def row(self, flow_index: int, attacker: str) -> Dict[str, Any]:
        bytes_, packets, delay = self.perturbation
        return {
            "flow_index": flow_index,
            "attacker": attacker,
            "attack_name": self.adversarial.attack_name,
            "success": int(self.success),
            "queries": self.queries_used,
            "latency_ms": round(self.wall_latency_ms, 4),
            "bytes": bytes_,
            "packets": packets,
            "delay_ms": delay,
        }


def reporting_order(delta: np.ndarray) -> Tuple[float, float, float]:
    """Convert an action-ordered delta (delay, bytes, packets) to (bytes, packets, delay)."""
    realized = realized_delta(delta)
    return float(realized[1]), float(realized[2]), float(realized[0])


def fuzz_attack(
    flow: FlowRecord,
    model: FlowClassifier,
    budget: BudgetSpec,
    query_cap: int = 1000,
    seed: int = 0,
    *,
    batch_size: int = 1,
) -> AttackResult:
    """Sample perturbations uniformly from the budget box until one is judged benign.

    Candidates are drawn and scored ``batch_size`` at a time; the query count
    covers every scored candidate.
    """
    if query_cap < 1 or batch_size < 1:
        raise AttackError("query_cap and batch_size must be at least 1")
    started = time.perf_counter()
    rng = np.random.default_rng(seed)
    s0 = flow.feature_vector()
    maxima = budget.episode_max

    queries = 0
    best_delta = np.zeros(len(ACTION_FEATURES))
    best_probability = float("inf")
    success = False
    while queries < query_cap:
        count = min(batch_size, query_cap - queries)
        candidates = project_delta(rng.uniform(0.0, 1.0, size=(count, len(maxima))) * maxima, budget)
        probabilities = model.proba_raw(materialize_raw(s0, candidates))
        queries += count
        winner = int(np.argmin(probabilities))
        if probabilities[winner] < best_probability:
            best_probability = float(probabilities[winner])
            best_delta = candidates[winner]
        hits = np.flatnonzero(probabilities < model.model.threshold)
        if hits.size:
            best_delta = candidates[hits[0]]
            best_probability = float(probabilities[hits[0]])
            success = True
            break

    return AttackResult(
        success=success,
        queries_used=queries,
        perturbation=reporting_order(best_delta),
        wall_latency_ms=(time.perf_counter() - started) * 1000.0,
        adversarial=perturb_flow(flow, best_delta),
        best_probability=best_probability,
    )


def pgd_attack(
    flow: FlowRecord,
    victim: FlowClassifier,
    surrogate: FlowClassifier,
    budget: BudgetSpec,
    steps: int = 100,
    step_size: float = 0.05,
) -> AttackResult:
    """Projected sign-gradient descent on the surrogate's benign loss.

    Steps are taken in encoded space on the three perturbable features,
    mapped back to raw units and projected onto the feasible box. Each
    coordinate only moves in the direction its gradient sign asks for. The
    victim is queried once per iteration and the attack stops on evasion.
    """
    if not surrogate.model.differentiable:
        raise GradientUnavailable(f"{surrogate.model.kind.value} surrogates expose no gradient")
    if steps < 1 or step_size <= 0:
        raise AttackError("steps and step_size must be positive")
    started = time.perf_counter()
    codec = surrogate.codec
    encoded_positions = np.array([codec.numeric_index(name) for name in ACTION_FEATURES])
    s0 = flow.feature_vector()
    base = s0[ACTION_COLUMNS]

    delta = np.zeros(len(ACTION_FEATURES))
    trajectory = []
    queries = 0
    success = False
    best_probability = float("inf")
    for _ in range(steps):
        raw = materialize_raw(s0, delta)
        encoded = codec.encode_matrix(raw[None, :])[0]
        trajectory.append(float(surrogate.model.predict_proba(encoded)))
        direction = -np.sign(surrogate.model.gradient(encoded)[encoded_positions])
        target_scaled = np.maximum(encoded[encoded_positions] + step_size * direction, 0.0)
        target_raw = np.array(
            [
                codec.unscale_numeric(name, value, clamp=False)
                for name, value in zip(ACTION_FEATURES, target_scaled)
            ]
        )
        candidate = target_raw - base
        # A coordinate the encoded step cannot move (its raw value sits at or past
        # the codec's fitted maximum) takes a raw step of step_size * budget instead.
        stalled = ((direction > 0) & (candidate <= delta)) | ((direction < 0) & (candidate >= delta))
        candidate = np.where(stalled, delta + direction * step_size * budget.episode_max, candidate)
        candidate = np.where(direction == 0, delta, candidate)
        delta = project_delta(candidate, budget)

        queries += 1
        probability = float(victim.proba_raw(materialize_raw(s0, delta)[None, :])[0])
        best_probability = min(best_probability, probability)
        if probability < victim.model.threshold:
            success = True
            break

    return AttackResult(
        success=success,
        queries_used=queries,
        perturbation=reporting_order(delta),
        wall_latency_ms=(time.perf_counter() - started) * 1000.0,
        adversarial=perturb_flow(flow, delta),
        best_probability=best_probability,
        trajectory=tuple(trajectory),
    )


class AttackResultWriter:
    """Stream per-flow attack outcomes to CSV as they are produced."""

    def __init__(self, path: Union[str, Path]) -> None:
        self.path = Path(path)
        self._handle = None
        self._writer: Optional[csv.DictWriter] = None
        self.rows_written = 0

    def __enter__(self) -> "AttackResultWriter":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = self.path.open("w", encoding="utf-8", newline="")
        self._writer = csv.DictWriter(self._handle, fieldnames=list(RESULT_COLUMNS))
        self._writer.writeheader()
        return self

    def write(self, flow_index: int, attacker: str, result: AttackResult) -> None:
        if self._writer is None:
            raise AttackError("writer is not open")
        self._writer.writerow(result.row(flow_index, attacker))
        self.rows_written += 1

    def __exit__(
        self,
        exc_type: Optional[Type[BaseException]],
        exc: Optional[BaseException],
        traceback: Optional[TracebackType],
    ) -> None:
        if self._handle is not None:
            self._handle.close()
        self._handle = None
        self._writer = None


__all__ = [
    "AttackError",
    "GradientUnavailable",
    "AttackResult",
    "RESULT_COLUMNS",
    "fuzz_attack",
    "pgd_attack",
    "reporting_order",
    "AttackResultWriter",
]
