from __future__ import annotations

import csv
from types import SimpleNamespace

import numpy as np
import pytest
from conftest import CountingClassifier

from flowevade.baseline_attacks import (
    RESULT_COLUMNS,
    AttackError,
    AttackResultWriter,
    GradientUnavailable,
    fuzz_attack,
    pgd_attack,
    reporting_order,
)
from flowevade.evasion_env import BudgetSpec, materialize_raw
from flowevade.flow_data import COLUMN_INDEX, fit_codec
from flowevade.nids_zoo import FlowClassifier, NidsModel, train_model


@pytest.fixture
def always_malicious(byte_gate):
    return FlowClassifier(NidsModel.linear(np.zeros(byte_gate.codec.dim), bias=10.0), byte_gate.codec)


def test_reporting_order_rounds_integer_features():
    assert reporting_order(np.array([7.5, 100.2, 3.1])) == (101.0, 4.0, 7.5)


def test_fuzzing_stops_at_the_first_benign_candidate(byte_gate, make_gate_flow, budget):
    counted = CountingClassifier(byte_gate)
    result = fuzz_attack(make_gate_flow(10), counted, budget, query_cap=100, seed=0)
    assert result.success
    assert result.queries_used == counted.rows_scored
    assert result.best_probability < 0.5
    bytes_, packets, delay = result.perturbation
    assert 0 < bytes_ <= budget.max_bytes and bytes_ == int(bytes_)
    assert 0 <= packets <= budget.max_pkts and 0 <= delay <= budget.max_delay_ms
    assert result.adversarial.in_bytes == 10 + int(bytes_)


def test_fuzzing_respects_the_query_cap(always_malicious, make_gate_flow, budget):
    counted = CountingClassifier(always_malicious)
    result = fuzz_attack(make_gate_flow(10), counted, budget, query_cap=25, seed=1, batch_size=10)
    assert not result.success
    assert result.queries_used == 25
    assert counted.rows_scored == 25


def test_fuzzing_is_seeded(byte_gate, make_gate_flow, budget):
    first = fuzz_attack(make_gate_flow(10), byte_gate, budget, seed=9)
    second = fuzz_attack(make_gate_flow(10), byte_gate, budget, seed=9)
    assert first.perturbation == second.perturbation
    with pytest.raises(AttackError):
        fuzz_attack(make_gate_flow(10), byte_gate, budget, query_cap=0)


def test_pgd_pushes_only_the_features_the_gradient_asks_for(byte_gate, make_gate_flow, budget):
    victim = CountingClassifier(byte_gate)
    result = pgd_attack(make_gate_flow(10), victim, byte_gate, budget, steps=50, step_size=0.05)
    assert result.success
    assert result.queries_used == victim.rows_scored
    assert result.queries_used <= 10
    bytes_, packets, delay = result.perturbation
    assert bytes_ > 0 and packets == 0 and delay == 0
    assert len(result.trajectory) == result.queries_used
    assert list(result.trajectory) == sorted(result.trajectory, reverse=True)


def test_pgd_gives_up_after_the_step_limit(always_malicious, byte_gate, make_gate_flow, budget):
    result = pgd_attack(make_gate_flow(10), always_malicious, byte_gate, BudgetSpec(max_bytes=50), steps=5)
    assert not result.success
    assert result.queries_used == 5
    assert result.perturbation[0] <= 50


def wide_byte_victim(make_gate_flow, benign_past: int) -> FlowClassifier:
    """LR victim over a codec fitted to 0..300k inbound bytes, benign once bytes pass ``benign_past``."""
    codec = fit_codec([make_gate_flow(0, label=0), make_gate_flow(300_000)])
    low, high = codec.numeric_ranges["IN_BYTES"]
    weights = np.zeros(codec.dim)
    weights[codec.numeric_index("IN_BYTES")] = -100.0
    bias = 100.0 * (np.log1p(benign_past) - low) / (high - low)
    return FlowClassifier(NidsModel.linear(weights, bias=bias), codec)


def test_pgd_moves_past_the_surrogate_fitted_maximum(byte_gate, make_gate_flow, budget):
    flow = make_gate_flow(100_000)
    victim = wide_byte_victim(make_gate_flow, benign_past=150_000)
    assert victim.proba_flows([flow])[0] > 0.5

    result = pgd_attack(flow, victim, byte_gate, budget, steps=100, step_size=0.05)
    assert result.success
    bytes_, packets, delay = result.perturbation
    assert 50_000 < bytes_ <= budget.max_bytes
    assert packets == 0 and delay == 0


def test_pgd_keeps_stepping_in_raw_units_until_evasion(byte_gate, make_gate_flow, budget):
    flow = make_gate_flow(100_000)
    victim = wide_byte_victim(make_gate_flow, benign_past=190_000)
    result = pgd_attack(flow, victim, byte_gate, budget, steps=100, step_size=0.05)
    assert result.success
    assert 85_000 < result.perturbation[0] <= budget.max_bytes


def test_pgd_saturates_the_budget_when_the_victim_holds(byte_gate, make_gate_flow, budget):
    flow = make_gate_flow(100_000)
    victim = wide_byte_victim(make_gate_flow, benign_past=250_000)
    assert victim.proba_raw(
        np.array([materialize_raw(flow.feature_vector(), budget.episode_max)])
    )[0] > 0.5

    result = pgd_attack(flow, victim, byte_gate, budget, steps=100, step_size=0.05)
    assert not result.success
    assert result.queries_used == 100
    assert result.perturbation[0] == budget.max_bytes


def test_pgd_needs_a_differentiable_surrogate(byte_gate, make_gate_flow, budget):
    codec = byte_gate.codec
    flows = [make_gate_flow(0, label=0), make_gate_flow(100_000)]
    forest = FlowClassifier(train_model("RF", codec.encode_flows(flows), np.array([0, 1]), {"n_estimators": 3}), codec)
    with pytest.raises(GradientUnavailable):
        pgd_attack(make_gate_flow(10), byte_gate, forest, budget)
    with pytest.raises(AttackError):
        pgd_attack(make_gate_flow(10), byte_gate, byte_gate, budget, steps=0)


def test_result_writer_streams_rows(tmp_path, byte_gate, make_gate_flow, budget):
    result = fuzz_attack(make_gate_flow(10), byte_gate, budget, seed=2)
    path = tmp_path / "attacks.csv"
    with AttackResultWriter(path) as writer:
        writer.write(0, "Fuzzing", result)
        writer.write(1, "Fuzzing", result)
    assert writer.rows_written == 2
    with pytest.raises(AttackError):
        writer.write(2, "Fuzzing", result)

    with path.open(encoding="utf-8", newline="") as handle:
        rows = list(csv.DictReader(handle))
    assert tuple(rows[0].keys()) == RESULT_COLUMNS
    assert rows[1]["flow_index"] == "1"
    assert rows[0]["attack_name"] == "DoS"
    assert rows[0]["success"] == "1"


class ByteThreshold:
    """Black-box stand-in that calls a flow benign once inbound bytes reach ``limit``."""

    def __init__(self, limit: int) -> None:
        self.limit = limit
        self.model = SimpleNamespace(threshold=0.5)

    def proba_raw(self, raw: np.ndarray) -> np.ndarray:
        in_bytes = np.atleast_2d(raw)[:, COLUMN_INDEX["IN_BYTES"]]
        return np.where(in_bytes >= self.limit, 0.0, 1.0)


def test_single_query_fuzzing_matches_the_uniform_draw_probability(make_gate_flow, budget):
    flow = make_gate_flow(10)
    gate = ByteThreshold(flow.in_bytes + 50_000)
    wins = [fuzz_attack(flow, gate, budget, query_cap=1, seed=seed).success for seed in range(1_000)]
    assert np.mean(wins) == pytest.approx(0.5, abs=0.05)


def _assert_inside_box(flow, adversarial, budget):
    assert 0 <= adversarial.in_bytes - flow.in_bytes <= budget.max_bytes
    assert 0 <= adversarial.in_pkts - flow.in_pkts <= budget.max_pkts
    assert 0.0 <= adversarial.flow_duration - flow.flow_duration <= budget.max_delay_ms + 1e-6
    untouched = ("out_bytes", "out_pkts", "l4_dst_port", "protocol", "tcp_flags")
    assert all(getattr(adversarial, name) == getattr(flow, name) for name in untouched)


@pytest.mark.parametrize("seed", range(4))
def test_baselines_land_inside_the_budget_box(seed, split, lr_victim, mlp_surrogate):
    rng = np.random.default_rng(seed)
    budget = BudgetSpec(
        max_bytes=int(rng.integers(0, 20_000)),
        max_pkts=int(rng.integers(0, 30)),
        max_delay_ms=int(rng.integers(0, 20_000)),
        steps=int(rng.integers(1, 20)),
    )
    flows = [flow for flow in split.test_set if flow.label == 1][:8]
    for flow in flows:
        fuzzed = fuzz_attack(flow, lr_victim, budget, query_cap=15, seed=seed, batch_size=5)
        stepped = pgd_attack(flow, lr_victim, mlp_surrogate, budget, steps=8, step_size=0.2)
        for result in (fuzzed, stepped):
            _assert_inside_box(flow, result.adversarial, budget)
            bytes_, packets, delay = result.perturbation
            assert bytes_ == int(bytes_) and packets == int(packets)
            assert result.adversarial.in_bytes == flow.in_bytes + int(bytes_)
