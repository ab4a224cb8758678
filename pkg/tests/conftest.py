from __future__ import annotations

import sys
from collections import defaultdict
from pathlib import Path
from typing import Any, Dict, List

import numpy as np
import pytest

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from flowevade.evasion_env import BudgetSpec  # noqa: E402
from flowevade.flow_data import FlowRecord, fit_codec, generate_synthetic, labels_of, partition  # noqa: E402
from flowevade.nids_zoo import FlowClassifier, NidsModel, train_model  # noqa: E402


class FakeRedis:
    """In-memory stand-in for the handful of Redis commands the job store issues."""

    def __init__(self) -> None:
        self.hashes: Dict[str, Dict[bytes, bytes]] = defaultdict(dict)
        self.lists: Dict[str, List[bytes]] = defaultdict(list)
        self.published: List[tuple] = []

    @staticmethod
    def _b(value: Any) -> bytes:
        return value if isinstance(value, bytes) else str(value).encode("utf-8")

    def hset(self, key: str, mapping: Dict[str, Any]) -> int:
        for field, value in mapping.items():
            self.hashes[key][self._b(field)] = self._b(value)
        return len(mapping)

    def hget(self, key: str, field: str):
        return self.hashes.get(key, {}).get(self._b(field))

    def hgetall(self, key: str) -> Dict[bytes, bytes]:
        return dict(self.hashes.get(key, {}))

    def delete(self, *keys: str) -> int:
        removed = 0
        for key in keys:
            removed += int(self.hashes.pop(key, None) is not None)
            removed += int(self.lists.pop(key, None) is not None)
        return removed

    def rpush(self, key: str, value: Any) -> int:
        self.lists[key].append(self._b(value))
        return len(self.lists[key])

    def lrange(self, key: str, start: int, end: int) -> List[bytes]:
        items = self.lists.get(key, [])
        stop = len(items) if end == -1 else end + 1
        return items[start:stop]

    def ltrim(self, key: str, start: int, end: int) -> bool:
        items = self.lists.get(key, [])
        begin = max(len(items) + start, 0) if start < 0 else start
        stop = len(items) if end == -1 else end + 1
        self.lists[key] = items[begin:stop]
        return True

    def publish(self, channel: str, message: Any) -> int:
        self.published.append((channel, message))
        return 0

    def pipeline(self) -> "FakePipeline":
        return FakePipeline(self)


class FakePipeline:
    def __init__(self, redis_conn: FakeRedis) -> None:
        self.redis = redis_conn
        self.calls: List[tuple] = []

    def __getattr__(self, name: str):
        def queue(*args, **kwargs):
            self.calls.append((name, args, kwargs))
            return self

        return queue

    def execute(self) -> List[Any]:
        results = [getattr(self.redis, name)(*args, **kwargs) for name, args, kwargs in self.calls]
        self.calls = []
        return results


class CountingClassifier:
    """Wraps a FlowClassifier and counts every row it is asked to score."""

    def __init__(self, inner: FlowClassifier) -> None:
        self.inner = inner
        self.model = inner.model
        self.codec = inner.codec
        self.rows_scored = 0

    def proba_raw(self, raw: np.ndarray) -> np.ndarray:
        self.rows_scored += np.atleast_2d(raw).shape[0]
        return self.inner.proba_raw(raw)

    def decide_raw(self, raw: np.ndarray) -> np.ndarray:
        self.rows_scored += np.atleast_2d(raw).shape[0]
        return self.inner.decide_raw(raw)

    def proba_flows(self, flows) -> np.ndarray:
        self.rows_scored += len(flows)
        return self.inner.proba_flows(flows)

    def decide_flows(self, flows) -> np.ndarray:
        self.rows_scored += len(flows)
        return self.inner.decide_flows(flows)

    def resident_bytes(self) -> int:
        return self.inner.resident_bytes()


@pytest.fixture
def fake_redis() -> FakeRedis:
    return FakeRedis()


@pytest.fixture(scope="session")
def corpus():
    return generate_synthetic(3000, seed=3)


@pytest.fixture(scope="session")
def split(corpus):
    return partition(corpus, (0.4, 0.4, 0.2), seed=7)


@pytest.fixture(scope="session")
def victim_codec(split):
    return fit_codec(split.victim_set)


@pytest.fixture(scope="session")
def adversary_codec(split):
    return fit_codec(split.train_set)


@pytest.fixture(scope="session")
def lr_victim(split, victim_codec):
    model = train_model(
        "LR",
        victim_codec.encode_flows(split.victim_set),
        labels_of(split.victim_set),
        seed=11,
        codec_id=victim_codec.codec_id,
    )
    return FlowClassifier(model, victim_codec)


@pytest.fixture(scope="session")
def mlp_surrogate(split, adversary_codec, lr_victim):
    labels = lr_victim.decide_flows(split.train_set)
    model = train_model(
        "MLP",
        adversary_codec.encode_flows(split.train_set),
        labels,
        {"hidden_layer_sizes": (32, 32), "max_iter": 40},
        seed=13,
        codec_id=adversary_codec.codec_id,
    )
    return FlowClassifier(model, adversary_codec)


@pytest.fixture
def budget() -> BudgetSpec:
    return BudgetSpec(max_bytes=100_000, max_pkts=100, max_delay_ms=100_000, steps=10)


def gate_flow(in_bytes: int, label: int = 1) -> FlowRecord:
    return FlowRecord(
        protocol=6,
        l4_dst_port=80,
        l4_src_port=40000,
        tcp_flags=2,
        in_bytes=in_bytes,
        in_pkts=4,
        out_bytes=300,
        out_pkts=3,
        flow_duration=100.0,
        label=label,
        attack_name="DoS" if label else "",
    )


@pytest.fixture
def byte_gate() -> FlowClassifier:
    """Surrogate that calls a flow malicious until its inbound bytes pass roughly 300."""
    codec = fit_codec([gate_flow(0, label=0), gate_flow(100_000)])
    weights = np.zeros(codec.dim)
    weights[codec.numeric_index("IN_BYTES")] = -20.0
    return FlowClassifier(NidsModel.linear(weights, bias=10.0), codec)


@pytest.fixture
def make_gate_flow():
    return gate_flow
