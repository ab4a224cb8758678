"""NetFlow-v9 ingestion, two-step feature normalization, splits and attack taxonomy."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd


logger = logging.getLogger(__name__)

FEATURE_COLUMNS: Tuple[str, ...] = (
    "PROTOCOL",
    "L4_DST_PORT",
    "L4_SRC_PORT",
    "TCP_FLAGS",
    "IN_BYTES",
    "IN_PKTS",
    "OUT_BYTES",
    "OUT_PKTS",
    "FLOW_DURATION_MILLISECONDS",
)
LABEL_COLUMN = "Label"
ATTACK_COLUMN = "Attack"
COLUMN_INDEX: Dict[str, int] = {name: position for position, name in enumerate(FEATURE_COLUMNS)}

CATEGORICAL_FEATURES: Tuple[str, ...] = ("PROTOCOL", "L4_DST_PORT", "L4_SRC_PORT", "TCP_FLAGS")
NUMERIC_FEATURES: Tuple[str, ...] = ("IN_BYTES", "IN_PKTS", "OUT_BYTES", "OUT_PKTS", "FLOW_DURATION_MILLISECONDS")
PORT_FEATURES: Tuple[str, ...] = ("L4_DST_PORT", "L4_SRC_PORT")

# The adversary only sees what enters the victim network.
OBSERVED_CATEGORICALS: Tuple[str, ...] = ("PROTOCOL", "L4_DST_PORT")
OBSERVED_NUMERICS: Tuple[str, ...] = ("IN_BYTES", "IN_PKTS")

DEFAULT_TOP_K_PORTS = 512
CODEC_FORMAT_VERSION = 1
MAX_PORT = 65_535
BENIGN_ATTACK_TAGS = frozenset({"", "benign", "normal"})

_FIELD_BY_COLUMN: Dict[str, str] = {
    "PROTOCOL": "protocol",
    "L4_DST_PORT": "l4_dst_port",
    "L4_SRC_PORT": "l4_src_port",
    "TCP_FLAGS": "tcp_flags",
    "IN_BYTES": "in_bytes",
    "IN_PKTS": "in_pkts",
    "OUT_BYTES": "out_bytes",
    "OUT_PKTS": "out_pkts",
    "FLOW_DURATION_MILLISECONDS": "flow_duration",
}
DEFAULT_SCHEMA: Dict[str, str] = {column: column for column in FEATURE_COLUMNS + (LABEL_COLUMN, ATTACK_COLUMN)}


# ----------------------------------------------------------------------
# Errors
# ----------------------------------------------------------------------
class FlowDataError(Exception):
    """Base class for ingestion, encoding and split failures."""


class MissingColumn(FlowDataError):
    def __init__(self, column: str) -> None:
        super().__init__(f"required column {column!r} is missing from the header")
        self.column = column


class MalformedRow(FlowDataError):
    def __init__(self, index: int, reason: str) -> None:
        super().__init__(f"row {index}: {reason}")
        self.index = index
        self.reason = reason


class EmptyDataset(FlowDataError):
    """Raised when no usable flows remain."""


class InsufficientClassSamples(FlowDataError):
    """Raised when a class cannot populate every split partition."""


# ----------------------------------------------------------------------
# Records
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class FlowRecord:
    """One bidirectional flow, ingress fields first, with its ground-truth label."""

    protocol: int
    l4_dst_port: int
    l4_src_port: int
    tcp_flags: int
    in_bytes: int
    in_pkts: int
    out_bytes: int
    out_pkts: int
    flow_duration: float
    label: int = 0
    attack_name: str = ""

    def __post_init__(self) -> None:
        for column in FEATURE_COLUMNS:
            value = getattr(self, _FIELD_BY_COLUMN[column])
            if not math.isfinite(value):
                raise ValueError(f"{column} must be finite, got {value}")
            if value < 0:
                raise ValueError(f"{column} must be non-negative, got {value}")
        for column in PORT_FEATURES:
            if getattr(self, _FIELD_BY_COLUMN[column]) > MAX_PORT:
                raise ValueError(f"{column} exceeds {MAX_PORT}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if (self.label == 1) != bool(self.attack_name):
            raise ValueError("attack_name must be set exactly when label is 1")

    @property
    def is_malicious(self) -> bool:
        return self.label == 1

    def feature_vector(self) -> np.ndarray:
        return np.array([getattr(self, _FIELD_BY_COLUMN[c]) for c in FEATURE_COLUMNS], dtype=np.float64)

    def with_features(self, raw: Sequence[float]) -> "FlowRecord":
        """Copy with features replaced from a raw vector in ``FEATURE_COLUMNS`` order."""
        updates: Dict[str, Any] = {}
        for column, value in zip(FEATURE_COLUMNS, raw):
            name = _FIELD_BY_COLUMN[column]
            updates[name] = float(value) if name == "flow_duration" else int(round(float(value)))
        return replace(self, **updates)


def flows_to_matrix(flows: Sequence[FlowRecord]) -> np.ndarray:
    if not flows:
        return np.zeros((0, len(FEATURE_COLUMNS)), dtype=np.float64)
    return np.array(
        [
            (
                f.protocol,
                f.l4_dst_port,
                f.l4_src_port,
                f.tcp_flags,
                f.in_bytes,
                f.in_pkts,
                f.out_bytes,
                f.out_pkts,
                f.flow_duration,
            )
            for f in flows
        ],
        dtype=np.float64,
    )


def labels_of(flows: Sequence[FlowRecord]) -> np.ndarray:
    return np.fromiter((f.label for f in flows), dtype=np.int64, count=len(flows))


# ----------------------------------------------------------------------
# Loading
# ----------------------------------------------------------------------
@dataclass
class LoadReport:
    flows: List[FlowRecord]
    accepted: int
    rejected: int
    errors: List[MalformedRow] = field(default_factory=list)


def _normalize_attack(attack: str) -> str:
    return "" if attack.strip().casefold() in BENIGN_ATTACK_TAGS else attack.strip()


def _row_to_flow(index: int, numeric: Mapping[str, np.ndarray], attacks: Sequence[str]) -> FlowRecord:
    values: Dict[str, Any] = {}
    for column in FEATURE_COLUMNS:
        value = numeric[column][index]
        if not math.isfinite(value):
            raise MalformedRow(index, f"{column} is not numeric")
        if value < 0:
            raise MalformedRow(index, f"{column} is negative ({value:g})")
        name = _FIELD_BY_COLUMN[column]
        if name == "flow_duration":
            values[name] = float(value)
            continue
        if value != math.floor(value):
            raise MalformedRow(index, f"{column} must be an integer, got {value:g}")
        values[name] = int(value)

    label_value = numeric[LABEL_COLUMN][index]
    if label_value not in (0.0, 1.0):
        raise MalformedRow(index, f"{LABEL_COLUMN} must be 0 or 1")
    label = int(label_value)
    attack = _normalize_attack(attacks[index])
    if label == 1 and not attack:
        raise MalformedRow(index, "malicious row carries no attack name")
    if label == 0 and attack:
        raise MalformedRow(index, f"benign row carries attack name {attack!r}")
    try:
        return FlowRecord(label=label, attack_name=attack, **values)
    except ValueError as exc:
        raise MalformedRow(index, str(exc)) from exc


def load_netflow(
    path: Union[str, Path],
    schema: Optional[Mapping[str, str]] = None,
    *,
    strict: bool = False,
) -> LoadReport:
    """Parse a NetFlow-v9 CSV export.

    ``schema`` maps canonical column names to the header names used in the
    file. Malformed rows are collected on the report and skipped unless
    ``strict`` is set, in which case the first one is raised.
    """
    csv_path = Path(path)
    if not csv_path.exists():
        raise FileNotFoundError(f"NetFlow export not found at {csv_path}.")
    mapping = {**DEFAULT_SCHEMA, **(schema or {})}

    frame = pd.read_csv(csv_path, dtype=str, keep_default_na=False, encoding="utf-8")
    frame.columns = [str(c).strip() for c in frame.columns]
    for canonical in FEATURE_COLUMNS + (LABEL_COLUMN, ATTACK_COLUMN):
        if mapping[canonical] not in frame.columns:
            raise MissingColumn(mapping[canonical])

    numeric = {
        canonical: pd.to_numeric(frame[mapping[canonical]].str.strip(), errors="coerce").to_numpy(dtype=np.float64)
        for canonical in FEATURE_COLUMNS + (LABEL_COLUMN,)
    }
    attacks = frame[mapping[ATTACK_COLUMN]].tolist()

    flows: List[FlowRecord] = []
    errors: List[MalformedRow] = []
    for index in range(len(frame)):
        try:
            flows.append(_row_to_flow(index, numeric, attacks))
        except MalformedRow as exc:
            if strict:
                raise
            errors.append(exc)

    logger.info("Loaded %s: %d accepted, %d rejected", csv_path, len(flows), len(errors))
    if not flows:
        raise EmptyDataset(f"no valid flows in {csv_path}")
    return LoadReport(flows=flows, accepted=len(flows), rejected=len(errors), errors=errors)


def write_netflow(flows: Sequence[FlowRecord], path: Union[str, Path]) -> Path:
    """Write flows in the canonical NetFlow-v9 column layout."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(flows_to_matrix(flows), columns=list(FEATURE_COLUMNS))
    for column in FEATURE_COLUMNS:
        if column != "FLOW_DURATION_MILLISECONDS":
            frame[column] = frame[column].astype(np.int64)
    frame[LABEL_COLUMN] = labels_of(flows)
    frame[ATTACK_COLUMN] = [f.attack_name or "Benign" for f in flows]
    frame.to_csv(target, index=False)
    return target


# ----------------------------------------------------------------------
# Feature codec
# ----------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class FeatureCodec:
    """Two-step normalization fitted on one split and applied to all others.

    Numeric features go through ``log1p`` then min-max scaling into [0, 1]
    (values outside the fitted range are clamped, a constant feature maps to
    0). Categorical features are one-hot encoded over a retained vocabulary
    plus a trailing "other" slot; ports keep the ``top_k_ports`` most
    frequent values.

    The encoded layout is the numeric block in ``NUMERIC_FEATURES`` order
    followed by one block per entry of ``CATEGORICAL_FEATURES``.
    """

    numeric_ranges: Mapping[str, Tuple[float, float]]
    vocabularies: Mapping[str, Tuple[int, ...]]
    top_k_ports: int = DEFAULT_TOP_K_PORTS
    _slices: Dict[str, slice] = field(init=False, repr=False)
    _lookups: Dict[str, Dict[int, int]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        slices: Dict[str, slice] = {}
        offset = 0
        for name in NUMERIC_FEATURES:
            slices[name] = slice(offset, offset + 1)
            offset += 1
        lookups: Dict[str, Dict[int, int]] = {}
        for name in CATEGORICAL_FEATURES:
            vocabulary = tuple(int(v) for v in self.vocabularies[name])
            lookups[name] = {value: position for position, value in enumerate(vocabulary)}
            slices[name] = slice(offset, offset + len(vocabulary) + 1)
            offset += len(vocabulary) + 1
        object.__setattr__(self, "_slices", slices)
        object.__setattr__(self, "_lookups", lookups)

    @property
    def dim(self) -> int:
        return self._slices[CATEGORICAL_FEATURES[-1]].stop

    def feature_slice(self, name: str) -> slice:
        return self._slices[name]

    @property
    def observation_indices(self) -> np.ndarray:
        indices: List[int] = []
        for name in OBSERVED_NUMERICS + OBSERVED_CATEGORICALS:
            indices.extend(range(self._slices[name].start, self._slices[name].stop))
        return np.array(sorted(indices), dtype=np.int64)

    @property
    def observation_dim(self) -> int:
        """Observed encoded features plus the episode progress channel."""
        return len(self.observation_indices) + 1

    def numeric_index(self, name: str) -> int:
        return self._slices[name].start

    # -- encoding --------------------------------------------------------
    def encode_matrix(self, raw: np.ndarray) -> np.ndarray:
        raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
        if raw.shape[1] != len(FEATURE_COLUMNS):
            raise ValueError(f"expected {len(FEATURE_COLUMNS)} raw features, got {raw.shape[1]}")
        n = raw.shape[0]
        encoded = np.zeros((n, self.dim), dtype=np.float64)
        for name in NUMERIC_FEATURES:
            encoded[:, self._slices[name].start] = self.scale_numeric(name, raw[:, COLUMN_INDEX[name]])
        rows = np.arange(n)
        for name in CATEGORICAL_FEATURES:
            lookup = self._lookups[name]
            other = len(lookup)
            slots = np.fromiter(
                (lookup.get(int(v), other) for v in raw[:, COLUMN_INDEX[name]]), dtype=np.int64, count=n
            )
            encoded[rows, self._slices[name].start + slots] = 1.0
        return encoded

    def encode(self, flow: FlowRecord) -> np.ndarray:
        return self.encode_matrix(flow.feature_vector()[None, :])[0]

    def encode_flows(self, flows: Sequence[FlowRecord]) -> np.ndarray:
        if not flows:
            return np.zeros((0, self.dim), dtype=np.float64)
        return self.encode_matrix(flows_to_matrix(flows))

    def scale_numeric(self, name: str, values: np.ndarray) -> np.ndarray:
        low, high = self.numeric_ranges[name]
        logged = np.log1p(np.maximum(np.asarray(values, dtype=np.float64), 0.0))
        span = high - low
        if span <= 0:
            return np.zeros_like(logged)
        return np.clip((logged - low) / span, 0.0, 1.0)

    def unscale_numeric(self, name: str, scaled: np.ndarray, *, clamp: bool = True) -> np.ndarray:
        """Invert the log1p + min-max scaling; ``clamp=False`` extrapolates past the fitted range."""
        low, high = self.numeric_ranges[name]
        scaled = np.asarray(scaled, dtype=np.float64)
        scaled = np.clip(scaled, 0.0, 1.0) if clamp else np.maximum(scaled, 0.0)
        return np.expm1(low + scaled * (high - low))

    def decode(self, vector: np.ndarray, template: Optional[FlowRecord] = None) -> FlowRecord:
        """Invert an encoded vector back to raw features.

        The "other" slot has no unique raw value, so it takes the template's
        value for that feature and fails without a template.
        """
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.dim,):
            raise ValueError(f"expected an encoded vector of length {self.dim}, got {vector.shape}")
        raw = np.zeros(len(FEATURE_COLUMNS), dtype=np.float64)
        for name in NUMERIC_FEATURES:
            value = float(self.unscale_numeric(name, vector[self._slices[name].start]))
            if name != "FLOW_DURATION_MILLISECONDS":
                value = float(round(value))
            raw[COLUMN_INDEX[name]] = value
        for name in CATEGORICAL_FEATURES:
            block = vector[self._slices[name]]
            slot = int(np.argmax(block))
            vocabulary = self.vocabularies[name]
            if slot < len(vocabulary):
                raw[COLUMN_INDEX[name]] = vocabulary[slot]
            elif template is not None:
                raw[COLUMN_INDEX[name]] = template.feature_vector()[COLUMN_INDEX[name]]
            else:
                raise ValueError(f"{name} decodes to the 'other' bucket; a template flow is required")
        base = template or FlowRecord(*([0] * len(FEATURE_COLUMNS)))
        return base.with_features(raw)

    # -- persistence -----------------------------------------------------
    def to_dict(self) -> Dict[str, Any]:
        return {
            "format_version": CODEC_FORMAT_VERSION,
            "top_k_ports": self.top_k_ports,
            "numeric_ranges": {k: [float(lo), float(hi)] for k, (lo, hi) in self.numeric_ranges.items()},
            "vocabularies": {k: [int(v) for v in vocab] for k, vocab in self.vocabularies.items()},
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "FeatureCodec":
        version = payload.get("format_version")
        if version != CODEC_FORMAT_VERSION:
            raise FlowDataError(f"unsupported codec format version {version!r}")
        return cls(
            numeric_ranges={k: (float(v[0]), float(v[1])) for k, v in payload["numeric_ranges"].items()},
            vocabularies={k: tuple(int(x) for x in v) for k, v in payload["vocabularies"].items()},
            top_k_ports=int(payload["top_k_ports"]),
        )

    @property
    def codec_id(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, FeatureCodec) and self.to_dict() == other.to_dict()

    def __hash__(self) -> int:
        return hash(self.codec_id)


def _ranked_vocabulary(values: np.ndarray, limit: Optional[int]) -> Tuple[int, ...]:
    uniques, counts = np.unique(values.astype(np.int64), return_counts=True)
    if limit is None:
        return tuple(int(v) for v in uniques)
    # Most frequent first; ties go to the smaller value.
    order = np.lexsort((uniques, -counts))
    return tuple(int(v) for v in uniques[order][:limit])


def fit_codec(train_set: Sequence[FlowRecord], top_k_ports: int = DEFAULT_TOP_K_PORTS) -> FeatureCodec:
    if not train_set:
        raise EmptyDataset("cannot fit a codec on an empty split")
    if top_k_ports < 1:
        raise ValueError("top_k_ports must be at least 1")
    raw = flows_to_matrix(train_set)
    ranges: Dict[str, Tuple[float, float]] = {}
    for name in NUMERIC_FEATURES:
        logged = np.log1p(raw[:, COLUMN_INDEX[name]])
        ranges[name] = (float(logged.min()), float(logged.max()))
    vocabularies = {
        name: _ranked_vocabulary(raw[:, COLUMN_INDEX[name]], top_k_ports if name in PORT_FEATURES else None)
        for name in CATEGORICAL_FEATURES
    }
    codec = FeatureCodec(numeric_ranges=ranges, vocabularies=vocabularies, top_k_ports=top_k_ports)
    logger.debug("Fitted codec %s with %d encoded dimensions", codec.codec_id, codec.dim)
    return codec


def save_codec(codec: FeatureCodec, path: Union[str, Path]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(codec.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    return target


def load_codec(path: Union[str, Path]) -> FeatureCodec:
    return FeatureCodec.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ----------------------------------------------------------------------
# Splits
# ----------------------------------------------------------------------
SPLIT_NAMES = ("victim", "train", "test")


@dataclass(frozen=True)
class DataSplit:
    """Disjoint victim/train/test partitions of one corpus."""

    victim_set: Tuple[FlowRecord, ...]
    train_set: Tuple[FlowRecord, ...]
    test_set: Tuple[FlowRecord, ...]
    seed: int = 0

    def parts(self) -> Dict[str, Tuple[FlowRecord, ...]]:
        return dict(zip(SPLIT_NAMES, (self.victim_set, self.train_set, self.test_set)))


def _allocate(count: int, fractions: Sequence[float]) -> List[int]:
    exact = [count * f for f in fractions]
    sizes = [int(math.floor(x)) for x in exact]
    remainder = count - sum(sizes)
    order = sorted(range(len(fractions)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[:remainder]:
        sizes[i] += 1
    return sizes


def partition(flows: Sequence[FlowRecord], fractions: Sequence[float] = (0.4, 0.4, 0.2), seed: int = 0) -> DataSplit:
    """Stratified, seeded three-way split; every part receives both classes."""
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise FlowDataError("fractions must be three positive numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise FlowDataError(f"fractions must sum to 1, got {sum(fractions)}")
    if not flows:
        raise EmptyDataset("cannot partition an empty corpus")

    labels = labels_of(flows)
    rng = np.random.default_rng(seed)
    buckets: List[List[int]] = [[], [], []]
    for label in (0, 1):
        members = np.flatnonzero(labels == label)
        sizes = _allocate(len(members), fractions)
        if min(sizes) < 1:
            name = "benign" if label == 0 else "malicious"
            raise InsufficientClassSamples(
                f"{len(members)} {name} flow(s) cannot populate all three partitions"
            )
        shuffled = rng.permutation(members)
        start = 0
        for bucket, size in zip(buckets, sizes):
            bucket.extend(shuffled[start : start + size].tolist())
            start += size

    parts = [tuple(flows[i] for i in sorted(bucket)) for bucket in buckets]
    logger.info("Partitioned %d flows into %s", len(flows), [len(p) for p in parts])
    return DataSplit(victim_set=parts[0], train_set=parts[1], test_set=parts[2], seed=seed)


# ----------------------------------------------------------------------
# Attack taxonomy
# ----------------------------------------------------------------------
class AttackCategory(str, Enum):
    DENIAL_OF_SERVICE = "DenialOfService"
    DISCOVERY_RECON = "DiscoveryRecon"
    ACCESS_AUTH = "AccessAuth"
    EXPLOIT_INJECT = "ExploitInject"
    MALWARE_PERSIST = "MalwarePersist"
    NETWORK_OTHER = "NetworkOther"


CATEGORY_MEMBERS: Dict[AttackCategory, Tuple[str, ...]] = {
    AttackCategory.DENIAL_OF_SERVICE: ("DoS", "DDoS"),
    AttackCategory.DISCOVERY_RECON: ("Scanning", "Reconnaissance", "Analysis"),
    AttackCategory.ACCESS_AUTH: ("Brute Force", "Password", "Theft"),
    AttackCategory.EXPLOIT_INJECT: ("Injection", "XSS", "Exploits", "Fuzzers"),
    AttackCategory.MALWARE_PERSIST: ("Backdoor", "Bot", "Worms", "Ransomware", "Shellcode"),
    AttackCategory.NETWORK_OTHER: ("MITM", "Infiltration", "Generic"),
}

_EXACT_CATEGORY: Dict[str, AttackCategory] = {}
for _category, _members in CATEGORY_MEMBERS.items():
    for _member in _members:
        _EXACT_CATEGORY["".join(ch for ch in _member.casefold() if ch.isalnum())] = _category

# Ordered fragment rules for vendor spellings such as "DoS attacks-Hulk".
_FRAGMENT_RULES: Tuple[Tuple[str, AttackCategory], ...] = (
    ("xss", AttackCategory.EXPLOIT_INJECT),
    ("injection", AttackCategory.EXPLOIT_INJECT),
    ("exploit", AttackCategory.EXPLOIT_INJECT),
    ("ddos", AttackCategory.DENIAL_OF_SERVICE),
    ("dos", AttackCategory.DENIAL_OF_SERVICE),
    ("bruteforce", AttackCategory.ACCESS_AUTH),
    ("password", AttackCategory.ACCESS_AUTH),
    ("scan", AttackCategory.DISCOVERY_RECON),
    ("recon", AttackCategory.DISCOVERY_RECON),
    ("backdoor", AttackCategory.MALWARE_PERSIST),
    ("bot", AttackCategory.MALWARE_PERSIST),
    ("ransom", AttackCategory.MALWARE_PERSIST),
)


def categorize(attack_name: str) -> AttackCategory:
    """Map a raw attack name onto the six-way taxonomy; unknown names fall to NetworkOther."""
    key = "".join(ch for ch in attack_name.casefold() if ch.isalnum())
    if key in _EXACT_CATEGORY:
        return _EXACT_CATEGORY[key]
    for fragment, category in _FRAGMENT_RULES:
        if fragment in key:
            return category
    return AttackCategory.NETWORK_OTHER


# ----------------------------------------------------------------------
# Synthetic corpora
# ----------------------------------------------------------------------
Weighted = Tuple[Tuple[int, float], ...]


@dataclass(frozen=True)
class _FamilyShape:
    """Log-normal traffic family; pairs are (median, sigma)."""

    protocols: Weighted
    dst_ports: Optional[Weighted]
    tcp_flags: Weighted
    in_pkts: Tuple[float, float]
    in_pkt_size: Tuple[float, float]
    out_pkt_ratio: Tuple[float, float]
    out_pkt_size: Tuple[float, float]
    duration_ms: Tuple[float, float]


_BENIGN_FLAGS: Weighted = ((27, 0.55), (31, 0.2), (26, 0.15), (30, 0.1))

_ATTACK_SHAPES: Dict[AttackCategory, _FamilyShape] = {
    # Small packets in short bursts; detectable only through mutable volume features.
    AttackCategory.DENIAL_OF_SERVICE: _FamilyShape(
        protocols=((6, 0.75), (17, 0.25)),
        dst_ports=((80, 0.5), (443, 0.4), (53, 0.1)),
        tcp_flags=_BENIGN_FLAGS,
        in_pkts=(40.0, 0.6),
        in_pkt_size=(60.0, 0.2),
        out_pkt_ratio=(0.7, 0.8),
        out_pkt_size=(650.0, 0.7),
        duration_ms=(50.0, 0.8),
    ),
    AttackCategory.DISCOVERY_RECON: _FamilyShape(
        protocols=((6, 1.0),),
        dst_ports=None,
        tcp_flags=((2, 0.7), (20, 0.3)),
        in_pkts=(1.5, 0.3),
        in_pkt_size=(44.0, 0.05),
        out_pkt_ratio=(0.5, 0.5),
        out_pkt_size=(40.0, 0.1),
        duration_ms=(2.0, 1.0),
    ),
    AttackCategory.ACCESS_AUTH: _FamilyShape(
        protocols=((6, 1.0),),
        dst_ports=((22, 0.45), (21, 0.25), (3389, 0.2), (445, 0.1)),
        tcp_flags=_BENIGN_FLAGS,
        in_pkts=(14.0, 0.3),
        in_pkt_size=(90.0, 0.2),
        out_pkt_ratio=(1.0, 0.3),
        out_pkt_size=(400.0, 0.6),
        duration_ms=(600.0, 0.5),
    ),
    AttackCategory.EXPLOIT_INJECT: _FamilyShape(
        protocols=((6, 1.0),),
        dst_ports=((80, 0.5), (443, 0.3), (8080, 0.2)),
        tcp_flags=((27, 0.5), (24, 0.5)),
        in_pkts=(6.0, 0.5),
        in_pkt_size=(1200.0, 0.2),
        out_pkt_ratio=(1.0, 0.4),
        out_pkt_size=(600.0, 0.6),
        duration_ms=(300.0, 0.8),
    ),
    # Port and flag signatures carry the detection; volume mimics benign traffic.
    AttackCategory.MALWARE_PERSIST: _FamilyShape(
        protocols=((6, 1.0),),
        dst_ports=((4444, 0.35), (6667, 0.3), (31337, 0.2), (1337, 0.15)),
        tcp_flags=((24, 0.5), (17, 0.3), (25, 0.2)),
        in_pkts=(12.0, 1.0),
        in_pkt_size=(350.0, 0.5),
        out_pkt_ratio=(1.1, 0.3),
        out_pkt_size=(700.0, 0.7),
        duration_ms=(4000.0, 1.0),
    ),
    AttackCategory.NETWORK_OTHER: _FamilyShape(
        protocols=((17, 0.6), (6, 0.4)),
        dst_ports=((53, 0.4), (445, 0.3), (139, 0.3)),
        tcp_flags=((0, 0.5), (27, 0.5)),
        in_pkts=(4.0, 0.5),
        in_pkt_size=(120.0, 0.4),
        out_pkt_ratio=(1.0, 0.5),
        out_pkt_size=(300.0, 0.5),
        duration_ms=(20.0, 1.0),
    ),
}

_NAME_WEIGHTS: Dict[AttackCategory, Tuple[Tuple[str, float], ...]] = {
    AttackCategory.DENIAL_OF_SERVICE: (("DDoS", 0.6), ("DoS", 0.4)),
    AttackCategory.DISCOVERY_RECON: (("Scanning", 0.5), ("Reconnaissance", 0.4), ("Analysis", 0.1)),
    AttackCategory.ACCESS_AUTH: (("Brute Force", 0.5), ("Password", 0.4), ("Theft", 0.1)),
    AttackCategory.EXPLOIT_INJECT: (("Injection", 0.3), ("XSS", 0.3), ("Exploits", 0.3), ("Fuzzers", 0.1)),
    AttackCategory.MALWARE_PERSIST: (
        ("Backdoor", 0.4),
        ("Bot", 0.3),
        ("Worms", 0.1),
        ("Ransomware", 0.1),
        ("Shellcode", 0.1),
    ),
    AttackCategory.NETWORK_OTHER: (("Infiltration", 0.4), ("MITM", 0.3), ("Generic", 0.3)),
}


@dataclass(frozen=True)
class SyntheticProfile:
    name: str
    benign_fraction: float
    category_mix: Mapping[AttackCategory, float]
    benign: _FamilyShape


SYNTHETIC_PROFILES: Dict[str, SyntheticProfile] = {
    "enterprise": SyntheticProfile(
        name="enterprise",
        benign_fraction=0.6,
        category_mix={
            AttackCategory.DENIAL_OF_SERVICE: 0.35,
            AttackCategory.DISCOVERY_RECON: 0.15,
            AttackCategory.ACCESS_AUTH: 0.15,
            AttackCategory.EXPLOIT_INJECT: 0.15,
            AttackCategory.MALWARE_PERSIST: 0.15,
            AttackCategory.NETWORK_OTHER: 0.05,
        },
        benign=_FamilyShape(
            protocols=((6, 0.8), (17, 0.18), (1, 0.02)),
            dst_ports=(
                (443, 0.45),
                (80, 0.2),
                (53, 0.12),
                (22, 0.04),
                (25, 0.04),
                (993, 0.04),
                (3306, 0.04),
                (8080, 0.04),
                (123, 0.03),
            ),
            tcp_flags=_BENIGN_FLAGS,
            in_pkts=(12.0, 1.0),
            in_pkt_size=(350.0, 0.5),
            out_pkt_ratio=(1.1, 0.3),
            out_pkt_size=(700.0, 0.7),
            duration_ms=(4000.0, 1.0),
        ),
    ),
    "iot": SyntheticProfile(
        name="iot",
        benign_fraction=0.4,
        category_mix={
            AttackCategory.DENIAL_OF_SERVICE: 0.5,
            AttackCategory.DISCOVERY_RECON: 0.35,
            AttackCategory.EXPLOIT_INJECT: 0.05,
            AttackCategory.ACCESS_AUTH: 0.05,
            AttackCategory.MALWARE_PERSIST: 0.03,
            AttackCategory.NETWORK_OTHER: 0.02,
        },
        benign=_FamilyShape(
            protocols=((6, 0.5), (17, 0.5)),
            dst_ports=((1883, 0.35), (5683, 0.2), (8883, 0.15), (80, 0.1), (443, 0.1), (53, 0.1)),
            tcp_flags=_BENIGN_FLAGS,
            in_pkts=(6.0, 0.8),
            in_pkt_size=(150.0, 0.5),
            out_pkt_ratio=(1.0, 0.4),
            out_pkt_size=(120.0, 0.5),
            duration_ms=(1500.0, 1.0),
        ),
    ),
}


def _choice(rng: np.random.Generator, weighted: Weighted, size: int) -> np.ndarray:
    values = np.array([v for v, _ in weighted], dtype=np.int64)
    weights = np.array([w for _, w in weighted], dtype=np.float64)
    return rng.choice(values, size=size, p=weights / weights.sum())


def _lognormal(rng: np.random.Generator, shape: Tuple[float, float], size: int) -> np.ndarray:
    median, sigma = shape
    return rng.lognormal(mean=math.log(median), sigma=sigma, size=size)


def _sample_family(shape: _FamilyShape, size: int, rng: np.random.Generator) -> np.ndarray:
    raw = np.zeros((size, len(FEATURE_COLUMNS)), dtype=np.float64)
    protocol = _choice(rng, shape.protocols, size)
    raw[:, COLUMN_INDEX["PROTOCOL"]] = protocol
    if shape.dst_ports is None:
        raw[:, COLUMN_INDEX["L4_DST_PORT"]] = rng.integers(1, 10_000, size=size)
    else:
        raw[:, COLUMN_INDEX["L4_DST_PORT"]] = _choice(rng, shape.dst_ports, size)
    raw[:, COLUMN_INDEX["L4_SRC_PORT"]] = rng.integers(1024, MAX_PORT + 1, size=size)
    flags = _choice(rng, shape.tcp_flags, size)
    raw[:, COLUMN_INDEX["TCP_FLAGS"]] = np.where(protocol == 6, flags, 0)

    in_pkts = np.maximum(1.0, np.round(_lognormal(rng, shape.in_pkts, size)))
    out_pkts = np.round(in_pkts * _lognormal(rng, shape.out_pkt_ratio, size))
    raw[:, COLUMN_INDEX["IN_PKTS"]] = in_pkts
    raw[:, COLUMN_INDEX["IN_BYTES"]] = np.round(in_pkts * _lognormal(rng, shape.in_pkt_size, size))
    raw[:, COLUMN_INDEX["OUT_PKTS"]] = out_pkts
    raw[:, COLUMN_INDEX["OUT_BYTES"]] = np.round(out_pkts * _lognormal(rng, shape.out_pkt_size, size))
    raw[:, COLUMN_INDEX["FLOW_DURATION_MILLISECONDS"]] = np.round(_lognormal(rng, shape.duration_ms, size))
    return raw


def _resolve_profile(
    profile: Union[str, Mapping[str, float]], benign_fraction: Optional[float]
) -> SyntheticProfile:
    if isinstance(profile, str):
        if profile not in SYNTHETIC_PROFILES:
            raise FlowDataError(f"unknown synthetic profile {profile!r}; expected one of {sorted(SYNTHETIC_PROFILES)}")
        resolved = SYNTHETIC_PROFILES[profile]
    else:
        try:
            mix = {AttackCategory(name): float(weight) for name, weight in profile.items()}
        except ValueError as exc:
            raise FlowDataError(f"unknown attack category in mix: {exc}") from exc
        if not mix or any(w < 0 for w in mix.values()) or sum(mix.values()) <= 0:
            raise FlowDataError("a custom mix needs non-negative weights with a positive total")
        resolved = replace(SYNTHETIC_PROFILES["enterprise"], name="custom", category_mix=mix)
    if benign_fraction is not None:
        if not 0.0 < benign_fraction < 1.0:
            raise FlowDataError("benign_fraction must lie strictly between 0 and 1")
        resolved = replace(resolved, benign_fraction=benign_fraction)
    return resolved


def generate_synthetic(
    n: int,
    seed: int,
    profile: Union[str, Mapping[str, float]] = "enterprise",
    *,
    benign_fraction: Optional[float] = None,
) -> List[FlowRecord]:
    """Draw ``n`` labeled flows from per-category traffic families.

    Identical arguments produce identical output.
    """
    if n <= 0:
        raise FlowDataError(f"n must be positive, got {n}")
    resolved = _resolve_profile(profile, benign_fraction)
    rng = np.random.default_rng(seed)

    n_benign = int(round(n * resolved.benign_fraction))
    categories = [c for c, w in resolved.category_mix.items() if w > 0]
    weights = np.array([resolved.category_mix[c] for c in categories], dtype=np.float64)
    draws = rng.choice(len(categories), size=n - n_benign, p=weights / weights.sum())

    blocks: List[np.ndarray] = [_sample_family(resolved.benign, n_benign, rng)]
    names: List[str] = [""] * n_benign
    for position, category in enumerate(categories):
        count = int((draws == position).sum())
        if count == 0:
            continue
        blocks.append(_sample_family(_ATTACK_SHAPES[category], count, rng))
        options = _NAME_WEIGHTS[category]
        picks = rng.choice(len(options), size=count, p=np.array([w for _, w in options]) / sum(w for _, w in options))
        names.extend(options[i][0] for i in picks)

    raw = np.vstack(blocks)
    order = rng.permutation(n)
    flows: List[FlowRecord] = []
    template = FlowRecord(*([0] * len(FEATURE_COLUMNS)))
    for row in order:
        name = names[row]
        flows.append(replace(template, label=1 if name else 0, attack_name=name).with_features(raw[row]))
    logger.info("Generated %d synthetic flows (%s profile, seed %d)", n, resolved.name, seed)
    return flows


__all__ = [
    "FEATURE_COLUMNS",
    "LABEL_COLUMN",
    "ATTACK_COLUMN",
    "COLUMN_INDEX",
    "NUMERIC_FEATURES",
    "CATEGORICAL_FEATURES",
    "FlowDataError",
    "MissingColumn",
    "MalformedRow",
    "EmptyDataset",
    "InsufficientClassSamples",
    "FlowRecord",
    "LoadReport",
    "load_netflow",
    "write_netflow",
    "flows_to_matrix",
    "labels_of",
    "FeatureCodec",
    "fit_codec",
    "save_codec",
    "load_codec",
    "DataSplit",
    "partition",
    "AttackCategory",
    "CATEGORY_MEMBERS",
    "categorize",
    "SyntheticProfile",
    "SYNTHETIC_PROFILES",
    "generate_synthetic",
]
