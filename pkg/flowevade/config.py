from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union, get_args, get_origin, get_type_hints

from dotenv import load_dotenv


PROJECT_ROOT = Path(__file__).resolve().parents[1]
DEFAULT_OUTPUT_DIR = PROJECT_ROOT / "runs"
DEFAULT_REDIS_URL = "redis://127.0.0.1:6379/0"
CONFIG_SCHEMA_VERSION = 1

MODEL_KINDS = ("LR", "MLP", "RF", "GBT")
ALGORITHMS = ("PPO", "A2C")
BENCH_TASKS = ("learning", "cost", "tradeoff", "sensitivity", "matrix", "data-efficiency")
FEATURE_GROUPS = ("bytes", "packets", "delay", "volume")
EXECUTORS = ("local", "rq")


class PipelineError(Exception):
    """Raised when a pipeline stage cannot run."""


class ConfigInvalid(PipelineError):
    """Raised when a pipeline configuration fails validation."""


@dataclass(frozen=True)
class Settings:
    """Process-level runtime configuration resolved from the environment."""

    output_dir: Optional[Path]
    threads: int
    redis_url: str


def _safe_int_env(var_name: str, default: int) -> int:
    value = os.getenv(var_name)
    if value is None:
        return default
    try:
        parsed = int(value)
    except ValueError:
        return default
    return parsed if parsed >= 0 else default


@lru_cache()
def get_settings() -> Settings:
    """Load env overrides (``.env`` included) for output location and thread count."""
    load_dotenv()
    output_dir = os.getenv("FLOWEVADE_OUTPUT_DIR")
    return Settings(
        output_dir=Path(output_dir) if output_dir else None,
        threads=max(1, _safe_int_env("FLOWEVADE_THREADS", 1)),
        redis_url=os.getenv("REDIS_URL", DEFAULT_REDIS_URL),
    )


def derive_seed(root_seed: int, *labels: Any) -> int:
    """Derive a stable 32-bit child seed from the root seed and a label path."""
    material = f"{int(root_seed)}:" + "/".join(str(label) for label in labels)
    return int(hashlib.sha256(material.encode("utf-8")).hexdigest()[:8], 16)


# ----------------------------------------------------------------------
# Declarative pipeline configuration
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 20_000
    seed: int = 1
    profile: str = "enterprise"
    mix: Optional[Dict[str, float]] = None
    benign_fraction: Optional[float] = None


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    path: Optional[str] = None
    schema: Dict[str, str] = field(default_factory=dict)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    ood_profile: str = "iot"


@dataclass(frozen=True)
class SplitConfig:
    fractions: Tuple[float, float, float] = (0.4, 0.4, 0.2)
    seed: int = 7


@dataclass(frozen=True)
class CodecConfig:
    top_k_ports: int = 512


@dataclass(frozen=True)
class ModelsConfig:
    victim_kind: str = "MLP"
    surrogate_kind: str = "MLP"
    gradient_surrogate_kind: str = "MLP"
    hyperparams: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    cross_validate: bool = False


@dataclass(frozen=True)
class BudgetConfig:
    max_bytes: int = 100_000
    max_pkts: int = 100
    max_delay_ms: int = 100_000
    steps: int = 10


@dataclass(frozen=True)
class AgentConfig:
    algorithm: str = "PPO"
    total_steps: int = 100_000
    n_envs: int = 8
    hidden: Tuple[int, ...] = (64, 64)
    rollout_steps: Optional[int] = None
    epochs: Optional[int] = None
    batch_size: Optional[int] = None
    learning_rate: Optional[float] = None
    gae_lambda: Optional[float] = None
    gamma: float = 0.99
    clip_ratio: float = 0.2
    ent_coef: float = 0.0


@dataclass(frozen=True)
class AttackConfig:
    query_cap: int = 1000
    pgd_steps: int = 100
    pgd_step_size: float = 0.05
    max_flows: int = 200


@dataclass(frozen=True)
class BenchConfig:
    tasks: Tuple[str, ...] = BENCH_TASKS
    executor: str = "local"
    total_steps: int = 20_000
    max_eval_flows: int = 300
    cost_flows: int = 50
    repetitions: int = 3
    algorithms: Tuple[str, ...] = ALGORITHMS
    learning_kinds: Tuple[str, ...] = MODEL_KINDS
    t_values: Tuple[int, ...] = (1, 10, 20, 40)
    budget_grid: Tuple[int, ...] = (0, 1, 10, 100, 1_000, 10_000, 100_000)
    feature_groups: Tuple[str, ...] = FEATURE_GROUPS
    grid_kinds: Tuple[str, ...] = ("LR", "MLP")
    data_sizes: Tuple[int, ...] = (10, 100, 1_000, 10_000, 100_000, 1_000_000)
    data_kinds: Tuple[str, ...] = ("LR", "MLP")
    oracle_stride: float = 0.1
    poll_seconds: float = 2.0


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    output_dir: Optional[str] = None
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    models: ModelsConfig = field(default_factory=ModelsConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def resolved_output_dir(self) -> Path:
        """Env override first, then the config value, then ``runs/``."""
        settings = get_settings()
        if settings.output_dir is not None:
            return settings.output_dir
        if self.output_dir:
            return Path(self.output_dir)
        return DEFAULT_OUTPUT_DIR

    def semantic_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload.pop("output_dir", None)
        payload["schema_version"] = CONFIG_SCHEMA_VERSION
        return payload

    def config_hash(self) -> str:
        canonical = json.dumps(self.semantic_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _coerce(hint: Any, value: Any, where: str) -> Any:
    origin = get_origin(hint)
    if hint is Any:
        return value
    if origin is None and isinstance(hint, type) and is_dataclass(hint):
        return _build(hint, value, where)
    if origin is Union:
        args = get_args(hint)
        if value is None and type(None) in args:
            return None
        inner = [arg for arg in args if arg is not type(None)]
        if len(inner) != 1:
            return value
        return _coerce(inner[0], value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigInvalid(f"{where}: expected a list, got {type(value).__name__}")
        args = get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], item, f"{where}[{i}]") for i, item in enumerate(value))
        if len(args) != len(value):
            raise ConfigInvalid(f"{where}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(arg, item, f"{where}[{i}]") for i, (arg, item) in enumerate(zip(args, value)))
    if origin is dict:
        if not isinstance(value, Mapping):
            raise ConfigInvalid(f"{where}: expected an object, got {type(value).__name__}")
        _, value_hint = get_args(hint) or (str, Any)
        return {str(key): _coerce(value_hint, item, f"{where}.{key}") for key, item in value.items()}
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigInvalid(f"{where}: expected true or false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigInvalid(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigInvalid(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigInvalid(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build(cls: type, raw: Any, where: str) -> Any:
    if not isinstance(raw, Mapping):
        raise ConfigInvalid(f"{where}: expected an object, got {type(raw).__name__}")
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigInvalid(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {name: _coerce(hints[name], raw[name], f"{where}.{name}") for name in raw}
    return cls(**kwargs)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigInvalid(message)


def validate_config(config: PipelineConfig) -> PipelineConfig:
    """Range and vocabulary checks run before any stage touches data."""
    data = config.data
    _require(data.source in ("synthetic", "csv"), f"data.source must be 'synthetic' or 'csv', got {data.source!r}")
    _require(data.source != "csv" or bool(data.path), "data.path is required when data.source is 'csv'")
    _require(data.synthetic.n > 0, "data.synthetic.n must be positive")
    fractions = config.split.fractions
    _require(len(fractions) == 3 and all(f > 0 for f in fractions), "split.fractions must be three positive numbers")
    _require(abs(sum(fractions) - 1.0) <= 1e-9, "split.fractions must sum to 1")
    _require(config.codec.top_k_ports >= 1, "codec.top_k_ports must be at least 1")

    models = config.models
    for label, kind in (
        ("victim_kind", models.victim_kind),
        ("surrogate_kind", models.surrogate_kind),
        ("gradient_surrogate_kind", models.gradient_surrogate_kind),
    ):
        _require(kind in MODEL_KINDS, f"models.{label} must be one of {MODEL_KINDS}, got {kind!r}")
    _require(models.gradient_surrogate_kind in ("LR", "MLP"), "models.gradient_surrogate_kind must be differentiable (LR or MLP)")
    for kind in models.hyperparams:
        _require(kind in MODEL_KINDS, f"models.hyperparams has unknown model kind {kind!r}")

    budget = config.budget
    _require(min(budget.max_bytes, budget.max_pkts, budget.max_delay_ms) >= 0, "budget maxima must be non-negative")
    _require(budget.steps >= 1, "budget.steps must be at least 1")

    agent = config.agent
    _require(agent.algorithm in ALGORITHMS, f"agent.algorithm must be one of {ALGORITHMS}")
    _require(agent.total_steps > 0 and agent.n_envs > 0, "agent.total_steps and agent.n_envs must be positive")
    _require(0.0 < agent.clip_ratio < 1.0, "agent.clip_ratio must lie in (0, 1)")
    _require(0.0 < agent.gamma <= 1.0, "agent.gamma must lie in (0, 1]")
    _require(agent.ent_coef >= 0.0, "agent.ent_coef must be non-negative")
    _require(all(width > 0 for width in agent.hidden), "agent.hidden widths must be positive")
    if agent.rollout_steps is not None:
        _require(
            agent.rollout_steps >= agent.n_envs and agent.rollout_steps % agent.n_envs == 0,
            "agent.rollout_steps must be a positive multiple of agent.n_envs",
        )
    for label, value in (("epochs", agent.epochs), ("batch_size", agent.batch_size)):
        _require(value is None or value >= 1, f"agent.{label} must be at least 1")

    attack = config.attack
    _require(attack.query_cap >= 1, "attack.query_cap must be at least 1")
    _require(attack.pgd_steps >= 1 and attack.pgd_step_size > 0, "attack.pgd_steps and pgd_step_size must be positive")
    _require(attack.max_flows >= 1, "attack.max_flows must be at least 1")

    bench = config.bench
    unknown_tasks = sorted(set(bench.tasks) - set(BENCH_TASKS))
    _require(not unknown_tasks, f"bench.tasks has unknown task(s) {unknown_tasks}")
    _require(bench.executor in EXECUTORS, f"bench.executor must be one of {EXECUTORS}")
    _require(all(t >= 1 for t in bench.t_values), "bench.t_values must be at least 1")
    _require(all(a in ALGORITHMS for a in bench.algorithms), "bench.algorithms has an unknown algorithm")
    _require(all(g in FEATURE_GROUPS for g in bench.feature_groups), "bench.feature_groups has an unknown group")
    for label, kinds in (
        ("learning_kinds", bench.learning_kinds),
        ("grid_kinds", bench.grid_kinds),
        ("data_kinds", bench.data_kinds),
    ):
        _require(all(k in MODEL_KINDS for k in kinds), f"bench.{label} has an unknown model kind")
    _require(all(b >= 0 for b in bench.budget_grid), "bench.budget_grid values must be non-negative")
    _require(all(n >= 1 for n in bench.data_sizes), "bench.data_sizes must be positive")
    _require(0.0 < bench.oracle_stride <= 1.0, "bench.oracle_stride must lie in (0, 1]")
    _require(bench.repetitions >= 1 and bench.total_steps > 0, "bench.repetitions and bench.total_steps must be positive")
    return config


def config_from_dict(raw: Mapping[str, Any]) -> PipelineConfig:
    try:
        config = _build(PipelineConfig, raw, "config")
    except TypeError as exc:
        raise ConfigInvalid(f"config: {exc}") from exc
    return validate_config(config)


def load_pipeline_config(path: Path | str) -> PipelineConfig:
    """Read, parse and validate a JSON pipeline configuration."""
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigInvalid(f"Config file not found at {config_path}.")
    try:
        with config_path.open("r", encoding="utf-8") as handle:
            raw = json.load(handle)
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"{config_path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


__all__ = [
    "PROJECT_ROOT",
    "DEFAULT_OUTPUT_DIR",
    "Settings",
    "get_settings",
    "derive_seed",
    "PipelineError",
    "ConfigInvalid",
    "PipelineConfig",
    "DataConfig",
    "SyntheticSpec",
    "SplitConfig",
    "CodecConfig",
    "ModelsConfig",
    "BudgetConfig",
    "AgentConfig",
    "AttackConfig",
    "BenchConfig",
    "config_from_dict",
    "load_pipeline_config",
    "validate_config",
]
