"""Configuration-driven orchestration: ingest -> train-nids -> train-agent -> attack -> bench -> report.

Usage:
    python pipeline.py all --config config/pipeline.example.json
    python pipeline.py attack --config my.json --force
    python pipeline.py render cost-table --config my.json --out tables/ --filter attack=PPO
    python pipeline.py cancel <job_id>

Exit codes: 0 success, 2 invalid configuration, 3 missing upstream stage,
4 any other failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
import uuid
from dataclasses import asdict, dataclass, replace
from importlib import metadata
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from flowevade.baseline_attacks import AttackResult, AttackResultWriter, reporting_order
from flowevade.config import (
    ConfigInvalid,
    PipelineConfig,
    PipelineError,
    derive_seed,
    get_settings,
    load_pipeline_config,
)
from flowevade.eval_bench import (
    AgentAttacker,
    BenchContext,
    BenchError,
    BenchRecord,
    FuzzAttacker,
    PgdAttacker,
    ScenarioId,
    ThreatModelCell,
    feasibility_oracle,
    learning_gain,
    measure_asr,
    measure_cost,
    run_threat_grid,
    sweep_budget,
    sweep_data_size,
    sweep_T,
)
from flowevade.evasion_env import (
    ACTION_COLUMNS,
    BudgetSpec,
    MaliciousSampler,
    export_trace,
    make_env_factory,
    reset_episode,
    step_episode,
)
from flowevade.flow_data import (
    DataSplit,
    FeatureCodec,
    FlowRecord,
    fit_codec,
    generate_synthetic,
    labels_of,
    load_codec,
    load_netflow,
    partition,
    save_codec,
    write_netflow,
)
from flowevade.nids_zoo import (
    FlowClassifier,
    NidsModel,
    evaluate,
    load_model,
    save_model,
    staged_train_loss,
    train_model,
    tune_model,
)
from flowevade.policy_learn import (
    InvalidTrainConfig,
    PolicyNet,
    TrainConfig,
    load_policy,
    save_policy,
    train_policy,
)
from services.artifacts import ArtifactStore, MissingUpstreamArtifact, stage_key
from services.bench_jobs import BENCH_QUEUE, BenchJobStore, get_redis_connection, rq_job_id
from services.reports import TEMPLATE_KINDS, render_all, render_report
from services.results_db import ResultsDb

logger = logging.getLogger(__name__)

STAGES: Tuple[str, ...] = ("ingest", "train-nids", "train-agent", "attack", "bench", "report")
TRACKED_PACKAGES = ("numpy", "pandas", "scikit-learn", "scipy", "torch", "joblib", "gymnasium", "rq", "redis")
RESULTS_FILE = "results.jsonl"
CONFIG_SNAPSHOT = "config.json"
BENCH_JOB_TIMEOUT = 6 * 3600
BENCH_COLLECT_MARGIN = 600

ProgressCallback = Optional[Callable[[str], None]]
BenchRecords = Dict[str, List[Dict[str, Any]]]


def _notify(message: str, progress_callback: ProgressCallback) -> None:
    if progress_callback:
        progress_callback(message)
    else:
        logger.info(message)


def library_versions() -> Dict[str, str]:
    versions = {"python": sys.version.split()[0]}
    for package in TRACKED_PACKAGES:
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = "not installed"
    return versions


def dataset_name(config: PipelineConfig) -> str:
    if config.data.source == "csv":
        return Path(config.data.path or "netflow").stem
    synthetic = config.data.synthetic
    return "synthetic-custom" if synthetic.mix else f"synthetic-{synthetic.profile}"


def budget_of(config: PipelineConfig, steps: Optional[int] = None) -> BudgetSpec:
    b = config.budget
    return BudgetSpec(max_bytes=b.max_bytes, max_pkts=b.max_pkts, max_delay_ms=b.max_delay_ms, steps=steps or b.steps)


def train_config_of(
    config: PipelineConfig,
    *,
    algorithm: Optional[str] = None,
    total_steps: Optional[int] = None,
    seed_label: str = "agent",
) -> TrainConfig:
    """Translate the agent section into trainer settings for one algorithm."""
    agent = config.agent
    optional = {
        "rollout_steps": agent.rollout_steps,
        "epochs": agent.epochs,
        "batch_size": agent.batch_size,
        "learning_rate": agent.learning_rate,
        "gae_lambda": agent.gae_lambda,
    }
    try:
        return TrainConfig.for_algorithm(
            algorithm or agent.algorithm,
            total_steps=total_steps or agent.total_steps,
            n_envs=agent.n_envs,
            hidden=tuple(agent.hidden),
            gamma=agent.gamma,
            clip_ratio=agent.clip_ratio,
            ent_coef=agent.ent_coef,
            seed=derive_seed(config.seed, seed_label, algorithm or agent.algorithm),
            **{key: value for key, value in optional.items() if value is not None},
        )
    except InvalidTrainConfig as exc:
        raise ConfigInvalid(f"agent: {exc}") from exc


# ----------------------------------------------------------------------
# Upstream artifact access
# ----------------------------------------------------------------------
@dataclass
class Upstream:
    split: DataSplit
    victim_codec: FeatureCodec
    adversary_codec: FeatureCodec
    victim: Optional[FlowClassifier] = None
    surrogate: Optional[FlowClassifier] = None
    gradient_surrogate: Optional[FlowClassifier] = None
    policy: Optional[PolicyNet] = None


def _read_flows(store: ArtifactStore, name: str) -> Tuple[FlowRecord, ...]:
    return tuple(load_netflow(store.path_of("ingest", name), strict=True).flows)


def load_upstream(store: ArtifactStore, config: PipelineConfig, through: str) -> Upstream:
    """Load everything the stages up to and including ``through`` produced."""
    split = DataSplit(
        victim_set=_read_flows(store, "victim.csv"),
        train_set=_read_flows(store, "train.csv"),
        test_set=_read_flows(store, "test.csv"),
        seed=config.split.seed,
    )
    upstream = Upstream(
        split=split,
        victim_codec=load_codec(store.path_of("ingest", "victim_codec.json")),
        adversary_codec=load_codec(store.path_of("ingest", "adversary_codec.json")),
    )
    reached = STAGES.index(through)
    if reached >= STAGES.index("train-nids"):
        def classifier(name: str, codec: FeatureCodec) -> FlowClassifier:
            return FlowClassifier(load_model(store.path_of("train-nids", name), codec.dim), codec)

        upstream.victim = classifier("victim.joblib", upstream.victim_codec)
        upstream.surrogate = classifier("surrogate.joblib", upstream.adversary_codec)
        upstream.gradient_surrogate = classifier("gradient_surrogate.joblib", upstream.adversary_codec)
    if reached >= STAGES.index("train-agent"):
        upstream.policy = load_policy(store.path_of("train-agent", "policy.pt"))
    return upstream


def _fit_classifier(
    config: PipelineConfig, kind: str, codec: FeatureCodec, flows: Sequence[FlowRecord], labels: np.ndarray, seed: int
) -> Tuple[NidsModel, Dict[str, Any]]:
    X = codec.encode_flows(flows)
    hyperparams = config.models.hyperparams.get(kind)
    n_jobs = get_settings().threads
    if config.models.cross_validate:
        return tune_model(kind, X, labels, hyperparams, seed, codec_id=codec.codec_id, n_jobs=n_jobs)
    return train_model(kind, X, labels, hyperparams, seed, codec_id=codec.codec_id, n_jobs=n_jobs), {}


# ----------------------------------------------------------------------
# Stages
# ----------------------------------------------------------------------
@dataclass
class StageRun:
    config: PipelineConfig
    store: ArtifactStore
    directory: Path
    progress_callback: ProgressCallback = None


StageOutput = Tuple[Dict[str, int], Dict[str, Any]]


def _stage_ingest(run: StageRun) -> StageOutput:
    config = run.config
    rejected = 0
    if config.data.source == "csv":
        report = load_netflow(config.data.path, config.data.schema)
        flows, rejected = report.flows, report.rejected
        seeds: Dict[str, int] = {}
    else:
        synthetic = config.data.synthetic
        flows = generate_synthetic(
            synthetic.n, synthetic.seed, synthetic.mix or synthetic.profile, benign_fraction=synthetic.benign_fraction
        )
        seeds = {"synthetic": synthetic.seed}
    split = partition(flows, config.split.fractions, config.split.seed)
    seeds["split"] = config.split.seed

    summary: Dict[str, Any] = {"dataset": dataset_name(config), "accepted": len(flows), "rejected": rejected}
    for name, part in split.parts().items():
        write_netflow(part, run.directory / f"{name}.csv")
        summary[f"{name}_rows"] = len(part)
        summary[f"{name}_malicious"] = int(labels_of(part).sum())

    victim_codec = fit_codec(split.victim_set, config.codec.top_k_ports)
    adversary_codec = fit_codec(split.train_set, config.codec.top_k_ports)
    save_codec(victim_codec, run.directory / "victim_codec.json")
    save_codec(adversary_codec, run.directory / "adversary_codec.json")
    summary.update(victim_codec_dim=victim_codec.dim, adversary_codec_dim=adversary_codec.dim)
    _notify(f"Ingested {len(flows)} flows ({rejected} rejected)", run.progress_callback)
    return seeds, summary


def _stage_train_nids(run: StageRun) -> StageOutput:
    config = run.config
    up = load_upstream(run.store, config, "ingest")
    models = config.models
    seeds = {
        "victim": derive_seed(config.seed, "victim", models.victim_kind),
        "surrogate": derive_seed(config.seed, "surrogate", models.surrogate_kind),
        "gradient_surrogate": derive_seed(config.seed, "surrogate", models.gradient_surrogate_kind),
    }

    victim_model, victim_params = _fit_classifier(
        config, models.victim_kind, up.victim_codec, up.split.victim_set, labels_of(up.split.victim_set), seeds["victim"]
    )
    victim = FlowClassifier(victim_model, up.victim_codec)
    adversary_labels = victim.decide_flows(up.split.train_set)
    surrogate_model, surrogate_params = _fit_classifier(
        config, models.surrogate_kind, up.adversary_codec, up.split.train_set, adversary_labels, seeds["surrogate"]
    )
    if models.gradient_surrogate_kind == models.surrogate_kind:
        gradient_model = surrogate_model
    else:
        gradient_model, _ = _fit_classifier(
            config,
            models.gradient_surrogate_kind,
            up.adversary_codec,
            up.split.train_set,
            adversary_labels,
            seeds["gradient_surrogate"],
        )
    save_model(victim_model, run.directory / "victim.joblib")
    save_model(surrogate_model, run.directory / "surrogate.joblib")
    save_model(gradient_model, run.directory / "gradient_surrogate.joblib")

    test = up.split.test_set
    victim_decisions = victim.decide_flows(test)
    metrics = {
        "victim": evaluate(victim_model, up.victim_codec.encode_flows(test), labels_of(test)).to_dict(),
        "surrogate_fidelity": evaluate(surrogate_model, up.adversary_codec.encode_flows(test), victim_decisions).to_dict(),
        "victim_params": victim_params,
        "surrogate_params": surrogate_params,
        "victim_staged_loss": staged_train_loss(victim_model),
    }
    with (run.directory / "metrics.json").open("w", encoding="utf-8") as handle:
        json.dump(metrics, handle, indent=2, sort_keys=True)
    _notify(
        f"Victim {models.victim_kind} F1 {metrics['victim']['f1']:.4f}; "
        f"surrogate {models.surrogate_kind} fidelity F1 {metrics['surrogate_fidelity']['f1']:.4f}",
        run.progress_callback,
    )
    return seeds, {"victim_f1": metrics["victim"]["f1"], "surrogate_fidelity_f1": metrics["surrogate_fidelity"]["f1"]}


def _stage_train_agent(run: StageRun) -> StageOutput:
    config = run.config
    up = load_upstream(run.store, config, "train-nids")
    budget = budget_of(config)
    train_config = train_config_of(config)
    sampler = MaliciousSampler(up.split.train_set)
    result = train_policy(make_env_factory(sampler, budget), up.surrogate, train_config, run.progress_callback)
    save_policy(result.policy, run.directory / "policy.pt")
    result.save_curve(run.directory / "curve.csv")

    # One greedy episode against the surrogate, kept for inspection.
    rng = np.random.default_rng(derive_seed(config.seed, "trace"))
    episode, observation = reset_episode(sampler, budget, rng, up.adversary_codec)
    while not episode.done:
        action = result.policy.deterministic_actions(observation[None, :])[0]
        observation, _, _ = step_episode(episode, action, up.surrogate)
    export_trace(episode, run.directory / "trace.jsonl")

    last = result.curve[-1] if result.curve else None
    summary = {
        "algorithm": train_config.algorithm,
        "total_steps": train_config.total_steps,
        "trunk_parameters": result.policy.trunk_parameter_count(),
        "final_mean_reward": last.mean_reward if last else None,
        "final_evasion_rate": last.evasion_rate if last else None,
    }
    return {"agent": train_config.seed, "trace": derive_seed(config.seed, "trace")}, summary


def _agent_result(attacker: AgentAttacker, victim: FlowClassifier, flow: FlowRecord) -> AttackResult:
    started = time.perf_counter()
    adversarial = attacker.perturb(flow)
    latency = (time.perf_counter() - started) * 1000.0
    probability = float(victim.proba_flows([adversarial])[0])
    change = (adversarial.feature_vector() - flow.feature_vector())[ACTION_COLUMNS]
    return AttackResult(
        success=probability < victim.model.threshold,
        queries_used=0,
        perturbation=reporting_order(change),
        wall_latency_ms=latency,
        adversarial=adversarial,
        best_probability=probability,
    )


def _stage_attack(run: StageRun) -> StageOutput:
    config = run.config
    up = load_upstream(run.store, config, "train-agent")
    budget = budget_of(config)
    malicious = [f for f in up.split.test_set if f.label == 1]
    detected = [f for f, d in zip(malicious, up.victim.decide_flows(malicious)) if d == 1][: config.attack.max_flows]
    fuzz_seed = derive_seed(config.seed, "fuzz")

    attackers: List[Tuple[str, Callable[[int, FlowRecord], AttackResult]]] = []
    agent = AgentAttacker(up.policy, up.adversary_codec, budget, name=config.agent.algorithm)
    attackers.append((agent.name, lambda _, flow: _agent_result(agent, up.victim, flow)))
    fuzzer = FuzzAttacker(up.victim, budget, config.attack.query_cap, fuzz_seed)
    attackers.append((fuzzer.name, lambda index, flow: fuzzer.attack(flow, index)))
    if up.gradient_surrogate.model.differentiable:
        pgd = PgdAttacker(up.victim, up.gradient_surrogate, budget, config.attack.pgd_steps, config.attack.pgd_step_size)
        attackers.append((pgd.name, lambda _, flow: pgd.attack(flow)))

    successes = {name: 0 for name, _ in attackers}
    with AttackResultWriter(run.directory / "attacks.csv") as writer:
        for index, flow in enumerate(detected):
            for name, attack in attackers:
                result = attack(index, flow)
                successes[name] += int(result.success)
                writer.write(index, name, result)
    summary: Dict[str, Any] = {"detected_flows": len(detected)}
    for name, count in successes.items():
        summary[f"asr_{name}"] = count / len(detected) if detected else None
    _notify(f"Attacked {len(detected)} detected flows: {summary}", run.progress_callback)
    return {"fuzz": fuzz_seed}, summary


def _stage_bench(run: StageRun) -> StageOutput:
    config = run.config
    snapshot = run.directory / CONFIG_SNAPSHOT
    with snapshot.open("w", encoding="utf-8") as handle:
        json.dump(asdict(config), handle, indent=2, sort_keys=True)

    tasks = list(config.bench.tasks)
    if config.bench.executor == "rq":
        results = _run_bench_rq(config, snapshot, run.store.root, tasks, run.progress_callback)
    else:
        results = {
            task: run_bench_task(task, config, run.store.root, progress_callback=run.progress_callback) for task in tasks
        }

    db = ResultsDb(run.directory / RESULTS_FILE, run_id=config.config_hash()[:12])
    db.path.touch()
    counts: Dict[str, int] = {}
    for task in tasks:
        for kind, rows in results.get(task, {}).items():
            db.extend(kind, rows)
            counts[kind] = counts.get(kind, 0) + len(rows)
    seeds = {f"bench-{task}": derive_seed(config.seed, "bench", task) for task in tasks}
    return seeds, {"records": counts}


def _stage_report(run: StageRun) -> StageOutput:
    db = ResultsDb(run.store.path_of("bench", RESULTS_FILE), run_id=run.config.config_hash()[:12])
    outputs = render_all(db, run.directory)
    return {}, {"templates": [output.template for output in outputs]}


_STAGE_RUNNERS: Dict[str, Callable[[StageRun], StageOutput]] = {
    "ingest": _stage_ingest,
    "train-nids": _stage_train_nids,
    "train-agent": _stage_train_agent,
    "attack": _stage_attack,
    "bench": _stage_bench,
    "report": _stage_report,
}


@dataclass(frozen=True)
class StageOutcome:
    stage: str
    key: str
    directory: Path
    cached: bool
    summary: Mapping[str, Any]


def run_stage(
    config: PipelineConfig,
    stage: str,
    *,
    force: bool = False,
    progress_callback: ProgressCallback = None,
) -> StageOutcome:
    """Run one stage unless the manifest already holds it for this configuration."""
    if stage not in _STAGE_RUNNERS:
        raise PipelineError(f"unknown stage {stage!r}; expected one of {STAGES}")
    store = ArtifactStore(config.resolved_output_dir(), STAGES)
    position = STAGES.index(stage)
    upstream_keys = [store.require(STAGES[position - 1])["key"]] if position else []
    key = stage_key(stage, config.config_hash(), upstream_keys)

    if not force and store.is_cached(stage, key):
        entry = store.entry(stage)
        _notify(f"Stage {stage} is cached; skipping", progress_callback)
        return StageOutcome(stage, key, store.root / entry["dir"], True, entry.get("summary", {}))

    directory = store.prepare(stage, key)
    _notify(f"Running stage {stage} into {directory}", progress_callback)
    try:
        seeds, summary = _STAGE_RUNNERS[stage](StageRun(config, store, directory, progress_callback))
    except BaseException:
        shutil.rmtree(directory, ignore_errors=True)
        raise
    store.record(
        stage,
        key,
        config_hash=config.config_hash(),
        seeds={"root": config.seed, **seeds},
        versions=library_versions(),
        summary=summary,
    )
    return StageOutcome(stage, key, directory, False, summary)


def run_pipeline(
    config: PipelineConfig,
    *,
    stages: Sequence[str] = STAGES,
    force: bool = False,
    progress_callback: ProgressCallback = None,
) -> List[StageOutcome]:
    return [run_stage(config, stage, force=force, progress_callback=progress_callback) for stage in stages]


# ----------------------------------------------------------------------
# Bench tasks (run in-process or by an RQ worker)
# ----------------------------------------------------------------------
def _threat_cell(victim_kind: str, surrogate_kind: str) -> str:
    return (ThreatModelCell.WHITE_BOX if victim_kind == surrogate_kind else ThreatModelCell.GRAY_DATA).value


def _victim_of_kind(config: PipelineConfig, up: Upstream, kind: str) -> FlowClassifier:
    if kind == config.models.victim_kind:
        return up.victim
    model = train_model(
        kind,
        up.victim_codec.encode_flows(up.split.victim_set),
        labels_of(up.split.victim_set),
        config.models.hyperparams.get(kind),
        derive_seed(config.seed, "victim", kind),
        codec_id=up.victim_codec.codec_id,
        n_jobs=get_settings().threads,
    )
    return FlowClassifier(model, up.victim_codec)


def _task_learning(config: PipelineConfig, up: Upstream, context: BenchContext, progress: ProgressCallback) -> BenchRecords:
    gains: List[Dict[str, Any]] = []
    curve: List[Dict[str, Any]] = []
    for algorithm in config.bench.algorithms:
        scoped = replace(context, train_config=train_config_of(config, algorithm=algorithm, total_steps=config.bench.total_steps, seed_label="bench-learning"))
        for kind in config.bench.learning_kinds:
            row = learning_gain(scoped, _victim_of_kind(config, up, kind), progress)
            points = row.pop("curve")
            gains.append(row)
            curve.extend({"algorithm": algorithm, "victim_kind": kind, **point} for point in points)
    return {"learning": gains, "learning-curve": curve}


def _task_cost(config: PipelineConfig, up: Upstream, context: BenchContext, progress: ProgressCallback) -> BenchRecords:
    bench = config.bench
    flows = context.eval_flows()
    attackers: List[Any] = []
    for algorithm in bench.algorithms:
        if algorithm == config.agent.algorithm:
            policy = up.policy
        else:
            train_config = train_config_of(config, algorithm=algorithm, total_steps=bench.total_steps, seed_label="bench-cost")
            policy = context.train_agent(config=train_config, progress_callback=progress).policy
        attackers.append(AgentAttacker(policy, up.adversary_codec, context.budget, name=algorithm))
    attackers.append(FuzzAttacker(up.victim, context.budget, config.attack.query_cap, derive_seed(config.seed, "bench-fuzz")))
    if up.gradient_surrogate.model.differentiable:
        attackers.append(
            PgdAttacker(up.victim, up.gradient_surrogate, context.budget, config.attack.pgd_steps, config.attack.pgd_step_size)
        )

    records: List[Dict[str, Any]] = []
    for attacker in attackers:
        asr = measure_asr(attacker, up.victim, flows)
        cost = measure_cost(attacker, flows[: bench.cost_flows], bench.repetitions)
        scenario = ScenarioId(
            dataset=context.dataset,
            victim_kind=config.models.victim_kind,
            surrogate_kind=config.models.surrogate_kind,
            attacker=attacker.name,
            steps=context.budget.steps,
            budget=context.budget.as_tuple(),
            train_size=len(up.split.train_set),
            threat_cell=_threat_cell(config.models.victim_kind, config.models.surrogate_kind),
            seed=context.seed,
        )
        records.append(BenchRecord.from_reports(scenario, asr, cost).to_payload())
        _notify(f"{attacker.name}: ASR {asr.asr:.3f}, {cost.mean_latency_ms:.3f} ms/flow", progress)
    return {"cost": records}


def _task_tradeoff(config: PipelineConfig, up: Upstream, context: BenchContext, progress: ProgressCallback) -> BenchRecords:
    report = sweep_T(
        context,
        config.bench.t_values,
        cost_flows=config.bench.cost_flows,
        repetitions=config.bench.repetitions,
        progress_callback=progress,
    )
    return {"tradeoff": report.rows()}


def _task_sensitivity(config: PipelineConfig, up: Upstream, context: BenchContext, progress: ProgressCallback) -> BenchRecords:
    cells = sweep_budget(context, up.policy, grid=config.bench.budget_grid, feature_groups=config.bench.feature_groups)
    oracle = feasibility_oracle(
        up.victim, context.eval_flows()[: config.bench.cost_flows], context.budget, stride=config.bench.oracle_stride
    )
    _notify(f"Feasibility oracle: {oracle['evadable']}/{oracle['detected']} detected flows evadable", progress)
    return {"sensitivity": [asdict(cell) for cell in cells], "feasibility": [oracle]}


def _task_matrix(config: PipelineConfig, up: Upstream, context: BenchContext, progress: ProgressCallback) -> BenchRecords:
    split = up.split
    corpus_size = len(split.victim_set) + len(split.train_set) + len(split.test_set)
    ood_name = f"synthetic-{config.data.ood_profile}"
    if ood_name == context.dataset:
        ood_name += "-ood"
    ood_flows = generate_synthetic(corpus_size, derive_seed(config.seed, "ood-corpus"), config.data.ood_profile)
    corpora = {
        context.dataset: split,
        ood_name: partition(ood_flows, config.split.fractions, derive_seed(config.seed, "ood-split")),
    }
    entries = run_threat_grid(
        corpora,
        config.bench.grid_kinds,
        budget=context.budget,
        train_config=context.train_config,
        top_k_ports=config.codec.top_k_ports,
        seed=context.seed,
        max_eval_flows=config.bench.max_eval_flows,
        progress_callback=progress,
    )
    return {"matrix": [asdict(entry) for entry in entries]}


def _task_data_efficiency(config: PipelineConfig, up: Upstream, context: BenchContext, progress: ProgressCallback) -> BenchRecords:
    rows = sweep_data_size(context, config.bench.data_sizes, config.bench.data_kinds, progress_callback=progress)
    return {"data-efficiency": rows}


_BENCH_TASKS: Dict[str, Callable[[PipelineConfig, Upstream, BenchContext, ProgressCallback], BenchRecords]] = {
    "learning": _task_learning,
    "cost": _task_cost,
    "tradeoff": _task_tradeoff,
    "sensitivity": _task_sensitivity,
    "matrix": _task_matrix,
    "data-efficiency": _task_data_efficiency,
}


def run_bench_task(
    task: str,
    config: PipelineConfig,
    output_dir: Path,
    *,
    progress_callback: ProgressCallback = None,
) -> BenchRecords:
    """Run one bench task against the run's stored artifacts and return its records by kind."""
    if task not in _BENCH_TASKS:
        raise PipelineError(f"unknown bench task {task!r}")
    store = ArtifactStore(Path(output_dir), STAGES)
    up = load_upstream(store, config, "train-agent")
    seed = derive_seed(config.seed, "bench", task)
    context = BenchContext(
        split=up.split,
        victim=up.victim,
        surrogate=up.surrogate,
        budget=budget_of(config),
        train_config=train_config_of(config, total_steps=config.bench.total_steps, seed_label=f"bench-{task}"),
        dataset=dataset_name(config),
        seed=seed,
        max_eval_flows=config.bench.max_eval_flows,
    )
    _notify(f"Bench task {task} started", progress_callback)
    try:
        records = _BENCH_TASKS[task](config, up, context, progress_callback)
    except BenchError as exc:
        logger.warning("Bench task %s produced no records: %s", task, exc)
        return {"bench-error": [{"task": task, "error": str(exc)}]}
    _notify(f"Bench task {task} finished with {sum(len(rows) for rows in records.values())} record(s)", progress_callback)
    return records


def _run_bench_rq(
    config: PipelineConfig,
    snapshot: Path,
    output_dir: Path,
    tasks: Sequence[str],
    progress_callback: ProgressCallback,
) -> Dict[str, BenchRecords]:
    from rq import Queue

    redis_conn = get_redis_connection()
    job_store = BenchJobStore(redis_conn)
    queue = Queue(BENCH_QUEUE, connection=redis_conn, default_timeout=BENCH_JOB_TIMEOUT)
    pending: Dict[str, str] = {}
    for task in tasks:
        job_id = uuid.uuid4().hex
        job_store.bootstrap(job_id, task=task, config_hash=config.config_hash(), output_dir=str(output_dir))
        queue.enqueue(
            "jobs.bench_task_job.run_bench_task_job",
            job_id,
            task=task,
            config_path=str(snapshot),
            output_dir=str(output_dir),
            job_id=rq_job_id(job_id),
        )
        pending[task] = job_id
        _notify(f"Queued bench task {task} as job {job_id}", progress_callback)

    return job_store.collect(
        pending,
        poll_seconds=config.bench.poll_seconds,
        timeout_seconds=BENCH_JOB_TIMEOUT * len(pending) + BENCH_COLLECT_MARGIN,
        check_worker=True,
        progress_callback=progress_callback,
    )


# ----------------------------------------------------------------------
# Command line
# ----------------------------------------------------------------------
def _parse_filters(items: Sequence[str]) -> Dict[str, Any]:
    filters: Dict[str, Any] = {}
    for item in items:
        column, sep, raw = item.partition("=")
        if not sep or not column:
            raise ConfigInvalid(f"filter {item!r} must look like column=value")
        try:
            filters[column] = json.loads(raw)
        except json.JSONDecodeError:
            filters[column] = raw
    return filters


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Train and evaluate RL agents that evade flow-based NIDS.")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")
    commands = parser.add_subparsers(dest="command", required=True)

    for stage in STAGES + ("all",):
        sub = commands.add_parser(stage, help=f"Run the {stage} stage." if stage != "all" else "Run every stage in order.")
        sub.add_argument("--config", required=True, help="Path to the JSON pipeline configuration.")
        sub.add_argument("--force", action="store_true", help="Rebuild even when the manifest holds the stage.")

    render = commands.add_parser("render", help="Render one report template with an optional filter.")
    render.add_argument("template", choices=sorted(TEMPLATE_KINDS))
    render.add_argument("--config", required=True)
    render.add_argument("--out", required=True, help="Directory for the CSV and summary text.")
    render.add_argument("--filter", action="append", default=[], metavar="COLUMN=VALUE")

    cancel = commands.add_parser("cancel", help="Request cancellation of a queued or running bench job.")
    cancel.add_argument("job_id")
    return parser


def _dispatch(args: argparse.Namespace) -> None:
    if args.command == "cancel":
        BenchJobStore(get_redis_connection()).request_cancel(args.job_id, cancelled_by="cli")
        print(f"Cancellation requested for job {args.job_id}.")
        return

    config = load_pipeline_config(args.config)
    if args.command == "render":
        store = ArtifactStore(config.resolved_output_dir(), STAGES)
        db = ResultsDb(store.path_of("bench", RESULTS_FILE), run_id=config.config_hash()[:12])
        output = render_report(db, args.template, Path(args.out), filters=_parse_filters(args.filter))
        print(output.csv_path)
        return

    stages = STAGES if args.command == "all" else (args.command,)
    for outcome in run_pipeline(config, stages=stages, force=args.force):
        state = "cached" if outcome.cached else "done"
        print(f"{outcome.stage}: {state} ({outcome.directory})")


def _cli(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    torch.set_num_threads(get_settings().threads)
    try:
        _dispatch(args)
        return 0
    except ConfigInvalid as exc:
        print(f"Invalid configuration: {exc}", file=sys.stderr)
        return 2
    except MissingUpstreamArtifact as exc:
        print(f"Missing upstream artifact: {exc}", file=sys.stderr)
        return 3
    except KeyboardInterrupt:
        print("\nAborted by user.", file=sys.stderr)
        return 4
    except Exception as exc:
        logger.debug("Pipeline failure", exc_info=True)
        print(f"Pipeline failed: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(_cli())
