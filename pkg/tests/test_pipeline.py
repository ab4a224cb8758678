from __future__ import annotations

import csv
import json
import shutil
from dataclasses import replace

import pytest

import jobs.bench_task_job as bench_task_job
import pipeline
from flowevade.config import (
    PROJECT_ROOT,
    ConfigInvalid,
    config_from_dict,
    get_settings,
    load_pipeline_config,
)
from pipeline import (
    STAGES,
    _parse_filters,
    budget_of,
    dataset_name,
    run_pipeline,
    run_stage,
    train_config_of,
)
from services.artifacts import ArtifactStore, MissingUpstreamArtifact


def tiny_config(output_dir, **bench_overrides):
    bench = {
        "tasks": ["cost", "sensitivity"],
        "total_steps": 64,
        "max_eval_flows": 20,
        "cost_flows": 3,
        "repetitions": 1,
        "algorithms": ["PPO"],
        "budget_grid": [0, 100000],
        "feature_groups": ["bytes", "volume"],
        "poll_seconds": 0.0,
        **bench_overrides,
    }
    return config_from_dict(
        {
            "seed": 5,
            "output_dir": str(output_dir),
            "data": {"source": "synthetic", "synthetic": {"n": 1500, "seed": 2}},
            "codec": {"top_k_ports": 32},
            "models": {"victim_kind": "LR", "surrogate_kind": "LR", "gradient_surrogate_kind": "LR"},
            "agent": {
                "total_steps": 64,
                "n_envs": 4,
                "hidden": [16],
                "rollout_steps": 32,
                "epochs": 1,
                "batch_size": 32,
            },
            "attack": {"query_cap": 20, "pgd_steps": 5, "max_flows": 5},
            "bench": bench,
        }
    )


@pytest.fixture(autouse=True)
def clean_settings(monkeypatch):
    monkeypatch.delenv("FLOWEVADE_OUTPUT_DIR", raising=False)
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    """A run directory holding every stage up to and including the attack."""
    with pytest.MonkeyPatch.context() as patch:
        patch.delenv("FLOWEVADE_OUTPUT_DIR", raising=False)
        get_settings.cache_clear()
        config = tiny_config(tmp_path_factory.mktemp("run"))
        outcomes = run_pipeline(config, stages=STAGES[:4])
        get_settings.cache_clear()
    return config, outcomes


# ----------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------
def test_example_config_is_valid():
    config = load_pipeline_config(PROJECT_ROOT / "config" / "pipeline.example.json")
    assert config.models.victim_kind == "MLP"
    assert config.bench.t_values == (1, 10, 20, 40)
    assert dataset_name(config) == "synthetic-enterprise"


def test_config_hash_ignores_output_location_but_not_seeds(tmp_path):
    first = tiny_config(tmp_path / "a")
    assert first.config_hash() == tiny_config(tmp_path / "b").config_hash()
    assert first.config_hash() != replace(first, seed=6).config_hash()


@pytest.mark.parametrize(
    "raw",
    [
        {"colour": "blue"},
        {"split": {"fractions": [0.5, 0.5, 0.5]}},
        {"models": {"gradient_surrogate_kind": "RF"}},
        {"data": {"source": "csv"}},
        {"bench": {"tasks": ["cost", "vibes"]}},
        {"agent": "PPO"},
        {"budget": {"steps": "10"}},
        {"budget": {"max_bytes": "lots"}},
        {"agent": {"n_envs": 2.5}},
        {"agent": {"n_envs": True}},
        {"models": {"cross_validate": "yes"}},
        {"bench": {"t_values": [1, "ten"]}},
        {"split": {"fractions": [0.5, 0.5]}},
        {"agent": {"n_envs": 4, "rollout_steps": 2}},
        {"agent": {"n_envs": 4, "rollout_steps": 30}},
    ],
)
def test_invalid_configs_are_rejected(raw):
    with pytest.raises(ConfigInvalid):
        config_from_dict(raw)


def test_wrong_types_exit_with_the_config_code(tmp_path):
    raw = json.loads((PROJECT_ROOT / "config" / "pipeline.example.json").read_text())
    raw["budget"]["steps"] = "10"
    config_path = tmp_path / "typed.json"
    config_path.write_text(json.dumps(raw))
    assert pipeline._cli(["ingest", "--config", str(config_path)]) == 2


def test_integers_are_accepted_where_numbers_are_expected():
    config = config_from_dict({"agent": {"learning_rate": 1}, "split": {"fractions": [0.5, 0.25, 0.25]}})
    assert isinstance(config.agent.learning_rate, float)
    assert config.split.fractions == (0.5, 0.25, 0.25)


def test_trainer_settings_follow_the_agent_section(tmp_path):
    config = tiny_config(tmp_path)
    trainer = train_config_of(config)
    assert (trainer.n_envs, trainer.rollout_steps, trainer.hidden) == (4, 32, (16,))
    assert train_config_of(config, algorithm="A2C").learning_rate == 7e-4
    assert budget_of(config, steps=4).epsilon.tolist() == [25_000.0, 25_000.0, 25.0]

    broken = replace(config, agent=replace(config.agent, rollout_steps=2))
    with pytest.raises(ConfigInvalid):
        train_config_of(broken)


def test_filter_parsing():
    assert _parse_filters(["attack=PPO", "steps=10"]) == {"attack": "PPO", "steps": 10}
    with pytest.raises(ConfigInvalid):
        _parse_filters(["attack"])


# ----------------------------------------------------------------------
# Stage orchestration
# ----------------------------------------------------------------------
def test_stage_without_upstream_is_refused(tmp_path):
    with pytest.raises(MissingUpstreamArtifact):
        run_stage(tiny_config(tmp_path), "train-nids")


def test_stages_write_their_artifacts(built):
    config, outcomes = built
    assert [outcome.stage for outcome in outcomes] == list(STAGES[:4])
    assert not any(outcome.cached for outcome in outcomes)
    ingest, train_nids, train_agent, attack = (outcome.directory for outcome in outcomes)

    assert sorted(path.name for path in ingest.iterdir()) == [
        "adversary_codec.json",
        "test.csv",
        "train.csv",
        "victim.csv",
        "victim_codec.json",
    ]
    assert outcomes[0].summary["accepted"] == 1500
    metrics = json.loads((train_nids / "metrics.json").read_text(encoding="utf-8"))
    assert metrics["victim"]["f1"] > 0.8
    assert len((train_agent / "trace.jsonl").read_text(encoding="utf-8").splitlines()) == config.budget.steps

    with (attack / "attacks.csv").open(encoding="utf-8", newline="") as handle:
        rows = list(csv.DictReader(handle))
    assert {row["attacker"] for row in rows} == {"PPO", "Fuzzing", "PGD"}
    assert all(int(row["queries"]) == 0 for row in rows if row["attacker"] == "PPO")
    assert all(int(row["queries"]) <= 20 for row in rows if row["attacker"] == "Fuzzing")


def test_rerun_hits_the_cache(built):
    config, outcomes = built
    again = run_pipeline(config, stages=STAGES[:4])
    assert all(outcome.cached for outcome in again)
    assert [outcome.key for outcome in again] == [outcome.key for outcome in outcomes]

    manifest = ArtifactStore(config.resolved_output_dir(), STAGES).load_manifest()
    assert manifest["config_hash"] == config.config_hash()
    assert manifest["stages"]["ingest"]["seeds"]["split"] == config.split.seed
    assert "numpy" in manifest["stages"]["train-nids"]["versions"]


def test_bench_and_report_complete_the_manifest(built, tmp_path):
    config, _ = built
    copy_dir = tmp_path / "local"
    shutil.copytree(config.resolved_output_dir(), copy_dir)
    local = replace(config, output_dir=str(copy_dir))

    bench, report = run_pipeline(local, stages=("bench", "report"))
    records = [json.loads(line) for line in (bench.directory / "results.jsonl").read_text(encoding="utf-8").splitlines()]
    kinds = {record["kind"] for record in records}
    assert "cost" in kinds
    assert kinds & {"sensitivity", "bench-error"}
    assert {r["payload"]["attack"] for r in records if r["kind"] == "cost"} == {"PPO", "Fuzzing", "PGD"}
    assert (bench.directory / "config.json").is_file()

    assert "cost-table" in report.summary["templates"]
    assert (report.directory / "cost-table.csv").is_file()
    assert ArtifactStore(copy_dir, STAGES).unreferenced_files() == []

    out = tmp_path / "adhoc"
    config_path = tmp_path / "local.json"
    config_path.write_text((bench.directory / "config.json").read_text(encoding="utf-8"), encoding="utf-8")
    code = pipeline._cli(["render", "cost-table", "--config", str(config_path), "--out", str(out), "--filter", "attack=PGD"])
    assert code == 0
    assert len((out / "cost-table.csv").read_text(encoding="utf-8").splitlines()) == 2


def test_bench_through_the_job_queue(built, tmp_path, fake_redis, monkeypatch):
    config, _ = built
    copy_dir = tmp_path / "queued"
    shutil.copytree(config.resolved_output_dir(), copy_dir)
    queued = replace(config, output_dir=str(copy_dir), bench=replace(config.bench, executor="rq", tasks=("cost",)))

    enqueued = []

    class InlineQueue:
        def __init__(self, name, connection=None, default_timeout=None):
            self.name = name

        def enqueue(self, func_path, *args, **kwargs):
            enqueued.append((self.name, func_path, kwargs.pop("job_id")))
            return bench_task_job.run_bench_task_job(*args, **kwargs)

    monkeypatch.setattr("rq.Queue", InlineQueue)
    monkeypatch.setattr(pipeline, "get_redis_connection", lambda: fake_redis)
    monkeypatch.setattr(bench_task_job, "get_redis_connection", lambda: fake_redis)

    outcome = run_stage(queued, "bench")
    assert enqueued[0][:2] == ("evasion-bench", "jobs.bench_task_job.run_bench_task_job")
    assert enqueued[0][2].startswith("bench-")
    lines = (outcome.directory / "results.jsonl").read_text(encoding="utf-8").splitlines()
    assert {json.loads(line)["kind"] for line in lines} == {"cost"}
    assert outcome.summary["records"]["cost"] == 3


# ----------------------------------------------------------------------
# Command line
# ----------------------------------------------------------------------
def test_cli_exit_codes(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"seed": "x", "colour": 1}', encoding="utf-8")
    assert pipeline._cli(["ingest", "--config", str(bad)]) == 2
    assert pipeline._cli(["ingest", "--config", str(tmp_path / "absent.json")]) == 2

    good = tmp_path / "good.json"
    good.write_text(json.dumps({"output_dir": str(tmp_path / "fresh")}), encoding="utf-8")
    assert pipeline._cli(["attack", "--config", str(good)]) == 3

    missing_csv = tmp_path / "csv.json"
    missing_csv.write_text(
        json.dumps({"output_dir": str(tmp_path / "csv"), "data": {"source": "csv", "path": str(tmp_path / "nope.csv")}}),
        encoding="utf-8",
    )
    assert pipeline._cli(["ingest", "--config", str(missing_csv)]) == 4


@pytest.mark.slow
def test_every_bench_task_runs_end_to_end(tmp_path):
    config = tiny_config(
        tmp_path,
        tasks=["learning", "cost", "tradeoff", "sensitivity", "matrix", "data-efficiency"],
        algorithms=["PPO", "A2C"],
        learning_kinds=["LR", "RF"],
        t_values=[2, 4],
        grid_kinds=["LR"],
        data_sizes=[200, 600],
        data_kinds=["LR"],
    )
    outcomes = run_pipeline(config)
    templates = outcomes[-1].summary["templates"]
    assert {"cost-table", "learning-figure", "tradeoff", "matrix", "data-efficiency"} <= set(templates)
    assert ArtifactStore(config.resolved_output_dir(), STAGES).unreferenced_files() == []
