"""Tidy tables and summary text for each report template.

Templates read one record kind from the results database, filter it and
write ``<template>.csv`` next to ``<template>.txt``. No plotting happens
here; the tables carry the axes a figure would use.
"""

from __future__ import annotations

import logging
import os
import platform
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional

import pandas as pd

from flowevade.config import PipelineError
from flowevade.eval_bench import ASR_DENOMINATOR, GridEntry, threat_matrix

from services.bench_jobs import utc_now_iso
from services.results_db import ResultsDb

logger = logging.getLogger(__name__)


class EmptyFilter(PipelineError):
    """Raised when no stored record matches a template's filter."""


COST_COLUMNS = ("attack", "memory_mb", "latency_ms", "bytes", "packets", "delay_ms", "asr_pct", "throughput")

COLUMN_DOCS: Dict[str, Dict[str, str]] = {
    "cost-table": {
        "attack": "attacker name (RL algorithm or baseline)",
        "memory_mb": "peak traced allocation of one pass plus resident artifact size, in MB",
        "latency_ms": "mean wall-clock time to perturb one flow, in ms",
        "bytes": "mean added ingress bytes per flow",
        "packets": "mean added ingress packets per flow",
        "delay_ms": "mean added flow duration per flow, in ms",
        "asr_pct": "attack success rate, in percent",
        "throughput": "successful evasions per second of attacker time",
    },
    "learning-figure": {
        "algorithm": "RL algorithm",
        "victim_kind": "classifier the agent trained against (white box)",
        "step": "environment steps consumed so far",
        "mean_reward": "mean per-step reward of the latest rollout",
        "evasion_rate": "share of finished episodes that ended undetected",
    },
    "tradeoff": {
        "steps": "episode length T",
        "asr": "attack success rate at this T",
        "median_latency_ms": "median deployment latency per flow, in ms",
        "mean_latency_ms": "mean deployment latency per flow, in ms",
        "feasible_bytes": "bytes a full-budget agent adds over one episode",
        "feasible_packets": "packets a full-budget agent adds over one episode",
        "feasible_delay_ms": "delay a full-budget agent adds over one episode",
        "latency_slope_ms": "fitted latency growth per unit of T, in ms",
        "r_squared": "goodness of the linear latency fit",
        "feasible_consistent": "whether the full-budget totals match at every T",
        "linear_ok": "whether the latency fit reaches r_squared >= 0.95",
    },
    "sensitivity": {
        "feature_group": "perturbable feature group (the others are held at zero)",
        "budget_value": "episode budget for the group in its own unit",
        "category": "attack category",
        "asr": "attack success rate within the category",
        "detected": "flows of the category the victim detects before perturbation",
    },
    "matrix": {
        "scope": "overall, victim_kind, dataset or target aggregation",
        "cell": "threat model: WhiteBox, GrayData, GrayModel or BlackBox",
        "asr": "aggregated attack success rate (empty when unavailable)",
        "victim_kind": "victim classifier kind for scoped rows",
        "target_dataset": "victim dataset for scoped rows",
    },
    "data-efficiency": {
        "size": "adversary corpus size",
        "row": "surrogate (one kind) or cell (threat-model aggregate)",
        "surrogate_kind": "surrogate kind for surrogate rows",
        "cell": "threat model for cell rows",
        "asr": "attack success rate (empty when the corpus was unusable)",
    },
}

TEMPLATE_KINDS: Dict[str, str] = {
    "cost-table": "cost",
    "learning-figure": "learning-curve",
    "tradeoff": "tradeoff",
    "sensitivity": "sensitivity",
    "matrix": "matrix",
    "data-efficiency": "data-efficiency",
}


@dataclass(frozen=True)
class ReportOutput:
    template: str
    table: pd.DataFrame
    csv_path: Path
    summary_path: Path


def _cost_table(frame: pd.DataFrame) -> pd.DataFrame:
    latest = frame.drop_duplicates(subset="attack", keep="last").copy()
    latest["asr_pct"] = latest["asr"] * 100.0
    return latest.loc[:, list(COST_COLUMNS)].reset_index(drop=True)


def _matrix_table(frame: pd.DataFrame) -> pd.DataFrame:
    entries = [
        GridEntry(
            target_dataset=row["target_dataset"],
            victim_kind=row["victim_kind"],
            train_dataset=row["train_dataset"],
            surrogate_kind=row["surrogate_kind"],
            asr=None if pd.isna(row["asr"]) else float(row["asr"]),
        )
        for row in frame.to_dict(orient="records")
    ]
    return pd.DataFrame(threat_matrix(entries).rows())


def _passthrough(frame: pd.DataFrame) -> pd.DataFrame:
    return frame.reset_index(drop=True)


_BUILDERS: Dict[str, Callable[[pd.DataFrame], pd.DataFrame]] = {
    "cost-table": _cost_table,
    "learning-figure": _passthrough,
    "tradeoff": _passthrough,
    "sensitivity": _passthrough,
    "matrix": _matrix_table,
    "data-efficiency": _passthrough,
}


def hardware_summary() -> Dict[str, Any]:
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "cpu_count": os.cpu_count(),
        "python": platform.python_version(),
    }


def _apply_filters(frame: pd.DataFrame, filters: Optional[Mapping[str, Any]]) -> pd.DataFrame:
    for column, wanted in (filters or {}).items():
        if column not in frame.columns:
            return frame.iloc[0:0]
        frame = frame[frame[column] == wanted]
    return frame


def _yes_no(flag: Any) -> str:
    return "yes" if bool(flag) else "no"


def _summary_text(template: str, table: pd.DataFrame, filters: Optional[Mapping[str, Any]]) -> str:
    lines = [
        f"Report: {template}",
        f"Generated: {utc_now_iso()}",
        f"Rows: {len(table)}",
        f"Filter: {dict(filters) if filters else 'none'}",
        f"ASR denominator: {ASR_DENOMINATOR}.",
        "",
        "Columns:",
    ]
    docs = COLUMN_DOCS.get(template, {})
    for column in table.columns:
        lines.append(f"  {column}: {docs.get(column, 'see results database payload')}")
    lines.append("")
    lines.append("Hardware:")
    for key, value in hardware_summary().items():
        lines.append(f"  {key}: {value}")
    if template == "cost-table":
        lines.append("")
        lines.append("Memory is measured with allocation tracing around one pass, not process RSS.")
    if template == "tradeoff" and not table.empty and {"feasible_consistent", "linear_ok"} <= set(table.columns):
        lines.append("")
        lines.append(f"Feasible totals identical across T: {_yes_no(table['feasible_consistent'].all())}")
        lines.append(f"Latency linear in T (r^2 >= 0.95): {_yes_no(table['linear_ok'].all())}")
    return "\n".join(lines) + "\n"


def render_report(
    db: ResultsDb,
    template: str,
    output_dir: Path,
    *,
    filters: Optional[Mapping[str, Any]] = None,
) -> ReportOutput:
    """Build one template's table from the results database and write it with its summary."""
    if template not in TEMPLATE_KINDS:
        raise PipelineError(f"unknown report template {template!r}; expected one of {sorted(TEMPLATE_KINDS)}")
    frame = _apply_filters(db.frame(TEMPLATE_KINDS[template]), filters)
    if frame.empty:
        raise EmptyFilter(f"no {TEMPLATE_KINDS[template]} records match the {template} filter {dict(filters or {})}")
    table = _BUILDERS[template](frame)

    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    csv_path = output_dir / f"{template}.csv"
    summary_path = output_dir / f"{template}.txt"
    table.to_csv(csv_path, index=False)
    summary_path.write_text(_summary_text(template, table, filters), encoding="utf-8")
    logger.info("Wrote %s report with %d row(s) to %s", template, len(table), csv_path)
    return ReportOutput(template=template, table=table, csv_path=csv_path, summary_path=summary_path)


def render_all(db: ResultsDb, output_dir: Path) -> List[ReportOutput]:
    """Render every template that has records; templates without any are skipped."""
    outputs: List[ReportOutput] = []
    for template in TEMPLATE_KINDS:
        try:
            outputs.append(render_report(db, template, output_dir))
        except EmptyFilter:
            logger.info("No records for the %s report", template)
    return outputs
