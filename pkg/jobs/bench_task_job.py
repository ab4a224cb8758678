from __future__ import annotations

import traceback
from pathlib import Path

from flowevade.config import PipelineError, load_pipeline_config
from flowevade.eval_bench import BenchError
from services.bench_jobs import BenchJobStore, get_redis_connection, utc_now_iso


class JobCancelled(RuntimeError):
    """Raised inside a running task once cancellation has been requested."""


def run_bench_task_job(job_id: str, *, task: str, config_path: str, output_dir: str) -> dict:
    """RQ entry point: run one bench task and hand its records back through the job meta."""
    from pipeline import run_bench_task

    store = BenchJobStore(get_redis_connection())

    def cancelled(message: str) -> dict:
        store.append_event(job_id, "cancelled", {"message": message})
        store.update_status(job_id, "cancelled", cancelled_at=utc_now_iso())
        return {"cancelled": True}

    store.update_status(job_id, "started", task=task)
    if store.is_cancel_requested(job_id):
        return cancelled(f"Bench task {task} cancelled before start.")

    def emit_progress(message: str) -> None:
        if store.is_cancel_requested(job_id):
            raise JobCancelled(task)
        store.publish_progress(job_id, message)

    try:
        config = load_pipeline_config(config_path)
        records = run_bench_task(task, config, Path(output_dir), progress_callback=emit_progress)
    except JobCancelled:
        return cancelled(f"Bench task {task} cancelled while running.")
    except (PipelineError, BenchError) as exc:
        store.fail(job_id, str(exc))
        raise
    except Exception as exc:  # pragma: no cover
        store.fail(job_id, f"Unexpected error: {exc}", traceback_text=traceback.format_exc())
        raise
    store.finish(job_id, records)
    return records
