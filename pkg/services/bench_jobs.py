"""Redis bookkeeping for bench tasks run by RQ workers.

Each job owns a meta hash, a capped event list and a pub/sub channel under
``bench:jobs:<id>``. A worker leaves its records in the meta hash; the
orchestrator collects them from there and stays the only writer of the
results file.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Any, Callable, Dict, Iterable, Mapping, Optional

import redis
from rq.exceptions import NoSuchJobError
from rq.job import Job

from flowevade.config import PipelineError, get_settings

logger = logging.getLogger(__name__)

LOG_LENGTH_SOFT_LIMIT = 500
BENCH_QUEUE = "evasion-bench"
RQ_JOB_PREFIX = "bench-"
TERMINAL_STATUSES = frozenset({"finished", "failed", "cancelled"})


class BenchJobFailed(PipelineError):
    """Raised when a queued bench task ends failed or cancelled."""


def utc_now_iso() -> str:
    """Return a compact ISO-8601 timestamp in UTC with trailing 'Z'."""
    return datetime.now(timezone.utc).isoformat().replace("+00:00", "Z")


def rq_job_id(job_id: str) -> str:
    return f"{RQ_JOB_PREFIX}{job_id}"


def get_redis_connection(url: Optional[str] = None) -> redis.Redis:
    """Create a Redis connection usable both by the pipeline and RQ workers."""
    return redis.from_url(url or get_settings().redis_url)


@dataclass(frozen=True)
class BenchJobKeys:
    meta: str
    log: str
    channel: str

    @classmethod
    def for_job(cls, job_id: str) -> "BenchJobKeys":
        base = f"bench:jobs:{job_id}"
        return cls(meta=f"{base}:meta", log=f"{base}:log", channel=f"{base}:stream")


def _to_field(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (dict, list, tuple, bool)):
        return json.dumps(value, ensure_ascii=True)
    return str(value)


def _from_field(raw: Any) -> Any:
    # Only containers and booleans round-trip through JSON; ids and names stay strings.
    text = raw.decode("utf-8") if isinstance(raw, bytes) else str(raw)
    if text == "":
        return None
    if text[0] in "{[" or text in ("true", "false"):
        try:
            return json.loads(text)
        except json.JSONDecodeError:
            return text
    return text


class BenchJobStore:
    """Track queued bench tasks: status, progress events, results and cancellation."""

    def __init__(self, redis_conn: redis.Redis, *, log_limit: int = LOG_LENGTH_SOFT_LIMIT) -> None:
        self.redis = redis_conn
        self.log_limit = log_limit

    def keys(self, job_id: str) -> BenchJobKeys:
        return BenchJobKeys.for_job(job_id)

    # ------------------------------------------------------------------
    # Lifecycle
    # ------------------------------------------------------------------
    def bootstrap(
        self,
        job_id: str,
        *,
        task: str,
        config_hash: str,
        output_dir: str,
        created_by: Optional[str] = None,
    ) -> Dict[str, Any]:
        """Reset job state and store initial metadata."""
        keys = self.keys(job_id)
        created_at = utc_now_iso()
        meta: Dict[str, Any] = {
            "job_id": job_id,
            "status": "queued",
            "task": task,
            "config_hash": config_hash,
            "output_dir": output_dir,
            "created_at": created_at,
            "updated_at": created_at,
        }
        if created_by:
            meta["created_by"] = created_by

        pipe = self.redis.pipeline()
        pipe.delete(keys.log, keys.meta)
        pipe.hset(keys.meta, mapping={key: _to_field(value) for key, value in meta.items()})
        pipe.execute()
        self.append_event(job_id, "status", {"status": "queued", "meta": meta})
        return meta

    def update_status(self, job_id: str, status: str, **extra: Any) -> Dict[str, Any]:
        """Persist and broadcast a status transition."""
        payload = {"status": status, "updated_at": utc_now_iso(), **extra}
        self.merge_meta(job_id, payload)
        self.append_event(job_id, "status", payload)
        return payload

    def publish_progress(self, job_id: str, message: str) -> None:
        self.append_event(job_id, "progress", {"message": message})

    def finish(self, job_id: str, records: Mapping[str, Any]) -> Dict[str, int]:
        """Store a task's records by kind and mark the job finished."""
        counts = {kind: len(rows) for kind, rows in records.items()}
        self.merge_meta(job_id, {"result": dict(records), "completed_at": utc_now_iso()})
        self.append_event(job_id, "completed", {"records": counts})
        self.update_status(job_id, "finished")
        return counts

    def fail(self, job_id: str, error: str, *, traceback_text: Optional[str] = None) -> None:
        payload = {"message": error}
        if traceback_text:
            payload["traceback"] = traceback_text
        self.append_event(job_id, "error", payload)
        self.update_status(job_id, "failed", error=error)

    def is_terminal(self, job_id: str) -> bool:
        return self.get_meta(job_id).get("status") in TERMINAL_STATUSES

    # ------------------------------------------------------------------
    # Event log
    # ------------------------------------------------------------------
    def append_event(
        self,
        job_id: str,
        event_type: str,
        payload: Dict[str, Any],
        *,
        origin: str = "system",
    ) -> Dict[str, Any]:
        keys = self.keys(job_id)
        message = {"type": event_type, "origin": origin, "payload": payload, "timestamp": utc_now_iso()}
        raw = json.dumps(message, ensure_ascii=True)
        pipe = self.redis.pipeline()
        pipe.rpush(keys.log, raw)
        pipe.ltrim(keys.log, -self.log_limit, -1)
        pipe.publish(keys.channel, raw)
        pipe.execute()
        return message

    def log_lines(self, job_id: str) -> Iterable[Dict[str, Any]]:
        for raw in self.redis.lrange(self.keys(job_id).log, 0, -1):
            text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
            try:
                yield json.loads(text)
            except json.JSONDecodeError:
                yield {"type": "progress", "origin": "system", "payload": {"message": text}, "timestamp": None}

    # ------------------------------------------------------------------
    # Meta
    # ------------------------------------------------------------------
    def get_meta(self, job_id: str) -> Dict[str, Any]:
        stored = self.redis.hgetall(self.keys(job_id).meta)
        return {
            (key.decode("utf-8") if isinstance(key, bytes) else key): _from_field(value)
            for key, value in stored.items()
        }

    def merge_meta(self, job_id: str, data: Mapping[str, Any]) -> None:
        self.redis.hset(self.keys(job_id).meta, mapping={key: _to_field(value) for key, value in data.items()})

    # ------------------------------------------------------------------
    # Cancellation
    # ------------------------------------------------------------------
    def request_cancel(self, job_id: str, *, cancelled_by: Optional[str] = None) -> Dict[str, Any]:
        timestamp = utc_now_iso()
        update: Dict[str, Any] = {"cancel_requested": True, "cancel_requested_at": timestamp}
        if cancelled_by:
            update["cancelled_by"] = cancelled_by
        self.merge_meta(job_id, update)
        self.publish_progress(job_id, "Cancellation requested.")
        self.update_status(job_id, "cancelling", cancelled_at=timestamp, cancelled_by=cancelled_by)
        return update

    def is_cancel_requested(self, job_id: str) -> bool:
        value = self.redis.hget(self.keys(job_id).meta, "cancel_requested")
        return value is not None and _from_field(value) in (True, "1", "True", "yes")

    # ------------------------------------------------------------------
    # Orchestrator side
    # ------------------------------------------------------------------
    def worker_failure(self, job_id: str) -> Optional[str]:
        """Why RQ gave up on the job (failed, stopped, cancelled, gone), or None while it is alive."""
        try:
            job = Job.fetch(rq_job_id(job_id), connection=self.redis)
        except NoSuchJobError:
            return "the queued job no longer exists"
        if job.is_failed:
            reason = (job.exc_info or "").strip().splitlines()
            return f"the worker reported a failure: {reason[-1] if reason else 'no detail'}"
        if job.is_stopped or job.is_canceled:
            return "the worker stopped the job"
        return None

    def collect(
        self,
        pending: Mapping[str, str],
        *,
        poll_seconds: float,
        timeout_seconds: Optional[float] = None,
        check_worker: bool = False,
        progress_callback: Optional[Callable[[str], None]] = None,
    ) -> Dict[str, Dict[str, Any]]:
        """Poll ``task -> job_id`` pairs until all finish; return each task's records.

        ``check_worker`` also consults RQ's own job status, so a worker that died
        without updating the meta hash still ends the wait.
        """
        deadline = None if timeout_seconds is None else time.monotonic() + timeout_seconds
        waiting = dict(pending)
        results: Dict[str, Dict[str, Any]] = {}
        while waiting:
            for task, job_id in list(waiting.items()):
                meta = self.get_meta(job_id)
                status = meta.get("status")
                if status == "finished":
                    results[task] = meta.get("result") or {}
                    del waiting[task]
                    message = f"Bench task {task} finished"
                    if progress_callback:
                        progress_callback(message)
                    else:
                        logger.info(message)
                    continue
                if status in ("failed", "cancelled"):
                    raise BenchJobFailed(f"bench task {task} (job {job_id}) {status}: {meta.get('error') or 'no detail'}")
                reason = self.worker_failure(job_id) if check_worker else None
                if reason is not None:
                    self.fail(job_id, reason)
                    raise BenchJobFailed(f"bench task {task} (job {job_id}) failed: {reason}")
            if waiting and deadline is not None and time.monotonic() >= deadline:
                for task, job_id in waiting.items():
                    self.fail(job_id, f"no result within {timeout_seconds:.0f} s")
                raise BenchJobFailed(f"bench task(s) {', '.join(sorted(waiting))} timed out after {timeout_seconds:.0f} s")
            if waiting:
                time.sleep(poll_seconds)
        return results
