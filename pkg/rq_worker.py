"""Launch an RQ worker for queued bench tasks.

RQ resolves ``jobs.bench_task_job.run_bench_task_job`` by import path, so the
repository root goes on ``sys.path`` before the worker starts.

Usage:
    python rq_worker.py                      # listens to evasion-bench
    python rq_worker.py --burst              # drain the queue, then exit
    python rq_worker.py --redis-url redis://host:6379/1 other-queue
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

PROJECT_ROOT = Path(__file__).resolve().parent
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

import torch  # noqa: E402
from rq import Worker  # noqa: E402  (import after sys.path tweak)

from flowevade.config import get_settings  # noqa: E402
from services.bench_jobs import BENCH_QUEUE, get_redis_connection  # noqa: E402

logger = logging.getLogger("rq_worker")


def run_worker(queue_names: Sequence[str], *, burst: bool = False, redis_url: Optional[str] = None) -> bool:
    """Serve bench tasks from ``queue_names``; returns whether any job was processed."""
    threads = get_settings().threads
    torch.set_num_threads(threads)
    logger.info("Bench worker on %s (torch threads: %d, burst: %s)", ", ".join(queue_names), threads, burst)
    worker = Worker(list(queue_names), connection=get_redis_connection(redis_url))
    return worker.work(burst=burst)


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Launch the flow-evasion bench RQ worker.")
    parser.add_argument("queues", nargs="*", default=[BENCH_QUEUE], help=f"Queues to listen on (default {BENCH_QUEUE}).")
    parser.add_argument("--burst", action="store_true", help="Exit once the queues are empty.")
    parser.add_argument("--redis-url", default=None, help="Overrides REDIS_URL.")
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> None:
    args = parse_args(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    run_worker(tuple(args.queues), burst=args.burst, redis_url=args.redis_url)


if __name__ == "__main__":
    main()
