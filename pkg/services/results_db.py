from __future__ import annotations

import json
import threading
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional

import pandas as pd

from services.bench_jobs import utc_now_iso

RESULTS_SCHEMA_VERSION = 1


class ResultsDb:
    """Append-only JSON-lines store of bench records.

    Every line carries the schema version, the record kind (the bench task
    that produced it) and the run it belongs to.
    """

    def __init__(self, path: Path, run_id: str) -> None:
        self.path = Path(path)
        self.run_id = run_id
        self._lock = threading.Lock()

    def append(self, kind: str, payload: Mapping[str, Any]) -> Dict[str, Any]:
        return self.extend(kind, [payload])[0]

    def extend(self, kind: str, payloads: Iterable[Mapping[str, Any]]) -> List[Dict[str, Any]]:
        recorded_at = utc_now_iso()
        records = [
            {
                "schema_version": RESULTS_SCHEMA_VERSION,
                "kind": kind,
                "run_id": self.run_id,
                "recorded_at": recorded_at,
                "payload": dict(payload),
            }
            for payload in payloads
        ]
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as handle:
                for record in records:
                    handle.write(json.dumps(record, sort_keys=True, default=str) + "\n")
        return records

    def records(self, kind: Optional[str] = None) -> List[Dict[str, Any]]:
        if not self.path.exists():
            return []
        with self.path.open("r", encoding="utf-8") as handle:
            rows = [json.loads(line) for line in handle if line.strip()]
        return [row for row in rows if kind is None or row["kind"] == kind]

    def frame(self, kind: str) -> pd.DataFrame:
        """Payloads of one kind as a flat table."""
        return pd.DataFrame([row["payload"] for row in self.records(kind)])
