"""Content-addressed stage directories and the run manifest."""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence

from flowevade.config import PipelineError

from services.bench_jobs import utc_now_iso

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_SCHEMA_VERSION = 1
_CHUNK = 1 << 20


class MissingUpstreamArtifact(PipelineError):
    """Raised when a stage runs before the stages it depends on."""


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as handle:
        for chunk in iter(lambda: handle.read(_CHUNK), b""):
            digest.update(chunk)
    return digest.hexdigest()


def stage_key(stage: str, config_hash: str, upstream_keys: Sequence[str] = ()) -> str:
    material = json.dumps({"stage": stage, "config": config_hash, "upstream": list(upstream_keys)}, sort_keys=True)
    return hashlib.sha256(material.encode("utf-8")).hexdigest()


class ArtifactStore:
    """Tracks which stage outputs exist for a run directory.

    Each stage writes into ``<stage>-<key prefix>``; the manifest lists every
    file with its digest so cached stages can be verified before reuse.
    """

    def __init__(self, root: Path, stages: Sequence[str]) -> None:
        self.root = Path(root)
        self.stages = tuple(stages)
        self.manifest_path = self.root / MANIFEST_NAME

    # ------------------------------------------------------------------
    # Manifest I/O
    # ------------------------------------------------------------------
    def load_manifest(self) -> Dict[str, Any]:
        if not self.manifest_path.exists():
            return {"schema_version": MANIFEST_SCHEMA_VERSION, "stages": {}}
        try:
            with self.manifest_path.open("r", encoding="utf-8") as handle:
                manifest = json.load(handle)
        except json.JSONDecodeError as exc:
            raise PipelineError(f"{self.manifest_path} is not valid JSON: {exc}") from exc
        manifest.setdefault("stages", {})
        return manifest

    def _write_manifest(self, manifest: Mapping[str, Any]) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        staging = self.manifest_path.with_suffix(".json.tmp")
        with staging.open("w", encoding="utf-8") as handle:
            json.dump(manifest, handle, indent=2, sort_keys=True)
        staging.replace(self.manifest_path)

    # ------------------------------------------------------------------
    # Stage helpers
    # ------------------------------------------------------------------
    def stage_dir(self, stage: str, key: str) -> Path:
        return self.root / f"{stage}-{key[:12]}"

    def entry(self, stage: str) -> Optional[Dict[str, Any]]:
        return self.load_manifest()["stages"].get(stage)

    def _files_intact(self, entry: Mapping[str, Any]) -> bool:
        stage_root = self.root / entry["dir"]
        for relative, digest in entry.get("files", {}).items():
            path = stage_root / relative
            if not path.is_file() or file_sha256(path) != digest:
                return False
        return True

    def is_cached(self, stage: str, key: str) -> bool:
        entry = self.entry(stage)
        if entry is None or entry.get("key") != key:
            return False
        if not self._files_intact(entry):
            logger.warning("Stage %s artifacts changed on disk; it will be rebuilt", stage)
            return False
        return True

    def require(self, stage: str) -> Dict[str, Any]:
        """Return the manifest entry of an upstream stage or raise."""
        entry = self.entry(stage)
        if entry is None:
            raise MissingUpstreamArtifact(f"stage {stage!r} has not been run in {self.root}")
        if not self._files_intact(entry):
            raise MissingUpstreamArtifact(f"artifacts of stage {stage!r} are missing or modified")
        return entry

    def path_of(self, stage: str, relative: str) -> Path:
        entry = self.require(stage)
        if relative not in entry.get("files", {}):
            raise MissingUpstreamArtifact(f"stage {stage!r} recorded no file {relative!r}")
        return self.root / entry["dir"] / relative

    def prepare(self, stage: str, key: str) -> Path:
        """Empty and recreate the directory a stage is about to fill."""
        target = self.stage_dir(stage, key)
        if target.exists():
            shutil.rmtree(target)
        target.mkdir(parents=True)
        return target

    def record(
        self,
        stage: str,
        key: str,
        *,
        config_hash: str,
        seeds: Mapping[str, int],
        versions: Mapping[str, str],
        summary: Optional[Mapping[str, Any]] = None,
    ) -> Dict[str, Any]:
        """Hash the stage directory into the manifest; later stages become stale and are dropped."""
        stage_root = self.stage_dir(stage, key)
        files = {
            path.relative_to(stage_root).as_posix(): file_sha256(path)
            for path in sorted(stage_root.rglob("*"))
            if path.is_file()
        }
        manifest = self.load_manifest()
        manifest["schema_version"] = MANIFEST_SCHEMA_VERSION
        manifest["config_hash"] = config_hash
        stages: Dict[str, Any] = manifest["stages"]

        for later in self.stages[self.stages.index(stage) + 1 :]:
            stale = stages.pop(later, None)
            if stale is not None:
                shutil.rmtree(self.root / stale["dir"], ignore_errors=True)
                logger.info("Dropped stale %s artifacts", later)
        previous = stages.get(stage)
        if previous is not None and previous["dir"] != stage_root.name:
            shutil.rmtree(self.root / previous["dir"], ignore_errors=True)

        entry = {
            "key": key,
            "dir": stage_root.name,
            "files": files,
            "seeds": dict(seeds),
            "versions": dict(versions),
            "summary": dict(summary or {}),
            "recorded_at": utc_now_iso(),
        }
        stages[stage] = entry
        self._write_manifest(manifest)
        return entry

    def unreferenced_files(self) -> Sequence[Path]:
        """Files under the run directory that the manifest does not list."""
        manifest = self.load_manifest()
        referenced = {self.manifest_path}
        for entry in manifest["stages"].values():
            referenced.update(self.root / entry["dir"] / relative for relative in entry.get("files", {}))
        if not self.root.exists():
            return []
        return [path for path in sorted(self.root.rglob("*")) if path.is_file() and path not in referenced]
