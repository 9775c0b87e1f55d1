"""Content-addressed blob store plus a JSON project index.

Projects are event-sourced: the stored preview is always reproducible by
replaying the edit history against the original latent. Writes to one
project are serialized by a per-project lock and guarded by an optimistic
version counter.
"""

from __future__ import annotations

import hashlib
import json
import threading
import uuid
from datetime import datetime, timezone
from pathlib import Path


class StaleVersionError(Exception):
    """The client acted on an outdated project version."""


class ProjectStore:
    def __init__(self, data_dir):
        self.root = Path(data_dir)
        (self.root / "blobs").mkdir(parents=True, exist_ok=True)
        (self.root / "projects").mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    # -- blobs -------------------------------------------------------------

    def put_blob(self, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()
        path = self.root / "blobs" / digest
        if not path.exists():
            tmp = path.with_suffix(".tmp-" + uuid.uuid4().hex)
            tmp.write_bytes(data)
            tmp.replace(path)
        return digest

    def get_blob(self, digest: str) -> bytes:
        return (self.root / "blobs" / digest).read_bytes()

    # -- projects ----------------------------------------------------------

    def _meta_path(self, project_id: str) -> Path:
        return self.root / "projects" / f"{project_id}.json"

    def lock(self, project_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(project_id, threading.Lock())

    def create(self, meta: dict) -> dict:
        project_id = uuid.uuid4().hex[:12]
        meta = {
            "id": project_id,
            "version": 0,
            "created_at": datetime.now(timezone.utc).isoformat(),
            "edits": [],
            "masks": {},
            "segmentation": None,
            **meta,
        }
        self._meta_path(project_id).write_text(json.dumps(meta))
        return meta

    def load(self, project_id: str) -> dict | None:
        path = self._meta_path(project_id)
        if not path.exists():
            return None
        return json.loads(path.read_text())

    def save(self, meta: dict) -> None:
        self._meta_path(meta["id"]).write_text(json.dumps(meta))

    def list_ids(self) -> list[str]:
        return sorted(p.stem for p in (self.root / "projects").glob("*.json"))

    def bump_version(self, meta: dict, expected: int) -> dict:
        if meta["version"] != expected:
            raise StaleVersionError(
                f"project at version {meta['version']}, request used {expected}"
            )
        meta["version"] += 1
        return meta
