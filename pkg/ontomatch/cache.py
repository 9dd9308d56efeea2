"""
On-disk response cache for provider calls.

Entries are JSON files keyed by (provider name, SHA-256 of the request
bytes), so interrupted runs resume without repeating paid calls and any
change to a prompt, text or model name is a miss.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Callable

log = logging.getLogger(__name__)


def request_hash(*parts: str) -> str:
    digest = hashlib.sha256()
    for part in parts:
        digest.update(part.encode("utf-8"))
        digest.update(b"\x00")
    return digest.hexdigest()


class ResponseCache:
    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.hits = 0
        self.misses = 0
        self.warnings: list[str] = []
        self._counter_lock = threading.Lock()
        self._locks_guard = threading.Lock()
        self._key_locks: dict[tuple[str, str], list] = {}

    # ── internals ─────────────────────────────────────────────
    def _path(self, provider: str, digest: str) -> Path:
        safe_provider = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in provider)
        return self.directory / safe_provider / digest[:2] / f"{digest}.json"

    @contextmanager
    def _lock_for(self, key: tuple[str, str]):
        # one lock per in-flight key, dropped once no caller holds it
        with self._locks_guard:
            entry = self._key_locks.setdefault(key, [threading.Lock(), 0])
            entry[1] += 1
        try:
            with entry[0]:
                yield
        finally:
            with self._locks_guard:
                entry[1] -= 1
                if not entry[1]:
                    del self._key_locks[key]

    def _warn(self, message: str):
        log.warning(message)
        with self._counter_lock:
            self.warnings.append(message)

    def record(self, hit: bool):
        with self._counter_lock:
            if hit:
                self.hits += 1
            else:
                self.misses += 1

    # ── public API ────────────────────────────────────────────
    def lookup(self, provider: str, digest: str) -> tuple[bool, Any]:
        path = self._path(provider, digest)
        if not path.exists():
            return False, None
        try:
            entry = json.loads(path.read_text(encoding="utf-8"))
            if entry.get("provider") != provider or entry.get("request") != digest:
                raise ValueError("key mismatch")
            return True, entry["response"]
        except (OSError, ValueError, KeyError, TypeError, AttributeError) as e:
            self._warn(f"Corrupted cache entry {path.name} ({e}); recomputing")
            return False, None

    def store(self, provider: str, digest: str, response: Any):
        path = self._path(provider, digest)
        entry = {"provider": provider, "request": digest, "response": response}
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp_name = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as handle:
                json.dump(entry, handle, ensure_ascii=False)
            os.replace(tmp_name, path)
        except OSError as e:
            self._warn(f"Cannot write cache entry {path}: {e}")

    def cached_call(self, key: tuple[str, str], compute: Callable[[], Any]) -> Any:
        """Return the stored response for key, or compute, persist and return it.

        key is (provider name, request hash). Concurrent callers with the
        same key are serialized, so compute runs at most once per key.
        """
        provider, digest = key
        with self._lock_for(key):
            found, response = self.lookup(provider, digest)
            if found:
                self.record(hit=True)
                return response
            response = compute()
            self.record(hit=False)
            self.store(provider, digest, response)
            return response
