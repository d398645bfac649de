"""Durable key-value store: append-only JSON log with last-write-wins replay.

Every put is appended and fsynced before it is visible, so a crash loses at
most the write in flight; an incomplete trailing line left by a crash is
ignored on replay.  Pass ``path=None`` for a purely in-memory store.
"""

from __future__ import annotations

import copy
import json
import os
import threading
from pathlib import Path


class KeyValueLog:
    def __init__(self, path=None):
        self._lock = threading.Lock()
        self._data: dict[str, object] = {}
        self._fh = None
        if path is not None:
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            if path.exists():
                self._replay(path)
            self._fh = path.open("a")

    def _replay(self, path: Path) -> None:
        text = path.read_text()
        for line in text.split("\n")[:-1]:
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError:
                continue
            if isinstance(entry, dict) and "key" in entry:
                self._data[entry["key"]] = entry.get("value")
        # a trailing fragment without a newline is a torn write; drop it

    def put(self, key: str, value) -> None:
        line = json.dumps({"key": key, "value": value})
        with self._lock:
            if self._fh is not None:
                self._fh.write(line + "\n")
                self._fh.flush()
                os.fsync(self._fh.fileno())
            self._data[key] = json.loads(line)["value"]

    def get(self, key: str):
        with self._lock:
            value = self._data.get(key)
        return copy.deepcopy(value)

    def __contains__(self, key: str) -> bool:
        with self._lock:
            return key in self._data

    def __len__(self) -> int:
        with self._lock:
            return len(self._data)

    def keys(self) -> list[str]:
        with self._lock:
            return list(self._data)

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None
