"""Content-addressed embedding cache under REALDESC_CACHE."""

from __future__ import annotations

import hashlib
import os
from pathlib import Path

import numpy as np
from filelock import FileLock

CACHE_ENV = "REALDESC_CACHE"


def default_cache_root() -> Path:
    root = os.environ.get(CACHE_ENV)
    if root:
        return Path(root)
    return Path.home() / ".cache" / "realdesc"


def content_key(*parts: str | bytes) -> str:
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, str):
            part = part.encode("utf-8")
        h.update(part)
        h.update(b"\x1f")
    return h.hexdigest()


class EmbeddingCache:
    """Binary array store addressed by content keys, safe across processes."""

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root else default_cache_root()
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.npy"

    def get(self, key: str) -> np.ndarray | None:
        path = self._path(key)
        if not path.exists():
            return None
        return np.load(path)

    def put(self, key: str, array: np.ndarray) -> None:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        lock = FileLock(str(path) + ".lock")
        with lock:
            tmp = path.with_suffix(".tmp.npy")
            np.save(tmp, np.asarray(array))
            tmp.replace(path)

    def get_or_compute(self, key: str, compute) -> np.ndarray:
        hit = self.get(key)
        if hit is not None:
            return hit
        value = np.asarray(compute())
        self.put(key, value)
        return value
