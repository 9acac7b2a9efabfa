"""Embedded key-value store: in-memory dict or a single sqlite file."""
from __future__ import annotations

import os
import sqlite3
import threading
from typing import Iterator, Optional


class KVStore:
    """Bytes-in, bytes-out store. ``path=None`` keeps everything in memory."""

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self._lock = threading.RLock()
        self._mem: dict = {}
        self._db = None
        self._closed = False
        if path is not None:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            self._db = sqlite3.connect(path, check_same_thread=False)
            self._db.execute("CREATE TABLE IF NOT EXISTS kv (k TEXT PRIMARY KEY, v BLOB NOT NULL)")
            self._db.commit()

    def put(self, key: str, value: bytes) -> None:
        with self._lock:
            self._check_open()
            if self._db is None:
                self._mem[key] = bytes(value)
            else:
                self._db.execute("INSERT OR REPLACE INTO kv (k, v) VALUES (?, ?)", (key, bytes(value)))
                self._db.commit()

    def put_many(self, items) -> None:
        with self._lock:
            self._check_open()
            if self._db is None:
                for k, v in items:
                    self._mem[k] = bytes(v)
            else:
                self._db.executemany("INSERT OR REPLACE INTO kv (k, v) VALUES (?, ?)",
                                     ((k, bytes(v)) for k, v in items))
                self._db.commit()

    def get(self, key: str) -> Optional[bytes]:
        with self._lock:
            self._check_open()
            if self._db is None:
                return self._mem.get(key)
            row = self._db.execute("SELECT v FROM kv WHERE k = ?", (key,)).fetchone()
            return None if row is None else bytes(row[0])

    def delete(self, key: str) -> bool:
        with self._lock:
            self._check_open()
            if self._db is None:
                return self._mem.pop(key, None) is not None
            cur = self._db.execute("DELETE FROM kv WHERE k = ?", (key,))
            self._db.commit()
            return cur.rowcount > 0

    def items(self) -> Iterator[tuple]:
        with self._lock:
            self._check_open()
            if self._db is None:
                snapshot = list(self._mem.items())
            else:
                snapshot = [(k, bytes(v)) for k, v in self._db.execute("SELECT k, v FROM kv ORDER BY k")]
        return iter(snapshot)

    def keys(self) -> list:
        return [k for k, _ in self.items()]

    def __len__(self) -> int:
        with self._lock:
            if self._db is None:
                return len(self._mem)
            return self._db.execute("SELECT COUNT(*) FROM kv").fetchone()[0]

    def close(self) -> None:
        with self._lock:
            if self._db is not None:
                self._db.close()
                self._db = None
            self._closed = True

    def _check_open(self) -> None:
        if self._closed:
            raise RuntimeError("store is closed")

    def raw_bytes(self) -> bytes:
        """Everything the store would leave on disk, for leak scans."""
        with self._lock:
            if self._db is not None:
                self._db.commit()
                with open(self.path, "rb") as fh:
                    return fh.read()
            return b"".join(k.encode() + v for k, v in self._mem.items())
