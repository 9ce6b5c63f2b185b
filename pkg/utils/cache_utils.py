# utils/cache_utils.py

import contextlib
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from utils.correlation_utils import AutocorrTable
from utils.errors import CacheError

try:
    import fcntl
except ImportError:  # pragma: no cover - non-POSIX platforms
    fcntl = None

logger = logging.getLogger(__name__)

CACHE_ENV = "FSLAB_CACHE_DIR"
CACHE_MAGIC = b"FSLAB001"


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "fslab")


class AutocorrCache:
    """
    Disk cache of AutocorrTables keyed by (sequence hash, H, averaging).

    Each entry is a binary gamma file plus a JSON sidecar; access goes through a lock
    file, shared for reads and exclusive for writes.
    """

    def __init__(self, directory: Optional[Path] = None, enabled: bool = True):
        self.directory = Path(directory) if directory is not None else default_cache_dir()
        self.enabled = enabled
        self.hits = 0
        self.misses = 0
        self._warned_unlocked = False

    @staticmethod
    def key(sequence_hash: str, H: int, averaging: str) -> str:
        return hashlib.sha256(f"{sequence_hash}|{int(H)}|{averaging}".encode()).hexdigest()

    def _paths(self, key: str):
        return self.directory / f"{key}.fsl", self.directory / f"{key}.json", self.directory / f"{key}.lock"

    @contextlib.contextmanager
    def _locked(self, lock_path: Path, exclusive: bool):
        self.directory.mkdir(parents=True, exist_ok=True)
        if fcntl is None:
            if not self._warned_unlocked:
                logger.warning("file locking unavailable; cache access is unlocked")
                self._warned_unlocked = True
            yield
            return
        with open(lock_path, "a") as handle:
            fcntl.flock(handle, fcntl.LOCK_EX if exclusive else fcntl.LOCK_SH)
            try:
                yield
            finally:
                fcntl.flock(handle, fcntl.LOCK_UN)

    def load(self, sequence_hash: str, H: int, averaging: str) -> Optional[AutocorrTable]:
        """Cached table, None when absent; raises CacheError on a damaged entry"""
        key = self.key(sequence_hash, H, averaging)
        data_path, meta_path, lock_path = self._paths(key)
        if not data_path.exists():
            return None
        with self._locked(lock_path, exclusive=False):
            try:
                meta = json.loads(meta_path.read_text())
                raw = data_path.read_bytes()
            except (OSError, ValueError) as e:
                raise CacheError(f"unreadable cache entry {key}: {e}")
        if raw[: len(CACHE_MAGIC)] != CACHE_MAGIC:
            raise CacheError(f"cache entry {key} has a bad header")
        gamma = np.frombuffer(raw[len(CACHE_MAGIC):], dtype="<c16").copy()
        if gamma.size != int(H) + 1 or meta.get("sequence_hash") != sequence_hash or meta.get("averaging") != averaging:
            raise CacheError(f"cache entry {key} does not match its key")
        if hashlib.sha256(raw).hexdigest() != meta.get("checksum"):
            raise CacheError(f"cache entry {key} failed its checksum")
        return AutocorrTable(H_max=int(H), gamma=gamma, N=int(meta["N"]), N_prime=int(meta["N_prime"]),
                             averaging=averaging, sequence_hash=sequence_hash)

    def store(self, table: AutocorrTable):
        key = self.key(table.sequence_hash, table.H_max, table.averaging)
        data_path, meta_path, lock_path = self._paths(key)
        raw = CACHE_MAGIC + np.ascontiguousarray(table.gamma, dtype="<c16").tobytes()
        meta = {
            "sequence_hash": table.sequence_hash,
            "H": table.H_max,
            "averaging": table.averaging,
            "N": table.N,
            "N_prime": table.N_prime,
            "checksum": hashlib.sha256(raw).hexdigest(),
        }
        with self._locked(lock_path, exclusive=True):
            data_path.write_bytes(raw)
            meta_path.write_text(json.dumps(meta, sort_keys=True))

    def get_or_compute(self, sequence_hash: str, H: int, averaging: str,
                       compute: Callable[[], AutocorrTable]) -> AutocorrTable:
        if not self.enabled:
            return compute()
        try:
            table = self.load(sequence_hash, H, averaging)
        except CacheError as e:
            logger.warning(f"{e}; recomputing")
            table = None
        if table is not None:
            self.hits += 1
            logger.info(f"autocorrelation cache hit (H={H}, {averaging})")
            return table
        self.misses += 1
        table = compute()
        self.store(table)
        return table
