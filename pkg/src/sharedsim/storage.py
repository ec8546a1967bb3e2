"""Tiered chunk storage: a per-handle LRU cache tier over shard files shared by all workers.

Two backends share one code path. ``ChunkPool`` talks to the shard files with
positional I/O (the direct shared-pool route). ``wrap_emulated_remote`` gives a
handle on the same shards that additionally pays a modelled network cost on
every backing read and write-back request, standing in for a replicated store
reached over TCP/IP.
"""
from __future__ import annotations

import json
import os
import shutil
import threading
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from .statecore import AMP_BYTES, AMP_DTYPE, is_power_of_two

MANIFEST_NAME = "pool.json"
FORMAT_VERSION = 1
MIN_CHUNK_BYTES = 32


class PoolError(Exception):
    pass


class ShardIOError(PoolError, OSError):
    pass


@dataclass(frozen=True)
class Shard:
    path: str
    length: int


@dataclass
class PoolManifest:
    n_qubits: int
    chunk_bytes: int
    shards: list[Shard]
    root: Path = field(default=Path("."), compare=False)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        self.shards = [s if isinstance(s, Shard) else Shard(**s) for s in self.shards]
        self.root = Path(self.root)
        if not is_power_of_two(self.chunk_bytes) or self.chunk_bytes < MIN_CHUNK_BYTES:
            raise PoolError(f"chunk_bytes must be a power of two >= {MIN_CHUNK_BYTES}, got {self.chunk_bytes}")
        if sum(s.length for s in self.shards) != self.total_bytes:
            raise PoolError("shard lengths do not add up to 2^n x 16 bytes")
        for s in self.shards:
            if s.length % self.chunk_bytes:
                raise PoolError(f"shard {s.path} length {s.length} not a multiple of chunk_bytes")

    @property
    def total_bytes(self) -> int:
        return (1 << self.n_qubits) * AMP_BYTES

    @property
    def chunk_len(self) -> int:
        return self.chunk_bytes // AMP_BYTES

    @property
    def chunk_count(self) -> int:
        return self.total_bytes // self.chunk_bytes

    @property
    def path(self) -> Path:
        return self.root / MANIFEST_NAME

    def shard_path(self, k: int) -> Path:
        return self.root / self.shards[k].path

    def locate(self, cid: int) -> tuple[int, int]:
        """ChunkId -> (shard index, byte offset within shard)."""
        if not 0 <= cid < self.chunk_count:
            raise PoolError(f"chunk {cid} out of range [0, {self.chunk_count})")
        off = cid * self.chunk_bytes
        for k, s in enumerate(self.shards):
            if off < s.length:
                return k, off
            off -= s.length
        raise AssertionError("unreachable")

    def to_json(self) -> str:
        doc = {
            "format_version": self.format_version,
            "n_qubits": self.n_qubits,
            "chunk_bytes": self.chunk_bytes,
            "shards": [asdict(s) for s in self.shards],
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def load(cls, path: str | Path) -> "PoolManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        doc = json.loads(path.read_text())
        if doc.get("format_version") != FORMAT_VERSION:
            raise PoolError(f"{path}: unsupported format version {doc.get('format_version')}")
        return cls(doc["n_qubits"], doc["chunk_bytes"], doc["shards"], root=path.parent)


def create_pool(n_qubits: int, chunk_bytes: int, shard_count: int, directory: str | Path,
                force: bool = False) -> PoolManifest:
    """Allocate zero-filled shard files totalling 2^n x 16 bytes and write the manifest."""
    directory = Path(directory)
    if n_qubits < 1:
        raise PoolError(f"n_qubits must be positive, got {n_qubits}")
    if not is_power_of_two(chunk_bytes) or chunk_bytes < MIN_CHUNK_BYTES:
        raise PoolError(f"chunk_bytes must be a power of two >= {MIN_CHUNK_BYTES}, got {chunk_bytes}")
    if shard_count < 1:
        raise PoolError("need at least one shard")
    total = (1 << n_qubits) * AMP_BYTES
    if total % (chunk_bytes * shard_count):
        raise PoolError(
            f"{total} bytes cannot be split into {shard_count} shards of whole {chunk_bytes}-byte chunks"
        )
    per_shard = total // shard_count
    manifest = PoolManifest(
        n_qubits, chunk_bytes,
        [Shard(f"shard-{k:03d}.amp", per_shard) for k in range(shard_count)],
        root=directory,
    )
    directory.mkdir(parents=True, exist_ok=True)
    if manifest.path.exists():
        old = PoolManifest.load(manifest.path)
        if not force and (old.n_qubits, old.chunk_bytes, old.shards) != (n_qubits, chunk_bytes, manifest.shards):
            raise PoolError(f"{manifest.path} already describes an incompatible pool (use force)")
        for k in range(len(old.shards)):
            old.shard_path(k).unlink(missing_ok=True)
    free = shutil.disk_usage(directory).free
    if free < total:
        raise PoolError(f"insufficient disk space: need {total} bytes, {free} free in {directory}")
    for k in range(shard_count):
        with open(manifest.shard_path(k), "wb") as fh:
            fh.truncate(per_shard)
    manifest.path.write_text(manifest.to_json())
    return manifest


@dataclass
class NetworkProfile:
    per_request_latency: float = 1e-3  # seconds
    bandwidth: float = 1.25e9  # bytes/second
    replication_factor: int = 1

    def __post_init__(self):
        if self.per_request_latency < 0:
            raise ValueError("latency must be >= 0")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be > 0")
        if self.replication_factor < 1:
            raise ValueError("replication_factor must be >= 1")

    def request_seconds(self, nbytes: int) -> float:
        return self.per_request_latency + nbytes / self.bandwidth


@dataclass
class IoStats:
    read_ms: float = 0.0
    write_ms: float = 0.0
    writeback_ms: float = 0.0
    bytes_read: int = 0  # from backing shards (misses)
    bytes_written: int = 0  # to backing shards (flushes)
    network_bytes: int = 0  # bytes charged to the emulated link, replication included
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    dirty_evictions: int = 0
    chunk_reads: int = 0  # logical read_chunk calls
    chunk_writes: int = 0  # logical write_chunk calls

    def snapshot(self) -> "IoStats":
        return IoStats(**asdict(self))

    def delta(self, before: "IoStats") -> "IoStats":
        a, b = asdict(self), asdict(before)
        return IoStats(**{k: a[k] - b[k] for k in a})


class CacheTier:
    """LRU residency tracking for chunk buffers, with dirty flags."""

    def __init__(self, capacity_bytes: int, chunk_bytes: int):
        if capacity_bytes < chunk_bytes:
            raise PoolError(f"cache of {capacity_bytes} bytes cannot hold one {chunk_bytes}-byte chunk")
        self.capacity_bytes = capacity_bytes
        self.chunk_bytes = chunk_bytes
        self._entries: OrderedDict[int, list] = OrderedDict()  # cid -> [array, dirty]

    @property
    def resident_bytes(self) -> int:
        return len(self._entries) * self.chunk_bytes

    def __contains__(self, cid: int) -> bool:
        return cid in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, cid: int) -> Optional[np.ndarray]:
        entry = self._entries.get(cid)
        if entry is None:
            return None
        self._entries.move_to_end(cid)
        return entry[0]

    def is_dirty(self, cid: int) -> bool:
        return self._entries[cid][1]

    def resident_ids(self) -> list[int]:
        return list(self._entries)

    def dirty_ids(self) -> list[int]:
        return sorted(cid for cid, (_, dirty) in self._entries.items() if dirty)

    def full(self) -> bool:
        return self.resident_bytes + self.chunk_bytes > self.capacity_bytes

    def victim(self) -> int:
        return next(iter(self._entries))

    def put(self, cid: int, data: np.ndarray, dirty: bool) -> None:
        assert cid in self._entries or not self.full(), "admission without room"
        self._entries[cid] = [data, dirty]
        self._entries.move_to_end(cid)
        assert self.resident_bytes <= self.capacity_bytes

    def mark_clean(self, cid: int) -> None:
        self._entries[cid][1] = False

    def pop(self, cid: int) -> np.ndarray:
        return self._entries.pop(cid)[0]

    def clear(self) -> None:
        self._entries.clear()


class ChunkPool:
    """One worker's handle on the shared pool: cache tier + positional shard I/O.

    Handles are cheap; every worker opens its own over the same shard files.
    A lock serialises cache bookkeeping so a prefetch thread may share the handle.
    """

    framework = "direct"

    def __init__(self, manifest: PoolManifest | str | Path, cache_bytes: int):
        if not isinstance(manifest, PoolManifest):
            manifest = PoolManifest.load(manifest)
        self.manifest = manifest
        self.chunk_bytes = manifest.chunk_bytes
        self.cache = CacheTier(cache_bytes, manifest.chunk_bytes)
        self.stats = IoStats()
        self._lock = threading.RLock()
        self._fds = [os.open(manifest.shard_path(k), os.O_RDWR) for k in range(len(manifest.shards))]
        self._fence: Optional[frozenset[int]] = None
        # Cache frames are allocated and touched once, up front, so no gate pays page faults.
        # Frames are never handed out (reads return copies), so recycling them is safe.
        frames = self.cache.capacity_bytes // self.chunk_bytes
        arena = np.zeros((frames, manifest.chunk_len), dtype=AMP_DTYPE)
        self._free: list[np.ndarray] = list(arena)
        self.closed = False

    # -- lifecycle ---------------------------------------------------------

    def close(self) -> None:
        if self.closed:
            return
        for fd in self._fds:
            os.close(fd)
        self.closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def set_fence(self, chunk_ids: Optional[Iterable[int]]) -> None:
        """Restrict access to ``chunk_ids`` (None lifts the restriction)."""
        self._fence = None if chunk_ids is None else frozenset(chunk_ids)

    def _check(self, cid: int) -> None:
        if not 0 <= cid < self.manifest.chunk_count:
            raise PoolError(f"chunk {cid} out of range [0, {self.manifest.chunk_count})")
        if self._fence is not None and cid not in self._fence:
            raise AssertionError(f"chunk {cid} is outside this worker's owned range")

    # -- backing I/O (overridden by the emulated backend) ---------------------

    def _backing_read(self, cid: int) -> np.ndarray:
        k, off = self.manifest.locate(cid)
        buf = self._alloc()
        try:
            n = os.preadv(self._fds[k], [buf], off)
        except OSError as exc:
            raise ShardIOError(f"read failed: {self.manifest.shard_path(k)} @ {off}: {exc}") from exc
        if n != self.chunk_bytes:
            raise ShardIOError(f"short read: {self.manifest.shard_path(k)} @ {off}: {n} bytes")
        self.stats.bytes_read += self.chunk_bytes
        return buf

    def _backing_write(self, cid: int, data: np.ndarray) -> int:
        k, off = self.manifest.locate(cid)
        try:
            n = os.pwrite(self._fds[k], data.data, off)
        except OSError as exc:
            raise ShardIOError(f"write of chunk {cid} failed: {self.manifest.shard_path(k)} @ {off}: {exc}") from exc
        if n != self.chunk_bytes:
            raise ShardIOError(f"short write of chunk {cid}: {n} bytes")
        self.stats.bytes_written += self.chunk_bytes
        return k

    # -- cache management ---------------------------------------------------

    def _alloc(self) -> np.ndarray:
        if not self._free:
            raise PoolError("cache frames exhausted (capacity accounting bug)")
        return self._free.pop()

    def _recycle(self, buf: np.ndarray) -> None:
        self._free.append(buf)

    def _make_room(self) -> float:
        """Evict LRU entries until one chunk fits; returns seconds spent flushing."""
        spent = 0.0
        while self.cache.full():
            cid = self.cache.victim()
            dirty = self.cache.is_dirty(cid)
            data = self.cache.pop(cid)
            self.stats.evictions += 1
            if dirty:
                t0 = time.perf_counter()
                self._backing_write(cid, data)
                spent += time.perf_counter() - t0
                self.stats.dirty_evictions += 1
            self._recycle(data)
        self.stats.writeback_ms += spent * 1e3
        return spent

    def read_chunk(self, cid: int) -> np.ndarray:
        """Return a private copy of chunk ``cid``."""
        self._check(cid)
        with self._lock:
            self.stats.chunk_reads += 1
            cached = self.cache.get(cid)
            if cached is not None:
                self.stats.hits += 1
                return cached.copy()
            t0 = time.perf_counter()
            evict_s = self._make_room()
            data = self._backing_read(cid)
            self.cache.put(cid, data, dirty=False)
            out = data.copy()
            self.stats.misses += 1
            self.stats.read_ms += (time.perf_counter() - t0 - evict_s) * 1e3
            return out

    def write_chunk(self, cid: int, block: np.ndarray) -> None:
        self._check(cid)
        block = np.asarray(block)
        if block.nbytes != self.chunk_bytes:
            raise PoolError(f"block is {block.nbytes} bytes, chunk is {self.chunk_bytes}")
        with self._lock:
            self.stats.chunk_writes += 1
            t0 = time.perf_counter()
            evict_s = 0.0
            cached = self.cache.get(cid)
            if cached is None:
                evict_s = self._make_room()
                cached = self._alloc()
            cached[...] = block.view(AMP_DTYPE)
            self.cache.put(cid, cached, dirty=True)
            self.stats.write_ms += (time.perf_counter() - t0 - evict_s) * 1e3

    def write_back(self) -> int:
        """Flush every dirty chunk, then fsync each touched shard once. Returns chunks flushed."""
        with self._lock:
            dirty = self.cache.dirty_ids()
            if not dirty:
                return 0
            t0 = time.perf_counter()
            touched = set()
            for cid in dirty:
                touched.add(self._backing_write(cid, self.cache.get(cid)))
                self.cache.mark_clean(cid)
            for k in sorted(touched):
                try:
                    os.fsync(self._fds[k])
                except OSError as exc:
                    raise ShardIOError(f"fsync failed: {self.manifest.shard_path(k)}: {exc}") from exc
            self.stats.writeback_ms += (time.perf_counter() - t0) * 1e3
            return len(dirty)

    def drop_cache(self) -> None:
        """Forget clean cached chunks; another worker may rewrite them after a barrier."""
        with self._lock:
            if self.cache.dirty_ids():
                raise PoolError("drop_cache with dirty chunks; call write_back first")
            self._discard_all()

    def _discard_all(self) -> None:
        for cid in self.cache.resident_ids():
            self._recycle(self.cache.pop(cid))

    # -- bulk helpers ---------------------------------------------------------

    def iter_chunks(self) -> Iterator[np.ndarray]:
        """Read every chunk straight from the shards, bypassing the cache."""
        for cid in range(self.manifest.chunk_count):
            k, off = self.manifest.locate(cid)
            raw = os.pread(self._fds[k], self.chunk_bytes, off)
            yield np.frombuffer(raw, dtype=AMP_DTYPE)

    def load_dense(self) -> np.ndarray:
        return np.concatenate(list(self.iter_chunks()))

    def store_dense(self, amps: np.ndarray) -> None:
        """Overwrite the whole pool from an in-memory vector and fsync."""
        amps = np.ascontiguousarray(amps, dtype=AMP_DTYPE)
        if amps.nbytes != self.manifest.total_bytes:
            raise PoolError(f"vector is {amps.nbytes} bytes, pool is {self.manifest.total_bytes}")
        with self._lock:
            self._discard_all()
            for cid in range(self.manifest.chunk_count):
                lo = cid * self.manifest.chunk_len
                k, off = self.manifest.locate(cid)
                os.pwrite(self._fds[k], amps[lo:lo + self.manifest.chunk_len].data, off)
            for fd in self._fds:
                os.fsync(fd)


class EmulatedRemotePool(ChunkPool):
    """Same shards and semantics, plus a slept network cost per backing request."""

    framework = "emulated"

    def __init__(self, manifest, cache_bytes: int, profile: NetworkProfile):
        super().__init__(manifest, cache_bytes)
        self.profile = profile
        self._owed = 0.0  # seconds still owed; negative after an oversleep

    def _pay(self, nbytes: int) -> None:
        # Oversleep on one request is credited to the next, so the cumulative
        # delay tracks the model instead of the scheduler's timer slack.
        self.stats.network_bytes += nbytes
        self._owed += self.profile.request_seconds(nbytes)
        if self._owed > 0:
            t0 = time.perf_counter()
            time.sleep(self._owed)
            self._owed -= time.perf_counter() - t0

    def _backing_read(self, cid):
        data = super()._backing_read(cid)
        self._pay(self.chunk_bytes)
        return data

    def _backing_write(self, cid, data):
        k = super()._backing_write(cid, data)
        self._pay(self.chunk_bytes * self.profile.replication_factor)
        return k


def open_pool(manifest, cache_bytes: int, profile: Optional[NetworkProfile] = None) -> ChunkPool:
    if profile is None:
        return ChunkPool(manifest, cache_bytes)
    return EmulatedRemotePool(manifest, cache_bytes, profile)


def wrap_emulated_remote(pool: ChunkPool, profile: NetworkProfile) -> EmulatedRemotePool:
    """A new handle on ``pool``'s shards that charges ``profile`` costs on backing I/O."""
    return EmulatedRemotePool(pool.manifest, pool.cache.capacity_bytes, profile)


def write_basis_state(manifest: PoolManifest, k: int) -> None:
    """Zero the pool and put amplitude 1 at basis index ``k``."""
    n = manifest.n_qubits
    if not 0 <= k < (1 << n):
        raise ValueError(f"basis index {k} out of range for {n} qubits")
    for s in range(len(manifest.shards)):
        with open(manifest.shard_path(s), "r+b") as fh:
            fh.truncate(0)
            fh.truncate(manifest.shards[s].length)
            os.fsync(fh.fileno())
    cid, within = divmod(k, manifest.chunk_len)
    shard, off = manifest.locate(cid)
    one = np.array([1.0], dtype=AMP_DTYPE)
    fd = os.open(manifest.shard_path(shard), os.O_RDWR)
    try:
        os.pwrite(fd, one.tobytes(), off + within * AMP_BYTES)
        os.fsync(fd)
    finally:
        os.close(fd)
