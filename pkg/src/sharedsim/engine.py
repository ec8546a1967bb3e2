"""Streaming gate execution over an owned work range, with per-phase timers.

A range is processed as read -> compute -> write for every block, followed by
one write-back. With ``prefetch`` a reader thread fills a two-slot buffer so
block k+1 is fetched while block k is computed.
"""
from __future__ import annotations

import csv
import json
import logging
import multiprocessing
import queue
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Optional, Sequence

from .statecore import Circuit, Gate, apply_gate_chunkpair, check_gate

if TYPE_CHECKING:
    from .cluster import RunReport, WorkRange
    from .storage import ChunkPool, NetworkProfile

log = logging.getLogger(__name__)

MB = 2**20
CSV_COLUMNS = (
    "framework", "node", "gate_seq", "gate_label", "compute_ms", "read_ms", "write_ms",
    "writeback_ms", "total_ms", "speed_mb_s", "bytes_processed", "rep",
)


def speed_mb_s(nbytes: int, total_ms: float) -> float:
    if total_ms <= 0:
        return 0.0
    return (nbytes / MB) / (total_ms / 1e3)


@dataclass
class GateMetrics:
    node: int
    gate_seq: int
    gate_label: str
    compute_ms: float = 0.0
    read_ms: float = 0.0
    write_ms: float = 0.0
    writeback_ms: float = 0.0
    total_ms: float = 0.0
    bytes_processed: int = 0
    framework: str = "direct"

    @property
    def speed_mb_s(self) -> float:
        return speed_mb_s(self.bytes_processed, self.total_ms)

    @property
    def phase_sum_ms(self) -> float:
        return self.compute_ms + self.read_ms + self.write_ms + self.writeback_ms

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GateMetrics":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class RoundMetrics:
    round_seq: int
    total_ms: float
    bytes_processed: int
    worker_count: int
    compute_ms: float = 0.0  # constituent sums over workers
    read_ms: float = 0.0
    write_ms: float = 0.0
    writeback_ms: float = 0.0
    worker_speed_sum: float = 0.0
    framework: str = "direct"

    @property
    def aggregate_speed_mb_s(self) -> float:
        return speed_mb_s(self.bytes_processed, self.total_ms)


def aggregate_round(worker_metrics: Sequence[GateMetrics], round_wall_ms: float, round_seq: int = 0,
                    expected_workers: Optional[int] = None, framework: str = "direct") -> RoundMetrics:
    """Combine one barrier round's worker reports; speed is total bytes over round wall-clock."""
    if expected_workers is not None:
        nodes = sorted(m.node for m in worker_metrics)
        if nodes != list(range(expected_workers)):
            raise ValueError(f"round {round_seq}: expected reports from {expected_workers} workers, got nodes {nodes}")
    return RoundMetrics(
        round_seq=round_seq,
        total_ms=round_wall_ms,
        bytes_processed=sum(m.bytes_processed for m in worker_metrics),
        worker_count=len(worker_metrics),
        compute_ms=sum(m.compute_ms for m in worker_metrics),
        read_ms=sum(m.read_ms for m in worker_metrics),
        write_ms=sum(m.write_ms for m in worker_metrics),
        writeback_ms=sum(m.writeback_ms for m in worker_metrics),
        worker_speed_sum=sum(m.speed_mb_s for m in worker_metrics),
        framework=framework,
    )


# ---------------------------------------------------------------------------
# range execution

_DONE = object()


def _prefetched(blocks, load):
    """Yield ``load(b)`` for each block, reading ahead through a two-slot buffer."""
    slots: queue.Queue = queue.Queue(maxsize=2)
    stop = threading.Event()

    def reader():
        try:
            for b in blocks:
                if stop.is_set():
                    return
                slots.put(load(b))
        except BaseException as exc:  # handed to the consumer
            slots.put(exc)
            return
        slots.put(_DONE)

    th = threading.Thread(target=reader, name="prefetch", daemon=True)
    th.start()
    try:
        while True:
            item = slots.get()
            if item is _DONE:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        while th.is_alive():
            try:
                slots.get_nowait()
            except queue.Empty:
                th.join(0.01)


def execute_range(pool: "ChunkPool", work: "WorkRange", gate: Gate, n_qubits: int,
                  prefetch: bool = True) -> GateMetrics:
    """Apply ``gate`` to every chunk ``work`` owns, then write back once."""
    check_gate(gate, n_qubits)
    if pool.manifest.n_qubits != n_qubits:
        raise ValueError(f"pool holds {pool.manifest.n_qubits} qubits, gate targets a {n_qubits}-qubit state")
    metrics = GateMetrics(work.node, work.gate_seq, gate.label, framework=pool.framework)
    blocks = list(work.blocks())
    if not blocks:
        return metrics
    owned = work.chunk_ids()
    chunk_len = pool.manifest.chunk_len

    def load(block):
        lo, hi = block
        return lo, hi, pool.read_chunk(lo), None if hi is None else pool.read_chunk(hi)

    pool.set_fence(owned)
    before = pool.stats.snapshot()
    compute_s = 0.0
    t0 = time.perf_counter()
    try:
        source = _prefetched(blocks, load) if prefetch else map(load, blocks)
        for lo, hi, a, b in source:
            c0 = time.perf_counter()
            apply_gate_chunkpair(a, b, gate, lo * chunk_len, chunk_len)
            compute_s += time.perf_counter() - c0
            pool.write_chunk(lo, a)
            if hi is not None:
                pool.write_chunk(hi, b)
        pool.write_back()
    finally:
        pool.set_fence(None)
    total_s = time.perf_counter() - t0
    d = pool.stats.delta(before)
    if d.chunk_reads != len(owned) or d.chunk_writes != len(owned):
        raise AssertionError(
            f"gate {work.gate_seq} node {work.node}: {d.chunk_reads} reads / {d.chunk_writes} writes "
            f"for {len(owned)} owned chunks"
        )
    metrics.compute_ms = compute_s * 1e3
    metrics.read_ms = d.read_ms
    metrics.write_ms = d.write_ms
    metrics.writeback_ms = d.writeback_ms
    metrics.total_ms = total_s * 1e3
    metrics.bytes_processed = len(owned) * pool.chunk_bytes
    return metrics


# ---------------------------------------------------------------------------
# metrics files


def metrics_rows(report: "RunReport", rep: int = 0) -> list[dict]:
    """Node-gate rows followed by each gate's round row, in gate order."""
    rows = []
    by_gate: dict[int, list[GateMetrics]] = {}
    for m in report.gate_metrics:
        by_gate.setdefault(m.gate_seq, []).append(m)
    for r in report.rounds:
        for m in sorted(by_gate.get(r.round_seq, []), key=lambda m: m.node):
            rows.append({
                "framework": m.framework, "node": m.node, "gate_seq": m.gate_seq,
                "gate_label": m.gate_label, "compute_ms": m.compute_ms, "read_ms": m.read_ms,
                "write_ms": m.write_ms, "writeback_ms": m.writeback_ms, "total_ms": m.total_ms,
                "speed_mb_s": m.speed_mb_s, "bytes_processed": m.bytes_processed, "rep": rep,
            })
        rows.append({
            "framework": r.framework, "node": "round", "gate_seq": r.round_seq,
            "gate_label": f"Round-{r.round_seq}", "compute_ms": r.compute_ms, "read_ms": r.read_ms,
            "write_ms": r.write_ms, "writeback_ms": r.writeback_ms, "total_ms": r.total_ms,
            "speed_mb_s": r.aggregate_speed_mb_s, "bytes_processed": r.bytes_processed, "rep": rep,
        })
    return rows


def write_metrics_csv(path: str | Path, rows: Iterable[dict]) -> Path:
    """Write rows with the fixed column order; extra keys become trailing columns."""
    path = Path(path)
    rows = list(rows)
    columns = list(CSV_COLUMNS)
    for row in rows[:1]:
        columns += [k for k in row if k not in CSV_COLUMNS]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for row in rows:
            out = dict(row)
            for k in ("compute_ms", "read_ms", "write_ms", "writeback_ms", "total_ms", "speed_mb_s"):
                out[k] = f"{row[k]:.3f}"
            w.writerow(out)
    return path


def read_metrics_csv(path: str | Path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            for k in ("compute_ms", "read_ms", "write_ms", "writeback_ms", "total_ms", "speed_mb_s"):
                row[k] = float(row[k])
            for k in ("gate_seq", "bytes_processed", "rep"):
                row[k] = int(row[k])
            if row["node"] != "round":
                row["node"] = int(row["node"])
            rows.append(row)
    return rows


def write_metrics_json(path: str | Path, rows: Sequence[dict], **extra) -> Path:
    path = Path(path)
    path.write_text(json.dumps({**extra, "columns": list(CSV_COLUMNS), "rows": list(rows)}, indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# local orchestration


@dataclass
class BackendConfig:
    cache_bytes: int
    network: Optional["NetworkProfile"] = None
    prefetch: bool = True
    mode: str = "process"  # or "thread"
    timeout: float = 60.0
    pool_hook: Optional[object] = field(default=None, repr=False)  # thread mode only

    @property
    def framework(self) -> str:
        return "direct" if self.network is None else "emulated"


def run_circuit_local(manifest, circuit: Circuit, worker_count: int, backend: BackendConfig) -> "RunReport":
    """Run ``circuit`` on the pool with a coordinator here and ``worker_count`` local workers."""
    from .cluster import Coordinator, SessionConfig, run_worker
    from .storage import PoolManifest

    if not isinstance(manifest, PoolManifest):
        manifest = PoolManifest.load(manifest)
    for g in circuit.gates:
        check_gate(g, manifest.n_qubits)
    session = SessionConfig(
        manifest=str(manifest.path.resolve()),
        cache_bytes=backend.cache_bytes,
        network=None if backend.network is None else asdict(backend.network),
        prefetch=backend.prefetch,
    )
    coord = Coordinator(circuit, session, worker_count, timeout=backend.timeout)
    workers: list = []
    errors: list[BaseException] = []
    if backend.mode == "thread":
        def target(node):
            try:
                run_worker(node, coord.endpoint, pool_hook=backend.pool_hook)
            except BaseException as exc:
                errors.append(exc)
        for node in range(worker_count):
            th = threading.Thread(target=target, args=(node,), name=f"worker-{node}", daemon=True)
            th.start()
            workers.append(th)
    elif backend.mode == "process":
        if backend.pool_hook is not None:
            raise ValueError("pool_hook is only supported with mode='thread'")
        methods = multiprocessing.get_all_start_methods()
        ctx = multiprocessing.get_context("fork" if "fork" in methods else "spawn")
        for node in range(worker_count):
            p = ctx.Process(target=run_worker, args=(node, coord.endpoint), name=f"worker-{node}", daemon=True)
            p.start()
            workers.append(p)
    else:
        raise ValueError(f"unknown worker mode {backend.mode!r}")
    try:
        return coord.run()
    finally:
        for w in workers:
            w.join(timeout=backend.timeout)
            if isinstance(w, multiprocessing.process.BaseProcess) and w.is_alive():
                w.terminate()
        for exc in errors:
            log.debug("worker exited with %r", exc)
