"""Coordinator/worker control plane.

Amplitude data never crosses these sockets: every worker reads and writes the
shared shard files itself. The control channel carries only small framed
messages (assignment, gate start, gate done + metrics, barrier release,
shutdown).

Wire format: a 4-byte big-endian length prefix followed by a UTF-8 JSON object
``{"kind": str, "gate_seq": int, "node": int, "payload": any}``.

Session sequence, per worker::

    worker -> ASSIGN (payload null)           registration, names the node id
    coord  -> ASSIGN (payload: session + one WorkRange per gate)
    for each gate g:
        coord  -> START_GATE g
        worker -> GATE_DONE g (payload: GateMetrics, or {"error": ...})
        coord  -> BARRIER_RELEASE g           only after every worker is done
    coord  -> SHUTDOWN
"""
from __future__ import annotations

import json
import logging
import selectors
import socket
import struct
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Iterator, Optional

from .engine import GateMetrics, RoundMetrics, aggregate_round, execute_range
from .statecore import AMP_BYTES, Circuit, Gate, GeometryError, is_power_of_two
from .storage import NetworkProfile, PoolManifest, open_pool

log = logging.getLogger(__name__)

ASSIGN = "ASSIGN"
START_GATE = "START_GATE"
GATE_DONE = "GATE_DONE"
BARRIER_RELEASE = "BARRIER_RELEASE"
SHUTDOWN = "SHUTDOWN"
MESSAGE_KINDS = (ASSIGN, START_GATE, GATE_DONE, BARRIER_RELEASE, SHUTDOWN)

_HEADER = struct.Struct(">I")
MAX_FRAME = 16 << 20
DEFAULT_TIMEOUT = 60.0


class ProtocolError(Exception):
    pass


class RunAborted(Exception):
    """A worker failed, vanished or timed out; ``report`` holds what finished."""

    def __init__(self, gate_seq: int, reason: str, report: "RunReport"):
        super().__init__(f"run aborted at gate {gate_seq}: {reason}")
        self.gate_seq = gate_seq
        self.reason = reason
        self.report = report


# ---------------------------------------------------------------------------
# work partitioning


@dataclass(frozen=True)
class WorkRange:
    """A half-open range ``[block_lo, block_hi)`` of blocks owned by one worker for one gate.

    With ``stride_chunks == 0`` a block is a single chunk (the gate's pairs
    never leave a chunk). Otherwise block ``p`` is the chunk pair
    ``(lo, lo + stride_chunks)`` where ``lo`` is ``p`` with a zero bit
    inserted at position log2(stride_chunks); the pair is always owned whole.
    """

    gate_seq: int
    node: int
    block_lo: int
    block_hi: int
    stride_chunks: int = 0

    def __len__(self) -> int:
        return self.block_hi - self.block_lo

    def blocks(self) -> Iterator[tuple[int, Optional[int]]]:
        s = self.stride_chunks
        if s == 0:
            for c in range(self.block_lo, self.block_hi):
                yield c, None
            return
        shift = s.bit_length() - 1
        for p in range(self.block_lo, self.block_hi):
            lo = ((p >> shift) << (shift + 1)) | (p & (s - 1))
            yield lo, lo + s

    def chunk_ids(self) -> list[int]:
        out = []
        for lo, hi in self.blocks():
            out.append(lo)
            if hi is not None:
                out.append(hi)
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorkRange":
        return cls(**d)


def partition_pairs(n_qubits: int, target: int, chunk_bytes: int, worker_count: int,
                    gate_seq: int = 0) -> list[WorkRange]:
    """Split a target-``target`` gate into one pair-closed, contiguous block range per worker."""
    if not is_power_of_two(worker_count):
        raise GeometryError(f"worker_count must be a power of two, got {worker_count}")
    if not 0 <= target < n_qubits:
        raise GeometryError(f"target {target} out of range for {n_qubits} qubits")
    if not is_power_of_two(chunk_bytes) or chunk_bytes < 2 * AMP_BYTES:
        raise GeometryError(f"chunk_bytes must be a power of two >= {2 * AMP_BYTES}, got {chunk_bytes}")
    total = (1 << n_qubits) * AMP_BYTES
    if chunk_bytes > total:
        raise GeometryError(f"chunk of {chunk_bytes} bytes exceeds the {total}-byte state")
    chunk_len = chunk_bytes // AMP_BYTES
    chunk_count = total // chunk_bytes
    stride = 1 << target
    if stride < chunk_len:
        stride_chunks, units = 0, chunk_count
    else:
        stride_chunks, units = stride // chunk_len, chunk_count // 2
    return [
        WorkRange(gate_seq, w, w * units // worker_count, (w + 1) * units // worker_count, stride_chunks)
        for w in range(worker_count)
    ]


# ---------------------------------------------------------------------------
# framing


@dataclass
class ControlMessage:
    kind: str
    gate_seq: int
    node: int
    payload: Any = None

    def __post_init__(self):
        if self.kind not in MESSAGE_KINDS:
            raise ProtocolError(f"unknown message kind {self.kind!r}")


def encode_message(msg: ControlMessage) -> bytes:
    body = json.dumps(
        {"kind": msg.kind, "gate_seq": msg.gate_seq, "node": msg.node, "payload": msg.payload},
        separators=(",", ":"),
    ).encode()
    if len(body) > MAX_FRAME:
        raise ProtocolError(f"frame of {len(body)} bytes exceeds {MAX_FRAME}")
    return _HEADER.pack(len(body)) + body


def decode_message(body: bytes) -> ControlMessage:
    try:
        doc = json.loads(body)
        return ControlMessage(doc["kind"], int(doc["gate_seq"]), int(doc["node"]), doc.get("payload"))
    except (ValueError, KeyError, TypeError) as exc:
        raise ProtocolError(f"malformed frame: {exc}") from exc


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        part = sock.recv(n - len(buf))
        if not part:
            raise ConnectionError("peer closed the control channel")
        buf += part
    return bytes(buf)


def send_message(sock: socket.socket, msg: ControlMessage) -> int:
    frame = encode_message(msg)
    sock.sendall(frame)
    return len(frame)


def recv_message(sock: socket.socket) -> tuple[ControlMessage, int]:
    (size,) = _HEADER.unpack(_recv_exact(sock, _HEADER.size))
    if size > MAX_FRAME:
        raise ProtocolError(f"frame of {size} bytes exceeds {MAX_FRAME}")
    return decode_message(_recv_exact(sock, size)), _HEADER.size + size


# ---------------------------------------------------------------------------
# coordinator


@dataclass
class RunReport:
    framework: str
    n_qubits: int
    worker_count: int
    gate_metrics: list[GateMetrics] = field(default_factory=list)
    rounds: list[RoundMetrics] = field(default_factory=list)
    trace: list[tuple[str, int, int]] = field(default_factory=list)  # (kind, gate_seq, node)
    control_bytes: dict[tuple[int, int], int] = field(default_factory=dict)  # (gate_seq, node) -> bytes
    assign_bytes: int = 0

    @property
    def bytes_processed(self) -> int:
        return sum(r.bytes_processed for r in self.rounds)

    @property
    def round_ms(self) -> float:
        return sum(r.total_ms for r in self.rounds)

    @property
    def aggregate_speed_mb_s(self) -> float:
        """All bytes over all barrier rounds of the run, MB/s with MB = 2^20 bytes."""
        ms = self.round_ms
        return (self.bytes_processed / 2**20) / (ms / 1e3) if ms > 0 else 0.0


@dataclass
class SessionConfig:
    """Everything a worker needs beyond its ranges; sent inside ASSIGN."""

    manifest: str
    cache_bytes: int
    network: Optional[dict] = None
    prefetch: bool = True

    @property
    def profile(self) -> Optional[NetworkProfile]:
        return None if self.network is None else NetworkProfile(**self.network)

    @property
    def framework(self) -> str:
        return "direct" if self.network is None else "emulated"


class Coordinator:
    """Single-threaded barrier loop. Call ``endpoint`` to hand to workers, then ``run``."""

    def __init__(self, circuit: Circuit, session: SessionConfig, worker_count: int,
                 timeout: float = DEFAULT_TIMEOUT, host: str = "127.0.0.1"):
        if not is_power_of_two(worker_count):
            raise GeometryError(f"worker_count must be a power of two, got {worker_count}")
        self.circuit = circuit
        self.session = session
        self.worker_count = worker_count
        self.timeout = timeout
        self.manifest = PoolManifest.load(session.manifest)
        if self.manifest.n_qubits != circuit.n_qubits:
            raise GeometryError(
                f"circuit has {circuit.n_qubits} qubits, pool has {self.manifest.n_qubits}"
            )
        self.ranges = self._plan()
        self._listener = socket.create_server((host, 0))
        self._listener.settimeout(timeout)
        self.endpoint = f"{host}:{self._listener.getsockname()[1]}"
        self._socks: dict[int, socket.socket] = {}
        self.report = RunReport(session.framework, circuit.n_qubits, worker_count)

    def _plan(self) -> list[list[WorkRange]]:
        by_target: dict[int, list[WorkRange]] = {}
        plan = []
        for g, gate in enumerate(self.circuit.gates):
            if gate.target not in by_target:
                by_target[gate.target] = partition_pairs(
                    self.circuit.n_qubits, gate.target, self.manifest.chunk_bytes, self.worker_count
                )
            plan.append([WorkRange(g, r.node, r.block_lo, r.block_hi, r.stride_chunks)
                         for r in by_target[gate.target]])
        return plan

    # -- messaging helpers ---------------------------------------------------

    def _send(self, node: int, msg: ControlMessage) -> int:
        n = send_message(self._socks[node], msg)
        self.report.trace.append((msg.kind, msg.gate_seq, node))
        return n

    def _charge(self, gate_seq: int, node: int, nbytes: int) -> None:
        key = (gate_seq, node)
        self.report.control_bytes[key] = self.report.control_bytes.get(key, 0) + nbytes

    def _broadcast(self, kind: str, gate_seq: int) -> None:
        for node in sorted(self._socks):
            n = self._send(node, ControlMessage(kind, gate_seq, node))
            if gate_seq >= 0:
                self._charge(gate_seq, node, n)

    def _abort(self, gate_seq: int, reason: str) -> RunAborted:
        log.error("aborting at gate %d: %s", gate_seq, reason)
        for node, sock in self._socks.items():
            try:
                send_message(sock, ControlMessage(SHUTDOWN, gate_seq, node))
            except OSError:
                pass
        self.close()
        return RunAborted(gate_seq, reason, self.report)

    # -- phases ----------------------------------------------------------------

    def _register(self) -> None:
        deadline = time.monotonic() + self.timeout
        while len(self._socks) < self.worker_count:
            self._listener.settimeout(max(deadline - time.monotonic(), 1e-3))
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                raise self._abort(-1, f"only {len(self._socks)}/{self.worker_count} workers connected")
            sock.settimeout(self.timeout)
            try:
                msg, _ = recv_message(sock)
            except (OSError, ProtocolError) as exc:
                sock.close()
                raise self._abort(-1, f"bad registration: {exc}")
            if msg.kind != ASSIGN or not 0 <= msg.node < self.worker_count or msg.node in self._socks:
                sock.close()
                raise self._abort(-1, f"unexpected registration {msg.kind} from node {msg.node}")
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._socks[msg.node] = sock
        session = asdict(self.session)
        gates = [g.to_dict() for g in self.circuit.gates]
        for node in sorted(self._socks):
            payload = {
                "session": session,
                "n_qubits": self.circuit.n_qubits,
                "gates": gates,
                "ranges": [plan[node].to_dict() for plan in self.ranges],
            }
            self.report.assign_bytes += self._send(node, ControlMessage(ASSIGN, -1, node, payload))

    def _collect(self, gate_seq: int) -> list[GateMetrics]:
        pending = set(self._socks)
        done: dict[int, GateMetrics] = {}
        deadline = time.monotonic() + self.timeout
        with selectors.DefaultSelector() as sel:
            for node, sock in self._socks.items():
                sel.register(sock, selectors.EVENT_READ, node)
            while pending:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise self._abort(gate_seq, f"timeout waiting for nodes {sorted(pending)}")
                for key, _ in sel.select(remaining):
                    node = key.data
                    try:
                        msg, nbytes = recv_message(self._socks[node])
                    except (OSError, ProtocolError) as exc:
                        raise self._abort(gate_seq, f"node {node} lost: {exc}")
                    self.report.trace.append((msg.kind, msg.gate_seq, node))
                    if msg.kind != GATE_DONE or msg.gate_seq != gate_seq:
                        raise self._abort(gate_seq, f"node {node} sent {msg.kind} for gate {msg.gate_seq}")
                    self._charge(gate_seq, node, nbytes)
                    if "error" in (msg.payload or {}):
                        raise self._abort(gate_seq, f"node {node} failed: {msg.payload['error']}")
                    done[node] = GateMetrics.from_dict(msg.payload)
                    pending.discard(node)
                    sel.unregister(key.fileobj)
        return [done[k] for k in sorted(done)]

    def run(self) -> RunReport:
        try:
            self._register()
            for g, gate in enumerate(self.circuit.gates):
                t0 = time.perf_counter()
                self._broadcast(START_GATE, g)
                metrics = self._collect(g)
                self._broadcast(BARRIER_RELEASE, g)
                wall_ms = (time.perf_counter() - t0) * 1e3
                self.report.gate_metrics.extend(metrics)
                self.report.rounds.append(
                    aggregate_round(metrics, wall_ms, round_seq=g, expected_workers=self.worker_count,
                                    framework=self.session.framework)
                )
            self._broadcast(SHUTDOWN, -1)
        except OSError as exc:
            raise self._abort(len(self.report.rounds), f"control channel error: {exc}")
        finally:
            self.close()
        return self.report

    def close(self) -> None:
        for sock in self._socks.values():
            try:
                sock.close()
            except OSError:
                pass
        self._socks.clear()
        self._listener.close()


def run_coordinator(circuit: Circuit, session: SessionConfig, worker_count: int,
                    start_workers: Callable[[str], Any], timeout: float = DEFAULT_TIMEOUT) -> RunReport:
    """Open the control endpoint, let ``start_workers(endpoint)`` launch workers, run all gates."""
    coord = Coordinator(circuit, session, worker_count, timeout=timeout)
    start_workers(coord.endpoint)
    return coord.run()


# ---------------------------------------------------------------------------
# worker


PoolHook = Callable[[Any, int], Any]


def run_worker(node: int, endpoint: str, pool_hook: Optional[PoolHook] = None,
               timeout: Optional[float] = None) -> None:
    """Serve one node until SHUTDOWN. ``pool_hook(pool, node)`` may wrap the pool (tests)."""
    host, port = endpoint.rsplit(":", 1)
    sock = socket.create_connection((host, int(port)), timeout=timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    pool = None
    try:
        send_message(sock, ControlMessage(ASSIGN, -1, node))
        msg, _ = recv_message(sock)
        if msg.kind == SHUTDOWN:
            return
        if msg.kind != ASSIGN:
            raise ProtocolError(f"node {node}: expected ASSIGN, got {msg.kind}")
        session = SessionConfig(**msg.payload["session"])
        n_qubits = msg.payload["n_qubits"]
        gates = [Gate.from_dict(d) for d in msg.payload["gates"]]
        ranges = [WorkRange.from_dict(d) for d in msg.payload["ranges"]]
        pool = open_pool(session.manifest, session.cache_bytes, session.profile)
        if pool_hook is not None:
            pool = pool_hook(pool, node) or pool
        while True:
            msg, _ = recv_message(sock)
            if msg.kind == SHUTDOWN:
                return
            if msg.kind != START_GATE:
                raise ProtocolError(f"node {node}: expected START_GATE, got {msg.kind}")
            g = msg.gate_seq
            try:
                metrics = execute_range(pool, ranges[g], gates[g], n_qubits, prefetch=session.prefetch)
            except Exception as exc:
                send_message(sock, ControlMessage(GATE_DONE, g, node, {"error": f"{type(exc).__name__}: {exc}"}))
                raise
            metrics.framework = session.framework
            send_message(sock, ControlMessage(GATE_DONE, g, node, metrics.to_dict()))
            msg, _ = recv_message(sock)
            if msg.kind == SHUTDOWN:
                return
            if msg.kind != BARRIER_RELEASE or msg.gate_seq != g:
                raise ProtocolError(f"node {node}: expected BARRIER_RELEASE {g}, got {msg.kind} {msg.gate_seq}")
            # next gate may hand our cached chunks to another worker
            pool.drop_cache()
    finally:
        if pool is not None:
            pool.close()
        sock.close()
