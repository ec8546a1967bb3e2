import socket
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracle import check_partition
from sharedsim.cluster import (
    ASSIGN, BARRIER_RELEASE, GATE_DONE, SHUTDOWN, START_GATE, ControlMessage, Coordinator, ProtocolError,
    RunAborted, SessionConfig, WorkRange, decode_message, encode_message, partition_pairs, recv_message,
    run_worker, send_message,
)
from sharedsim.engine import BackendConfig, run_circuit_local
from sharedsim.statecore import Circuit, Gate, GeometryError, init_basis_state, run_dense
from sharedsim.storage import ChunkPool


def test_partition_reference_example():
    ranges = partition_pairs(27, 13, 1 << 20, 2)
    chunk_len = (1 << 20) // 16
    spans = [(min(r.chunk_ids()) * chunk_len, (max(r.chunk_ids()) + 1) * chunk_len - 1) for r in ranges]
    assert spans == [(0, 67_108_863), (67_108_864, 134_217_727)]
    assert all(r.stride_chunks == 0 for r in ranges)


def test_partition_cross_chunk_example():
    # chunk_len 4 amplitudes = 64 bytes; stride 8 pairs chunk 0<->2 and 1<->3
    r0, r1 = partition_pairs(4, 3, 64, 2)
    assert list(r0.blocks()) == [(0, 2)]
    assert list(r1.blocks()) == [(1, 3)]


@pytest.mark.parametrize("t", [0, 5, 9])
def test_partition_single_worker(t):
    (r,) = partition_pairs(10, t, 256, 1)
    assert sorted(r.chunk_ids()) == list(range(64))


def test_partition_rejects():
    with pytest.raises(GeometryError):
        partition_pairs(10, 2, 256, 3)
    with pytest.raises(GeometryError):
        partition_pairs(10, 10, 256, 2)
    with pytest.raises(GeometryError):
        partition_pairs(4, 0, 1024, 1)  # chunk larger than the state


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 14), st.data())
def test_partition_properties(n, data):
    t = data.draw(st.integers(0, n - 1))
    chunk_bytes = 16 << data.draw(st.integers(1, n))
    workers = data.draw(st.sampled_from([1, 2, 4, 8]))
    check_partition(n, t, chunk_bytes, partition_pairs(n, t, chunk_bytes, workers))


def test_workrange_round_trip():
    r = WorkRange(3, 1, 4, 9, 8)
    assert WorkRange.from_dict(r.to_dict()) == r


def test_wire_format():
    msg = ControlMessage(GATE_DONE, 4, 1, {"total_ms": 1.5})
    frame = encode_message(msg)
    assert int.from_bytes(frame[:4], "big") == len(frame) - 4
    assert decode_message(frame[4:]) == msg
    with pytest.raises(ProtocolError):
        decode_message(b"{not json")
    with pytest.raises(ProtocolError):
        ControlMessage("HELLO", 0, 0)


def test_socket_framing():
    a, b = socket.socketpair()
    with a, b:
        sent = send_message(a, ControlMessage(START_GATE, 2, 0))
        msg, got = recv_message(b)
        assert (msg.kind, msg.gate_seq, got) == (START_GATE, 2, sent)


def _backend(mode="thread", **kw):
    return BackendConfig(cache_bytes=8192, mode=mode, timeout=kw.pop("timeout", 20), **kw)


def test_message_trace(make_pool):
    m = make_pool(10, 256, k=5)
    report = run_circuit_local(m, Circuit(10, [Gate.h(3), Gate.x(3)]), 2, _backend())
    kinds = [k for k, _, _ in report.trace]
    per_gate = [START_GATE] * 2 + [GATE_DONE] * 2 + [BARRIER_RELEASE] * 2
    assert kinds == [ASSIGN] * 2 + per_gate * 2 + [SHUTDOWN] * 2


def test_single_worker_trace(make_pool):
    m = make_pool(6, 64, k=1)
    report = run_circuit_local(m, Circuit(6, [Gate.h(0)]), 1, _backend())
    assert [k for k, _, _ in report.trace] == [ASSIGN, START_GATE, GATE_DONE, BARRIER_RELEASE, SHUTDOWN]


def test_control_bytes_small(make_pool):
    m = make_pool(12, 512, k=1)
    report = run_circuit_local(m, Circuit(12, [Gate.h(11), Gate.x(2)]), 4, _backend())
    assert len(report.control_bytes) == 8
    assert max(report.control_bytes.values()) < 4096


def test_worker_failure_aborts(make_pool):
    m = make_pool(10, 256, k=0)

    def hook(pool, node):
        if node == 1:
            def broken(cid):
                raise OSError(f"injected read failure on chunk {cid}")
            pool.read_chunk = broken
        return pool

    with pytest.raises(RunAborted) as info:
        run_circuit_local(m, Circuit(10, [Gate.h(1)]), 2, _backend(pool_hook=hook))
    assert info.value.gate_seq == 0 and "injected" in info.value.reason


def _session(m):
    return SessionConfig(manifest=str(m.path), cache_bytes=8192)


def test_disconnect_aborts(make_pool):
    m = make_pool(8, 256, k=0)
    coord = Coordinator(Circuit(8, [Gate.x(0)]), _session(m), 2, timeout=10)

    def good():
        try:
            run_worker(0, coord.endpoint)
        except Exception:
            pass

    def crasher():
        host, port = coord.endpoint.split(":")
        s = socket.create_connection((host, int(port)))
        send_message(s, ControlMessage(ASSIGN, -1, 1))
        recv_message(s)
        recv_message(s)  # START_GATE, then die mid-gate
        s.close()

    threads = [threading.Thread(target=good), threading.Thread(target=crasher)]
    for t in threads:
        t.start()
    with pytest.raises(RunAborted) as info:
        coord.run()
    for t in threads:
        t.join(10)
    assert info.value.gate_seq == 0


def test_timeout_aborts(make_pool):
    m = make_pool(8, 256, k=0)
    coord = Coordinator(Circuit(8, [Gate.x(0)]), _session(m), 1, timeout=0.5)
    stop = threading.Event()

    def silent():
        host, port = coord.endpoint.split(":")
        with socket.create_connection((host, int(port))) as s:
            send_message(s, ControlMessage(ASSIGN, -1, 0))
            stop.wait(5)

    th = threading.Thread(target=silent)
    th.start()
    try:
        with pytest.raises(RunAborted, match="timeout"):
            coord.run()
    finally:
        stop.set()
        th.join()


def test_barrier_order(make_pool):
    """Every write_back of gate g happens before any read of gate g+1, on every worker."""
    m = make_pool(10, 256, k=3)
    log, lock = [], threading.Lock()

    def hook(pool, node):
        gate = [0]
        read, wb, drop = pool.read_chunk, pool.write_back, pool.drop_cache

        def read_chunk(cid):
            with lock:
                log.append(("read", gate[0], node))
            return read(cid)

        def write_back():
            out = wb()
            with lock:
                log.append(("flush", gate[0], node))
            return out

        def drop_cache():
            drop()
            gate[0] += 1

        pool.read_chunk, pool.write_back, pool.drop_cache = read_chunk, write_back, drop_cache
        return pool

    gates = [Gate.h(9), Gate.x(2), Gate.h(5)]
    run_circuit_local(m, Circuit(10, gates), 2, _backend(pool_hook=hook))
    for g in range(len(gates) - 1):
        last_flush = max(i for i, e in enumerate(log) if e[:2] == ("flush", g))
        first_read = min(i for i, e in enumerate(log) if e[:2] == ("read", g + 1))
        assert last_flush < first_read


def test_out_of_range_access_guarded(make_pool):
    m = make_pool(10, 256, k=0)

    def hook(pool, node):
        read = pool.read_chunk
        pool.read_chunk = lambda cid: read((cid + 32) % 64)  # reach into the other half
        return pool

    with pytest.raises(RunAborted, match="outside"):
        run_circuit_local(m, Circuit(10, [Gate.h(0)]), 2, _backend(pool_hook=hook))


@pytest.mark.parametrize("mode", ["thread", "process"])
def test_reference_circuit_n20(make_pool, mode):
    m = make_pool(20, 1 << 14, k=8192)
    circ = Circuit(20, [Gate.h(13), Gate.x(13)])
    report = run_circuit_local(m, circ, 2, BackendConfig(cache_bytes=1 << 20, mode=mode))
    want = run_dense(init_basis_state(20, 8192), circ.gates).amplitudes
    with ChunkPool(m, 1 << 14) as pool:
        got = pool.load_dense()
    assert np.abs(got - want).max() <= 1e-12
    assert len(report.gate_metrics) == 4
