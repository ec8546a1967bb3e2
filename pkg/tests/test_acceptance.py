"""Acceptance gate: nine end-to-end criteria at their stated tolerances.

Each test records one PASS/FAIL line; the lines are printed in the terminal
summary (see conftest.py). Run alone with ``pytest tests/test_acceptance.py``
or ``python tests/test_acceptance.py``.
"""
import functools
import subprocess
import sys
import textwrap
import time

import numpy as np
import pytest

from oracle import check_partition
from sharedsim.analysis import (
    ComputeProfile, LinkProfile, MediaPrice, WorkloadParams, gates_per_second, required_gate_rate, state_bytes,
    storage_cost_usd, transfer_seconds,
)
from sharedsim.bench import REFERENCE_DIRECT_MB_S, REFERENCE_REMOTE_MB_S, run_bench
from sharedsim.cluster import partition_pairs
from sharedsim.engine import (
    BackendConfig, metrics_rows, read_metrics_csv, run_circuit_local, write_metrics_csv,
)
from sharedsim.statecore import (
    Circuit, Gate, apply_gate_dense, apply_gate_streaming, init_basis_state, norm_sq,
    random_circuit,
)
from sharedsim.storage import ChunkPool, NetworkProfile, create_pool, write_basis_state

RESULTS: list[str] = []
MB = 2**20
DESK_N = 24
DESK_CHUNK = 128 << 10


def criterion(num: int, title: str):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
                RESULTS.append(f"FAIL  {num}. {title}: {msg}")
                raise
            RESULTS.append(f"PASS  {num}. {title}: {detail} ({time.perf_counter() - t0:.1f} s)")
        return run
    return wrap


def _state(manifest) -> np.ndarray:
    with ChunkPool(manifest, manifest.chunk_bytes) as pool:
        return pool.load_dense()


@pytest.fixture(scope="module")
def desk_pool(tmp_path_factory):
    return create_pool(DESK_N, DESK_CHUNK, 2, tmp_path_factory.mktemp("desk"))


@pytest.fixture(scope="module")
def reference_run(desk_pool, tmp_path_factory):
    """The two-gate circuit on e_8192 at desk scale, two worker processes, direct backend."""
    write_basis_state(desk_pool, 8192)
    circ = Circuit(DESK_N, [Gate.h(13), Gate.x(13)])
    t0 = time.perf_counter()
    report = run_circuit_local(desk_pool, circ, 2, BackendConfig(cache_bytes=64 * MB))
    elapsed = time.perf_counter() - t0
    csv_path = write_metrics_csv(tmp_path_factory.mktemp("csv") / "metrics.csv", metrics_rows(report))
    return report, elapsed, csv_path, _state(desk_pool)


@pytest.fixture(scope="module")
def desk_bench(desk_pool):
    circ = Circuit(DESK_N, [Gate.h(13), Gate.x(13)])
    return run_bench(desk_pool, circ, 2, [64 * MB, 128 * MB], NetworkProfile(1e-3, 1.25e9, 1), reps=5)


@criterion(1, "oracle equivalence over 200 random circuits")
def test_1_oracle_equivalence(tmp_path):
    rng = np.random.default_rng(2024)
    worst = 0.0
    t0 = time.perf_counter()
    for trial in range(200):
        n = int(rng.integers(2, 13))
        workers = int(rng.choice([1, 2, 4]))
        chunk_bytes = 16 << int(rng.integers(1, n + 1))
        shards = 2 if (1 << n) * 16 >= 2 * chunk_bytes else 1
        k = int(rng.integers(1 << n))
        circ = random_circuit(n, 20, rng)
        m = create_pool(n, chunk_bytes, shards, tmp_path / f"p{trial}")
        write_basis_state(m, k)
        run_circuit_local(m, circ, workers, BackendConfig(cache_bytes=4 * chunk_bytes, mode="thread"))
        want = init_basis_state(n, k)
        for g in circ:
            apply_gate_dense(want, g)
        dev = float(np.abs(_state(m) - want.amplitudes).max())
        worst = max(worst, dev)
        assert dev <= 1e-12, f"trial {trial} (n={n}, workers={workers}, chunk={chunk_bytes}): deviation {dev:.2e}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 120, f"took {elapsed:.0f} s, budget 120 s"
    return f"max deviation {worst:.1e} <= 1e-12"


@criterion(2, "H, X circuit at n=24, 2 workers, direct backend")
def test_2_reference_circuit(reference_run):
    report, elapsed, csv_path, state = reference_run
    want = init_basis_state(DESK_N, 8192)
    for g in (Gate.h(13), Gate.x(13)):
        apply_gate_dense(want, g)
    dev = float(np.abs(state - want.amplitudes).max())
    norm_err = abs(norm_sq(state) - 1)
    header = csv_path.read_text().splitlines()[0].split(",")
    table_cols = ["framework", "node", "gate_seq", "gate_label", "compute_ms", "read_ms", "write_ms",
                  "writeback_ms", "total_ms", "speed_mb_s"]
    assert dev <= 1e-12, f"deviation from oracle {dev:.2e}"
    assert norm_err <= 1e-10, f"norm error {norm_err:.2e}"
    assert header[:10] == table_cols, f"CSV header {header}"
    assert elapsed < 60, f"run took {elapsed:.1f} s"
    return f"deviation {dev:.1e}, norm error {norm_err:.1e}, run {elapsed:.1f} s"


@criterion(3, "direct backend at least 3.0x the emulated backend (median of 5, n=24)")
def test_3_backend_gap(desk_bench):
    ratios = {cb >> 20: desk_bench.speedup(cb) for cb in desk_bench.cache_sizes}
    detail = ", ".join(f"{r:.2f}x @ {cb} MiB" for cb, r in ratios.items())
    assert min(ratios.values()) >= 3.0, f"speedup {detail}"
    ref = REFERENCE_DIRECT_MB_S / REFERENCE_REMOTE_MB_S
    return f"{detail} (reference {ref:.2f}x)"


@criterion(4, "cache 64 -> 128 MiB changes median speed by < 10%")
def test_4_cache_insensitivity(desk_bench):
    effects = {fw: desk_bench.cache_effect(fw) for fw in ("direct", "emulated")}
    detail = ", ".join(f"{fw} {e * 100:+.1f}%" for fw, e in effects.items())
    assert all(abs(e) < 0.10 for e in effects.values()), detail
    return detail


@criterion(5, "analytic model values")
def test_5_analytic():
    checks = [
        ("G_GPU(1e15, 40)", gates_per_second(ComputeProfile("GPU", 1e15), 40), 227.37, 0.01),
        ("G_CPU(4.6e12, 40)", gates_per_second(ComputeProfile("CPU", 4.6e12), 40), 1.15, 0.005),
        ("Q_per(10000, 1000, 86400)", required_gate_rate(WorkloadParams(10000, 1000, 86400)), 115.74, 0.01),
        ("state_bytes(40)", state_bytes(40), 17_592_186_044_416, 0),
        ("transfer(40, 12.5e9)", transfer_seconds(state_bytes(40), LinkProfile("l", 12.5e9)), 1407.37, 0.1),
        ("cost(40, $5)", storage_cost_usd(40, MediaPrice("DRAM", 5)), 81_920, 0),
        ("cost(40, $20)", storage_cost_usd(40, MediaPrice("HBM", 20)), 327_680, 0),
        ("cost(40, $6)", storage_cost_usd(40, MediaPrice("DDR5", 6)), 98_304, 0),
    ]
    bad = [f"{name} = {got:.6g}, expected {want} +/- {tol}" for name, got, want, tol in checks
           if abs(got - want) > tol]
    assert not bad, "; ".join(bad)
    return f"{len(checks)} values within tolerance"


@criterion(6, "control bytes per gate per worker < 4 KiB, flat in n")
def test_6_control_plane(reference_run, tmp_path):
    per_n = {DESK_N: max(reference_run[0].control_bytes.values())}
    for n in (16, 20):
        m = create_pool(n, DESK_CHUNK if n > 16 else 16 << 10, 2, tmp_path / f"n{n}")
        write_basis_state(m, 8192)
        report = run_circuit_local(m, Circuit(n, [Gate.h(13), Gate.x(13)]), 2, BackendConfig(cache_bytes=4 * MB))
        per_n[n] = max(report.control_bytes.values())
    detail = ", ".join(f"n={n}: {b} B" for n, b in sorted(per_n.items()))
    assert max(per_n.values()) < 4096, detail
    assert max(per_n.values()) - min(per_n.values()) < 64, f"grows with n: {detail}"
    return detail


@criterion(7, "exhaustive partition coverage, disjointness and pair-closure for n <= 16")
def test_7_partition():
    cases = 0
    for n in range(1, 17):
        for log_chunk in range(1, n + 1):
            chunk_bytes = 16 << log_chunk
            for t in range(n):
                for workers in (1, 2, 4):
                    check_partition(n, t, chunk_bytes, partition_pairs(n, t, chunk_bytes, workers))
                    cases += 1
    return f"{cases} (n, chunk, t, workers) cases"


@criterion(8, "durability: kill after write_back, cold reopen is bit-exact")
def test_8_durability(tmp_path):
    m = create_pool(16, 4096, 2, tmp_path)
    write_basis_state(m, 8192)
    script = textwrap.dedent(f"""
        import os
        from sharedsim.cluster import partition_pairs
        from sharedsim.engine import execute_range
        from sharedsim.statecore import Gate
        from sharedsim.storage import ChunkPool
        pool = ChunkPool({str(m.path)!r}, 1 << 20)
        for g in (Gate.h(13), Gate.x(2)):
            for r in partition_pairs(16, g.target, 4096, 1):
                execute_range(pool, r, g, 16, prefetch=False)
            pool.drop_cache()
        print("flushed", flush=True)
        os.kill(os.getpid(), 9)
    """)
    proc = subprocess.run([sys.executable, "-c", script], capture_output=True, text=True, timeout=60)
    assert proc.returncode == -9 and "flushed" in proc.stdout, proc.stderr
    want = init_basis_state(16, 8192).amplitudes
    for g in (Gate.h(13), Gate.x(2)):
        apply_gate_streaming(want, g, 4096 // 16)
    got = _state(m)
    assert got.tobytes() == want.tobytes(), "reopened pool differs from the flushed state"
    return f"{m.total_bytes} bytes identical after SIGKILL"


@criterion(9, "metric self-consistency within 1%")
def test_9_metrics(reference_run, desk_bench, tmp_path):
    rows = read_metrics_csv(reference_run[2])
    bench_csv = write_metrics_csv(tmp_path / "bench.csv", desk_bench.rows())
    rows += read_metrics_csv(bench_csv)
    worst = 0.0
    for r in rows:
        if r["total_ms"] <= 0:
            continue
        recomputed = r["bytes_processed"] / MB / (r["total_ms"] / 1e3)
        err = abs(recomputed - r["speed_mb_s"]) / recomputed
        worst = max(worst, err)
        assert err <= 0.01, f"row {r['framework']} {r['node']} {r['gate_label']}: {r['speed_mb_s']} vs {recomputed}"
    groups: dict = {}
    for r in rows:
        key = (r["framework"], r.get("cache_bytes"), r["rep"], r["gate_seq"])
        groups.setdefault(key, []).append(r)
    for key, members in groups.items():
        (rnd,) = [r for r in members if r["node"] == "round"]
        nodes = [r for r in members if r["node"] != "round"]
        total = sum(r["bytes_processed"] for r in nodes)
        assert total == rnd["bytes_processed"], key
        recomputed = total / MB / (rnd["total_ms"] / 1e3)
        assert abs(recomputed - rnd["speed_mb_s"]) <= 0.01 * recomputed, key
        assert rnd["total_ms"] >= max(r["total_ms"] for r in nodes), key
    table = 2048 / 9.575
    assert abs(table - 213) / table <= 0.01, f"Table arithmetic {table:.1f} vs 213"
    return f"{len(rows)} rows, worst row error {worst * 100:.3f}%, 2048 MB / 9.575 s = {table:.1f} MB/s"


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", *sys.argv[1:]]))
