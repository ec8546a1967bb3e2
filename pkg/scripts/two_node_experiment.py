#!/usr/bin/env python3
"""Two-worker H/X experiment on qubit 13: per-node, per-gate timing tables for
both backends at two cache sizes, laid out like the reference tables.

    python scripts/two_node_experiment.py --qubits 24 --reps 3
"""
import argparse
import statistics
import tempfile
from pathlib import Path

from sharedsim.bench import reference_context, run_bench, scaled_cache_sizes
from sharedsim.engine import write_metrics_csv
from sharedsim.statecore import Circuit, Gate
from sharedsim.storage import NetworkProfile, create_pool, write_basis_state

COLS = ("compute_ms", "read_ms", "write_ms", "writeback_ms", "total_ms")


def table(cell) -> str:
    """Median over repetitions of every (node, gate) row, with the round rows after node 0."""
    reports = cell.reports
    n_gates = len(reports[0].rounds)
    nodes = sorted({m.node for m in reports[0].gate_metrics})
    lines = [f"{'framework':<9} {'node':<6} {'gate':<10}" + "".join(f"{c:>14}" for c in COLS) + f"{'MB/s':>9}"]
    for node in nodes:
        for g in range(n_gates):
            ms = [next(m for m in r.gate_metrics if m.node == node and m.gate_seq == g) for r in reports]
            vals = [statistics.median(getattr(m, c) for m in ms) for c in COLS]
            speed = statistics.median(m.speed_mb_s for m in ms)
            lines.append(f"{cell.framework:<9} {node:<6} {ms[0].gate_label:<10}"
                         + "".join(f"{v:>14.1f}" for v in vals) + f"{speed:>9.1f}")
            if node == nodes[0]:
                total = statistics.median(r.rounds[g].total_ms for r in reports)
                speed = statistics.median(r.rounds[g].aggregate_speed_mb_s for r in reports)
                lines.append(f"{'':<9} {'':<6} {'Round-' + str(g):<10}{'':>56}{total:>14.1f}{speed:>9.1f}")
    return "\n".join(lines)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--qubits", type=int, default=24)
    p.add_argument("--chunk-bytes", type=int, default=128 << 10)
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--latency-ms", type=float, default=1.0)
    p.add_argument("--bandwidth-gbps", type=float, default=1.25)
    p.add_argument("--pool-dir", help="scratch directory (default: a temporary one)")
    p.add_argument("--out", default="two_node.csv")
    args = p.parse_args()

    with tempfile.TemporaryDirectory(prefix="two-node-") as tmp:
        root = Path(args.pool_dir or tmp)
        manifest = create_pool(args.qubits, args.chunk_bytes, 2, root, force=True)
        write_basis_state(manifest, 1 << min(13, args.qubits - 1))
        target = min(13, args.qubits - 1)
        circuit = Circuit(args.qubits, [Gate.h(target), Gate.x(target)])
        caches = scaled_cache_sizes(manifest.total_bytes, manifest.chunk_bytes)
        profile = NetworkProfile(args.latency_ms / 1e3, args.bandwidth_gbps * 1e9, 1)
        result = run_bench(manifest, circuit, args.workers, caches, profile, reps=args.reps)

    for cb in result.cache_sizes:
        print(f"\ncache {cb >> 20} MiB ({args.qubits} qubits, median of {args.reps})")
        for fw in ("direct", "emulated"):
            print(table(result.cell(fw, cb)))
    print()
    for cb in result.cache_sizes:
        print(f"speedup @ {cb >> 20} MiB: {result.speedup(cb):.2f}x")
    print(reference_context())
    write_metrics_csv(args.out, result.rows())
    print(f"rows written to {args.out}")


if __name__ == "__main__":
    main()
