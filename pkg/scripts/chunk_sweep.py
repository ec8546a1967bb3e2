#!/usr/bin/env python3
"""Direct vs emulated throughput as a function of chunk size.

Every backing request pays a fixed latency on the emulated path, so the gap
shrinks as chunks grow. This is how the desk-scale default chunk was picked.

    python scripts/chunk_sweep.py --qubits 24 --chunks 131072 262144 524288 1048576
"""
import argparse
import tempfile

from sharedsim.bench import run_bench
from sharedsim.statecore import Circuit, Gate
from sharedsim.storage import NetworkProfile, create_pool, write_basis_state


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--qubits", type=int, default=24)
    p.add_argument("--chunks", type=int, nargs="+", default=[128 << 10, 256 << 10, 512 << 10, 1 << 20])
    p.add_argument("--cache-bytes", type=int, default=64 << 20)
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--sequential", action="store_true")
    args = p.parse_args()

    n = args.qubits
    target = min(13, n - 1)
    circuit = Circuit(n, [Gate.h(target), Gate.x(target)])
    print(f"{'chunk KiB':>10}{'direct MB/s':>14}{'emulated MB/s':>16}{'ratio':>8}")
    for chunk in args.chunks:
        with tempfile.TemporaryDirectory(prefix="sweep-") as tmp:
            m = create_pool(n, chunk, 2, tmp)
            write_basis_state(m, 1 << target)
            r = run_bench(m, circuit, args.workers, [args.cache_bytes], NetworkProfile(), reps=args.reps,
                          prefetch=not args.sequential)
        d = r.cell("direct", args.cache_bytes).median_speed
        e = r.cell("emulated", args.cache_bytes).median_speed
        print(f"{chunk >> 10:>10}{d:>14.1f}{e:>16.1f}{d / e:>8.2f}", flush=True)


if __name__ == "__main__":
    main()
