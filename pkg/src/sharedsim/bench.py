"""A/B benchmark of the direct and emulated-remote backends across cache sizes."""
from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from typing import Sequence

from .cluster import RunReport
from .engine import BackendConfig, metrics_rows, run_circuit_local
from .statecore import Circuit
from .storage import NetworkProfile, PoolManifest

# Reference throughputs of the two-node experiment we mirror (MB/s, averaged over rounds).
REFERENCE_DIRECT_MB_S = 207.5
REFERENCE_REMOTE_MB_S = 44.5
PHASES = ("compute_ms", "read_ms", "write_ms", "writeback_ms", "total_ms")


def reference_context() -> str:
    ratio = REFERENCE_DIRECT_MB_S / REFERENCE_REMOTE_MB_S
    return (
        f"reference: shared pool {REFERENCE_DIRECT_MB_S} MB/s vs replicated store {REFERENCE_REMOTE_MB_S} MB/s"
        f" = {ratio:.2f}x ({(ratio - 1) * 100:.0f}% improvement); absolute MB/s are hardware-specific"
    )


@dataclass
class BenchCell:
    framework: str
    cache_bytes: int
    speeds: list[float] = field(default_factory=list)  # aggregate MB/s per repetition
    phases: dict[str, list[float]] = field(default_factory=dict)  # per-repetition mean over node-gates
    reports: list[RunReport] = field(default_factory=list, repr=False)

    @property
    def median_speed(self) -> float:
        return statistics.median(self.speeds)

    def median_phase(self, name: str) -> float:
        return statistics.median(self.phases[name])


@dataclass
class BenchResult:
    cells: list[BenchCell]
    n_qubits: int
    worker_count: int
    reps: int

    def cell(self, framework: str, cache_bytes: int) -> BenchCell:
        return next(c for c in self.cells if c.framework == framework and c.cache_bytes == cache_bytes)

    @property
    def cache_sizes(self) -> list[int]:
        return sorted({c.cache_bytes for c in self.cells})

    def speedup(self, cache_bytes: int) -> float:
        return self.cell("direct", cache_bytes).median_speed / self.cell("emulated", cache_bytes).median_speed

    def cache_effect(self, framework: str) -> float:
        """Relative change of median speed from the smallest to the largest cache."""
        lo, hi = self.cache_sizes[0], self.cache_sizes[-1]
        a, b = self.cell(framework, lo).median_speed, self.cell(framework, hi).median_speed
        return (b - a) / a

    def rows(self) -> list[dict]:
        out = []
        for c in self.cells:
            for rep, report in enumerate(c.reports):
                for row in metrics_rows(report, rep):
                    out.append({**row, "cache_bytes": c.cache_bytes})
        return out

    def summary(self) -> dict:
        return {
            "n_qubits": self.n_qubits,
            "workers": self.worker_count,
            "reps": self.reps,
            "cells": [
                {"framework": c.framework, "cache_bytes": c.cache_bytes, "speeds_mb_s": c.speeds,
                 "median_speed_mb_s": c.median_speed,
                 "median_phases_ms": {p: c.median_phase(p) for p in PHASES}}
                for c in self.cells
            ],
            "speedup": {str(cb): self.speedup(cb) for cb in self.cache_sizes},
            "cache_effect": {fw: self.cache_effect(fw) for fw in ("direct", "emulated")},
            "reference_ratio": REFERENCE_DIRECT_MB_S / REFERENCE_REMOTE_MB_S,
        }

    def format(self) -> str:
        lines = [
            f"{self.n_qubits} qubits, {self.worker_count} workers, median of {self.reps} repetitions",
            f"{'framework':<10}{'cache MiB':>10}{'MB/s':>10}" + "".join(f"{p:>14}" for p in PHASES),
        ]
        for c in self.cells:
            lines.append(
                f"{c.framework:<10}{c.cache_bytes / 2**20:>10.0f}{c.median_speed:>10.1f}"
                + "".join(f"{c.median_phase(p):>14.1f}" for p in PHASES)
            )
        for cb in self.cache_sizes:
            lines.append(f"speedup direct/emulated @ {cb / 2**20:.0f} MiB cache: {self.speedup(cb):.2f}x")
        for fw in ("direct", "emulated"):
            lines.append(f"cache {self.cache_sizes[0] >> 20}->{self.cache_sizes[-1] >> 20} MiB changes {fw} speed by {self.cache_effect(fw) * 100:+.1f}%")
        lines.append(reference_context())
        return "\n".join(lines)


def run_bench(manifest: PoolManifest, circuit: Circuit, worker_count: int, cache_sizes: Sequence[int],
              profile: NetworkProfile, reps: int = 3, prefetch: bool = True, mode: str = "process",
              timeout: float = 60.0, warmup: bool = True) -> BenchResult:
    """Run every (backend, cache) cell ``reps`` times, interleaving cells to spread drift evenly."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    cells = [BenchCell(fw, cb) for fw in ("direct", "emulated") for cb in cache_sizes]
    configs = {
        id(c): BackendConfig(cache_bytes=c.cache_bytes, network=None if c.framework == "direct" else profile,
                             prefetch=prefetch, mode=mode, timeout=timeout)
        for c in cells
    }
    if warmup:
        run_circuit_local(manifest, circuit, worker_count, configs[id(cells[0])])
    for _ in range(reps):
        for c in cells:
            report = run_circuit_local(manifest, circuit, worker_count, configs[id(c)])
            c.reports.append(report)
            c.speeds.append(report.aggregate_speed_mb_s)
            for p in PHASES:
                c.phases.setdefault(p, []).append(
                    statistics.fmean(getattr(m, p) for m in report.gate_metrics)
                )
    return BenchResult(cells, circuit.n_qubits, worker_count, reps)


def scaled_cache_sizes(pool_bytes: int, chunk_bytes: int,
                       reference=(512 << 20, 1024 << 20), reference_pool: int = 2 << 30) -> list[int]:
    """Cache sizes keeping the reference cache-to-pool ratio for pools under 2 GiB."""
    if pool_bytes >= reference_pool:
        return list(reference)
    return [max(chunk_bytes, c * pool_bytes // reference_pool) for c in reference]

