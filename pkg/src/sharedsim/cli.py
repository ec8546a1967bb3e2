"""Command-line front end: ``python -m sharedsim {init,run,bench,verify,analyze}``.

Every flag can also be set through an environment variable named
``SHAREDSIM_<FLAG>`` (dashes become underscores), e.g. ``SHAREDSIM_QUBITS=20``.
Command-line values win over the environment.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analysis
from .bench import run_bench, scaled_cache_sizes
from .cluster import RunAborted
from .engine import (BackendConfig, metrics_rows, run_circuit_local, write_metrics_csv,
                     write_metrics_json)
from .statecore import (AMP_BYTES, Circuit, DenseState, Gate, GateError, GeometryError, apply_gate_dense,
                        load_circuit, random_circuit)
from .storage import (ChunkPool, NetworkProfile, PoolError, PoolManifest, create_pool,
                      write_basis_state)

log = logging.getLogger("sharedsim")

ENV_PREFIX = "SHAREDSIM_"
DESK_QUBITS = 24
DESK_CHUNK_BYTES = 128 << 10
DEFAULT_TARGET = 13
EXIT_USAGE = 2
EXIT_FAIL = 1


@dataclass
class RunConfig:
    n_qubits: int = DESK_QUBITS
    chunk_bytes: Optional[int] = None
    cache_bytes: Optional[int] = None
    worker_count: int = 2
    backend: str = "direct"
    latency_ms: float = 1.0
    bandwidth_gbps: float = 1.25  # GB/s (10^9 bytes/s)
    replication: int = 1
    circuit_path: Optional[str] = None
    pool_dir: str = "pool"
    repetitions: int = 1
    seed: int = 0
    sequential: bool = False
    target_qubit: int = DEFAULT_TARGET
    shards: int = 2
    threads: bool = False
    timeout: float = 60.0

    def validate(self) -> "RunConfig":
        if self.n_qubits < 1:
            raise GeometryError(f"--qubits must be positive, got {self.n_qubits}")
        if self.worker_count < 1 or self.worker_count & (self.worker_count - 1):
            raise GeometryError(f"--workers must be a power of two, got {self.worker_count}")
        if self.backend not in ("direct", "emulated"):
            raise GeometryError(f"--backend must be direct or emulated, got {self.backend}")
        if self.repetitions < 1:
            raise GeometryError("--reps must be >= 1")
        return self

    @property
    def profile(self) -> Optional[NetworkProfile]:
        if self.backend == "direct":
            return None
        return self.network_profile

    @property
    def network_profile(self) -> NetworkProfile:
        return NetworkProfile(self.latency_ms / 1e3, self.bandwidth_gbps * 1e9, self.replication)

    def default_chunk(self) -> int:
        total = (1 << self.n_qubits) * AMP_BYTES
        return max(32, min(DESK_CHUNK_BYTES, total // max(1, self.shards)))

    def shard_count(self) -> int:
        total = (1 << self.n_qubits) * AMP_BYTES
        chunk = self.chunk_bytes or self.default_chunk()
        return max(1, min(self.shards, total // chunk))


def default_basis_index(n: int) -> int:
    """Qubit 13 set, or the highest qubit when the register is smaller."""
    return 1 << min(DEFAULT_TARGET, n - 1)


def reference_circuit(n: int, target: int = DEFAULT_TARGET) -> Circuit:
    return Circuit(n, [Gate.h(target), Gate.x(target)])


# ---------------------------------------------------------------------------
# argument parsing


def _env(name: str, default, cast=str):
    raw = os.environ.get(ENV_PREFIX + name.upper().replace("-", "_"))
    if raw is None:
        return default
    if cast is bool:
        return raw.lower() in ("1", "true", "yes", "on")
    return cast(raw)


def _common(p: argparse.ArgumentParser, *names: str) -> None:
    opts = {
        "qubits": dict(type=int, default=_env("qubits", DESK_QUBITS, int), help="qubit count n"),
        "chunk-bytes": dict(type=int, default=_env("chunk-bytes", None, int),
                            help="chunk size in bytes (power of two, default 128 KiB)"),
        "cache-bytes": dict(type=int, default=_env("cache-bytes", None, int),
                            help="per-worker cache tier size in bytes"),
        "workers": dict(type=int, default=_env("workers", 2, int), help="worker count (power of two)"),
        "backend": dict(choices=("direct", "emulated"), default=_env("backend", "direct")),
        "latency-ms": dict(type=float, default=_env("latency-ms", 1.0, float),
                           help="emulated per-request latency"),
        "bandwidth-gbps": dict(type=float, default=_env("bandwidth-gbps", 1.25, float),
                               help="emulated link bandwidth in GB/s"),
        "replication": dict(type=int, default=_env("replication", 1, int),
                            help="emulated write-back replication factor"),
        "circuit": dict(default=_env("circuit", None), help="circuit file (h q / x q / u q <8 reals> / cx c t)"),
        "pool-dir": dict(default=_env("pool-dir", "pool"), help="directory holding pool.json and shards"),
        "reps": dict(type=int, default=_env("reps", 1, int), help="repetitions"),
        "seed": dict(type=int, default=_env("seed", 0, int)),
        "sequential": dict(action="store_true", default=_env("sequential", False, bool),
                           help="disable read-ahead (deterministic phase timings)"),
        "target-qubit": dict(type=int, default=_env("target-qubit", DEFAULT_TARGET, int),
                             help="qubit for the default H,X circuit"),
        "shards": dict(type=int, default=_env("shards", 2, int), help="shard file count"),
        "threads": dict(action="store_true", default=_env("threads", False, bool),
                        help="run workers as threads instead of processes"),
        "timeout": dict(type=float, default=_env("timeout", 60.0, float), help="per-barrier timeout (s)"),
    }
    for name in names:
        p.add_argument(f"--{name}", **opts[name])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sharedsim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="create a pool and write a basis state")
    _common(p, "qubits", "chunk-bytes", "shards", "pool-dir")
    p.add_argument("--basis-index", type=int, default=_env("basis-index", None, int),
                   help="initial basis state k (default: qubit 13 set)")
    p.add_argument("--force", action="store_true", help="replace an existing pool")

    run_flags = ("cache-bytes", "workers", "backend", "latency-ms", "bandwidth-gbps", "replication",
                 "circuit", "pool-dir", "reps", "sequential", "target-qubit", "threads", "timeout")
    p = sub.add_parser("run", help="run a circuit on an initialised pool")
    _common(p, *run_flags)
    p.add_argument("--out", help="metrics CSV path (default <pool-dir>/metrics.csv)")

    p = sub.add_parser("bench", help="direct vs emulated backends at two cache sizes")
    _common(p, *run_flags)
    p.add_argument("--cache-sizes", type=int, nargs="+", help="cache sizes to compare (bytes)")
    p.add_argument("--out", help="bench CSV path (default <pool-dir>/bench.csv)")
    p.set_defaults(reps=max(3, _env("reps", 3, int)))

    p = sub.add_parser("verify", help="compare an out-of-core run against the dense oracle")
    _common(p, "qubits", "chunk-bytes", "cache-bytes", "workers", "backend", "latency-ms", "bandwidth-gbps",
            "replication", "circuit", "seed", "sequential", "target-qubit", "shards", "threads", "timeout")
    p.add_argument("--pool-dir", default=_env("pool-dir", None),
                   help="use this initialised pool (default: a temporary one)")
    p.add_argument("--random-gates", type=int, default=_env("random-gates", None, int),
                   help="use a random circuit of this length")
    p.add_argument("--basis-index", type=int, default=None)
    p.add_argument("--max-oracle-qubits", type=int, default=_env("max-oracle-qubits", 26, int))
    p.add_argument("--tolerance", type=float, default=1e-12)
    p.add_argument("--corrupt-byte", type=int, default=None,
                   help="fault injection: corrupt the stored value holding this state byte after the run")

    p = sub.add_parser("analyze", help="analytic bottleneck and storage cost report")
    p.add_argument("--qubits", type=int, default=_env("analyze-qubits", 40, int))
    p.add_argument("--config", help="JSON profile table overriding the defaults")
    p.add_argument("--workload", type=float, nargs=3, metavar=("M_ITER", "N_GATE", "T_SECONDS"))
    p.add_argument("--price", action="append", default=[], metavar="LABEL=USD_PER_GB")
    p.add_argument("--compute", action="append", default=[], metavar="LABEL=FLOPS")
    p.add_argument("--link", action="append", default=[], metavar="LABEL=BYTES_PER_S")
    p.add_argument("--json", action="store_true", help="print the structured report")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    g = lambda name, default=None: getattr(args, name, default)  # noqa: E731
    return RunConfig(
        n_qubits=g("qubits", DESK_QUBITS),
        chunk_bytes=g("chunk_bytes"),
        cache_bytes=g("cache_bytes"),
        worker_count=g("workers", 2),
        backend=g("backend", "direct"),
        latency_ms=g("latency_ms", 1.0),
        bandwidth_gbps=g("bandwidth_gbps", 1.25),
        replication=g("replication", 1),
        circuit_path=g("circuit"),
        pool_dir=g("pool_dir") or "pool",
        repetitions=g("reps", 1),
        seed=g("seed", 0),
        sequential=g("sequential", False),
        target_qubit=g("target_qubit", DEFAULT_TARGET),
        shards=g("shards", 2),
        threads=g("threads", False),
        timeout=g("timeout", 60.0),
    ).validate()


# ---------------------------------------------------------------------------
# commands


def cmd_init(cfg: RunConfig, basis_index: Optional[int] = None, force: bool = False) -> PoolManifest:
    k = default_basis_index(cfg.n_qubits) if basis_index is None else basis_index
    if not 0 <= k < (1 << cfg.n_qubits):
        raise GeometryError(f"basis index {k} out of range for {cfg.n_qubits} qubits (k must be < {1 << cfg.n_qubits})")
    chunk = cfg.chunk_bytes or cfg.default_chunk()
    pool_dir = Path(cfg.pool_dir)
    if (pool_dir / "pool.json").exists() and not force:
        raise PoolError(f"{pool_dir} already holds a pool; pass --force to replace it")
    manifest = create_pool(cfg.n_qubits, chunk, cfg.shard_count(), pool_dir, force=force)
    write_basis_state(manifest, k)
    return manifest


def _circuit_for(cfg: RunConfig, n: int) -> Circuit:
    if cfg.circuit_path:
        if not Path(cfg.circuit_path).is_file():
            raise FileNotFoundError(f"circuit file not found: {cfg.circuit_path}")
        return load_circuit(cfg.circuit_path, n)
    return reference_circuit(n, cfg.target_qubit)


def _backend(cfg: RunConfig, manifest: PoolManifest) -> BackendConfig:
    cache_bytes = cfg.cache_bytes or scaled_cache_sizes(manifest.total_bytes, manifest.chunk_bytes)[0]
    return BackendConfig(cache_bytes=cache_bytes, network=cfg.profile, prefetch=not cfg.sequential,
                         mode="thread" if cfg.threads else "process", timeout=cfg.timeout)


def cmd_run(cfg: RunConfig, out: Optional[str] = None) -> list[dict]:
    manifest = PoolManifest.load(cfg.pool_dir)
    circuit = _circuit_for(cfg, manifest.n_qubits)
    backend = _backend(cfg, manifest)
    rows = []
    for rep in range(cfg.repetitions):
        report = run_circuit_local(manifest, circuit, cfg.worker_count, backend)
        rows += metrics_rows(report, rep)
    out_path = Path(out) if out else Path(cfg.pool_dir) / "metrics.csv"
    write_metrics_csv(out_path, rows)
    write_metrics_json(out_path.with_suffix(".json"), rows, n_qubits=manifest.n_qubits,
                       workers=cfg.worker_count, backend=backend.framework,
                       cache_bytes=backend.cache_bytes, chunk_bytes=manifest.chunk_bytes)
    print(format_rows(rows))
    print(f"metrics written to {out_path}")
    return rows


def cmd_bench(cfg: RunConfig, cache_sizes: Optional[Sequence[int]] = None, out: Optional[str] = None):
    manifest = PoolManifest.load(cfg.pool_dir)
    circuit = _circuit_for(cfg, manifest.n_qubits)
    if not cache_sizes:
        cache_sizes = [cfg.cache_bytes] if cfg.cache_bytes else scaled_cache_sizes(manifest.total_bytes, manifest.chunk_bytes)
    result = run_bench(manifest, circuit, cfg.worker_count, cache_sizes, cfg.network_profile,
                       reps=cfg.repetitions, prefetch=not cfg.sequential,
                       mode="thread" if cfg.threads else "process", timeout=cfg.timeout)
    out_path = Path(out) if out else Path(cfg.pool_dir) / "bench.csv"
    write_metrics_csv(out_path, result.rows())
    out_path.with_suffix(".json").write_text(json.dumps(result.summary(), indent=2) + "\n")
    print(result.format())
    print(f"bench rows written to {out_path}")
    return result


@dataclass
class VerifyResult:
    passed: bool
    max_deviation: float
    first_mismatch: Optional[int]
    n_qubits: int
    gates: int


def cmd_verify(cfg: RunConfig, random_gates: Optional[int] = None, basis_index: Optional[int] = None,
               max_oracle_qubits: int = 26, tolerance: float = 1e-12,
               corrupt_byte: Optional[int] = None) -> VerifyResult:
    tmp = None
    if cfg.pool_dir and (Path(cfg.pool_dir) / "pool.json").exists():
        manifest = PoolManifest.load(cfg.pool_dir)
    else:
        if cfg.n_qubits > max_oracle_qubits:
            raise GeometryError(f"{cfg.n_qubits} qubits exceeds the oracle cap of {max_oracle_qubits}")
        tmp = tempfile.TemporaryDirectory(prefix="sharedsim-verify-")
        cfg = RunConfig(**{**asdict(cfg), "pool_dir": tmp.name})
        manifest = cmd_init(cfg, basis_index)
    try:
        n = manifest.n_qubits
        if n > max_oracle_qubits:
            raise GeometryError(f"{n} qubits exceeds the oracle cap of {max_oracle_qubits}")
        if random_gates is not None:
            circuit = random_circuit(n, random_gates, np.random.default_rng(cfg.seed))
        else:
            circuit = _circuit_for(cfg, n)
        with ChunkPool(manifest, manifest.chunk_bytes) as pool:
            oracle = DenseState(n, pool.load_dense().copy())
        for g in circuit.gates:
            apply_gate_dense(oracle, g)
        if circuit.gates:
            run_circuit_local(manifest, circuit, cfg.worker_count, _backend(cfg, manifest))
        if corrupt_byte is not None:
            _flip_byte(manifest, corrupt_byte)
        with ChunkPool(manifest, manifest.chunk_bytes) as pool:
            got = pool.load_dense()
        dev = np.abs(got - oracle.amplitudes)
        bad = np.flatnonzero(~(dev <= tolerance))
        result = VerifyResult(
            passed=bad.size == 0, max_deviation=float(np.nanmax(dev)) if dev.size else 0.0,
            first_mismatch=int(bad[0]) if bad.size else None, n_qubits=n, gates=len(circuit.gates),
        )
    finally:
        if tmp is not None:
            tmp.cleanup()
    status = "PASS" if result.passed else "FAIL"
    msg = f"{status}: {result.gates} gates on {n} qubits, max |deviation| = {result.max_deviation:.3e}"
    if result.first_mismatch is not None:
        msg += f", first mismatching index {result.first_mismatch}"
    print(msg)
    return result


def _flip_byte(manifest: PoolManifest, state_byte: int) -> None:
    """Flip an exponent bit of the float64 holding ``state_byte`` (visible even on a zero amplitude)."""
    if not 0 <= state_byte < manifest.total_bytes:
        raise ValueError(f"--corrupt-byte {state_byte} outside the {manifest.total_bytes}-byte state")
    state_byte = state_byte - state_byte % 8 + 7  # little-endian: sign/exponent byte
    cid, within = divmod(state_byte, manifest.chunk_bytes)
    shard, off = manifest.locate(cid)
    with open(manifest.shard_path(shard), "r+b") as fh:
        fh.seek(off + within)
        b = fh.read(1)
        fh.seek(off + within)
        fh.write(bytes([b[0] ^ 0x40]))


def cmd_analyze(n: int = 40, config: Optional[str] = None, workload: Optional[Sequence[float]] = None,
                prices: Sequence[str] = (), computes: Sequence[str] = (), links: Sequence[str] = (),
                as_json: bool = False) -> dict:
    table = analysis.ProfileTable.load(config) if config else analysis.ProfileTable.default()
    if workload:
        table.workload = analysis.WorkloadParams(*workload)
    for label, value in (_kv(s) for s in prices):
        table.media = [m for m in table.media if m.label != label] + [analysis.MediaPrice(label, value)]
    for label, value in (_kv(s) for s in computes):
        table.compute = [c for c in table.compute if c.label != label] + [analysis.ComputeProfile(label, value)]
    for label, value in (_kv(s) for s in links):
        table.links = [l for l in table.links if l.label != label] + [analysis.LinkProfile(label, value)]
    doc = analysis.analyze(n, table)
    print(json.dumps(doc, indent=2) if as_json else analysis.format_report(doc))
    return doc


def _kv(s: str) -> tuple[str, float]:
    label, sep, value = s.partition("=")
    if not sep:
        raise ValueError(f"expected LABEL=VALUE, got {s!r}")
    return label, float(value)


def format_rows(rows: Sequence[dict]) -> str:
    head = f"{'framework':<9} {'node':>5} {'gate':<12} {'compute':>9} {'read':>9} {'write':>9} {'writeback':>10} {'total':>9} {'MB/s':>8}"
    out = [head]
    for r in rows:
        label = r["gate_label"] if r["node"] != "round" else f"  {r['gate_label']}"
        out.append(
            f"{r['framework']:<9} {str(r['node']):>5} {label:<12} {r['compute_ms']:>9.1f} {r['read_ms']:>9.1f}"
            f" {r['write_ms']:>9.1f} {r['writeback_ms']:>10.1f} {r['total_ms']:>9.1f} {r['speed_mb_s']:>8.1f}"
        )
    return "\n".join(out)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "analyze":
            cmd_analyze(args.qubits, args.config, args.workload, args.price, args.compute, args.link, args.json)
            return 0
        cfg = config_from_args(args)
        if args.command == "init":
            m = cmd_init(cfg, args.basis_index, args.force)
            k = default_basis_index(cfg.n_qubits) if args.basis_index is None else args.basis_index
            print(f"pool {m.path}: {m.n_qubits} qubits, {m.total_bytes:,d} bytes in {len(m.shards)} shards"
                  f" of {m.chunk_bytes}-byte chunks; state e_{k}")
        elif args.command == "run":
            cmd_run(cfg, args.out)
        elif args.command == "bench":
            cmd_bench(cfg, args.cache_sizes, args.out)
        elif args.command == "verify":
            res = cmd_verify(cfg, args.random_gates, args.basis_index, args.max_oracle_qubits,
                             args.tolerance, args.corrupt_byte)
            return 0 if res.passed else EXIT_FAIL
    except FileNotFoundError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GateError, GeometryError, PoolError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RunAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return 0
