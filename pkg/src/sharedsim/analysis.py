"""Throughput/compute bottleneck and storage-cost model for full-amplitude simulation.

Conventions: a one-qubit gate costs 4 flops per amplitude; an amplitude is 16
bytes; GB in prices means 2^30 bytes.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

AMP_BYTES = 16
GIB = 2**30


@dataclass(frozen=True)
class WorkloadParams:
    m_iter: float
    n_gate: float
    t_train: float  # seconds

    def __post_init__(self):
        if min(self.m_iter, self.n_gate, self.t_train) <= 0:
            raise ValueError("workload parameters must be positive")

    @property
    def total_gates(self) -> float:
        return self.m_iter * self.n_gate


@dataclass(frozen=True)
class ComputeProfile:
    label: str
    flops: float

    def __post_init__(self):
        if self.flops <= 0:
            raise ValueError(f"{self.label}: flops must be positive")


@dataclass(frozen=True)
class MediaPrice:
    label: str
    usd_per_gb: float

    def __post_init__(self):
        if self.usd_per_gb <= 0:
            raise ValueError(f"{self.label}: price must be positive")


@dataclass(frozen=True)
class LinkProfile:
    label: str
    bytes_per_second: float

    def __post_init__(self):
        if self.bytes_per_second <= 0:
            raise ValueError(f"{self.label}: bandwidth must be positive")


def _check_n(n: int) -> None:
    if not 1 <= n <= 63:
        raise ValueError(f"qubit count must be in [1, 63], got {n}")


def gate_flops(n: int) -> int:
    _check_n(n)
    return 4 * (1 << n)


def gates_per_second(profile: ComputeProfile, n: int) -> float:
    return profile.flops / gate_flops(n)


def required_gate_rate(w: WorkloadParams) -> float:
    return w.total_gates / w.t_train


def state_bytes(n: int) -> int:
    _check_n(n)
    return (1 << n) * AMP_BYTES


def transfer_seconds(nbytes: float, link: LinkProfile) -> float:
    if nbytes <= 0:
        raise ValueError("byte count must be positive")
    return nbytes / link.bytes_per_second


def storage_cost_usd(n: int, media: MediaPrice) -> float:
    return state_bytes(n) / GIB * media.usd_per_gb


def link_gate_rate(n: int, link: LinkProfile, passes: int = 1) -> float:
    """Gates/s a link sustains if each gate moves the full state ``passes`` times."""
    return link.bytes_per_second / (passes * state_bytes(n))


@dataclass
class BottleneckReport:
    n_qubits: int
    compute_label: str
    link_label: str
    compute_gate_rate: float
    link_gate_rate_read: float  # one state transfer per gate
    link_gate_rate_read_write: float  # read + write back per gate
    convention: str
    ratio: float  # compute rate / link rate under ``convention``
    bottleneck: str  # "link" or "compute"
    required_rate: Optional[float] = None
    compute_meets_requirement: Optional[bool] = None
    link_meets_requirement: Optional[bool] = None
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def bottleneck_report(n: int, compute: ComputeProfile, link: LinkProfile,
                      workload: Optional[WorkloadParams] = None, convention: str = "read") -> BottleneckReport:
    """Compare compute-limited and link-limited gate rates and name the binding one.

    ``convention="read"`` counts one full-state transfer per gate; ``"read_write"``
    counts the read and the write-back, which is what the out-of-core engine does.
    """
    if convention not in ("read", "read_write"):
        raise ValueError(f"unknown convention {convention!r}")
    g_compute = gates_per_second(compute, n)
    g_read = link_gate_rate(n, link, 1)
    g_rw = link_gate_rate(n, link, 2)
    g_link = g_read if convention == "read" else g_rw
    rep = BottleneckReport(
        n_qubits=n, compute_label=compute.label, link_label=link.label,
        compute_gate_rate=g_compute, link_gate_rate_read=g_read, link_gate_rate_read_write=g_rw,
        convention=convention, ratio=g_compute / g_link,
        bottleneck="link" if g_link < g_compute else "compute",
        notes=[
            "link rate = link bytes/s / (passes x 2^n x 16 bytes)",
            f"convention '{convention}': {'1 pass (read only)' if convention == 'read' else '2 passes (read + write back)'}",
        ],
    )
    if workload is not None:
        need = required_gate_rate(workload)
        rep.required_rate = need
        rep.compute_meets_requirement = g_compute >= need
        rep.link_meets_requirement = g_link >= need
    return rep


# ---------------------------------------------------------------------------
# default profile table (overridable from a JSON config document)


@dataclass
class ProfileTable:
    compute: list[ComputeProfile]
    links: list[LinkProfile]
    media: list[MediaPrice]
    workload: WorkloadParams

    @classmethod
    def default(cls) -> "ProfileTable":
        return cls(
            compute=[
                ComputeProfile("GPU", 1e15),
                ComputeProfile("CPU-SP", 4.6e12),
                ComputeProfile("CPU-DP", 2.3e12),
                ComputeProfile("FPGA", 1e12),
            ],
            links=[LinkProfile("10GbE", 1.25e9), LinkProfile("100GbE", 12.5e9)],
            media=[MediaPrice("DRAM", 5.0), MediaPrice("HBM", 20.0), MediaPrice("DDR5-ECC", 6.0)],
            workload=WorkloadParams(10_000, 1_000, 86_400),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ProfileTable":
        """Start from the defaults and replace any section present in the JSON document."""
        doc = json.loads(Path(path).read_text())
        table = cls.default()
        if "compute" in doc:
            table.compute = [ComputeProfile(**d) for d in doc["compute"]]
        if "links" in doc:
            table.links = [LinkProfile(**d) for d in doc["links"]]
        if "media" in doc:
            table.media = [MediaPrice(**d) for d in doc["media"]]
        if "workload" in doc:
            table.workload = WorkloadParams(**doc["workload"])
        return table

    def to_dict(self) -> dict:
        return asdict(self)

    def compute_by_label(self, label: str) -> ComputeProfile:
        return next(p for p in self.compute if p.label == label)

    def link_by_label(self, label: str) -> LinkProfile:
        return next(p for p in self.links if p.label == label)


def analyze(n: int, table: ProfileTable) -> dict:
    """Everything the analytic report prints, as one structured document."""
    need = required_gate_rate(table.workload)
    fastest_link = max(table.links, key=lambda l: l.bytes_per_second)
    fastest_compute = max(table.compute, key=lambda p: p.flops)
    return {
        "n_qubits": n,
        "gate_flops": gate_flops(n),
        "state_bytes": state_bytes(n),
        "workload": {**asdict(table.workload), "total_gates": table.workload.total_gates,
                     "required_gate_rate": need},
        "compute": [
            {"label": p.label, "flops": p.flops, "gates_per_second": gates_per_second(p, n),
             "meets_requirement": gates_per_second(p, n) >= need}
            for p in table.compute
        ],
        "links": [
            {"label": l.label, "bytes_per_second": l.bytes_per_second,
             "transfer_seconds": transfer_seconds(state_bytes(n), l),
             "gates_per_second_read": link_gate_rate(n, l, 1),
             "gates_per_second_read_write": link_gate_rate(n, l, 2)}
            for l in table.links
        ],
        "storage_cost_usd": [
            {"label": m.label, "usd_per_gb": m.usd_per_gb, "cost_usd": storage_cost_usd(n, m)}
            for m in table.media
        ],
        "bottleneck": bottleneck_report(n, fastest_compute, fastest_link, table.workload).to_dict(),
    }


def format_report(doc: dict) -> str:
    """Aligned plain-text rendering of ``analyze`` output."""
    n = doc["n_qubits"]
    out = [
        f"n = {n} qubits",
        f"  state size      {doc['state_bytes']:>24,d} bytes",
        f"  flops per gate  {doc['gate_flops']:>24,d}",
        "",
        "compute-limited gate rate",
    ]
    for c in doc["compute"]:
        ok = "meets" if c["meets_requirement"] else "below"
        out.append(f"  {c['label']:<10} {c['flops']:>10.3g} flop/s  {c['gates_per_second']:>14.2f} gates/s  ({ok} requirement)")
    w = doc["workload"]
    out += [
        "",
        f"workload: {w['m_iter']:g} iterations x {w['n_gate']:g} gates in {w['t_train']:g} s"
        f" -> {w['required_gate_rate']:.2f} gates/s required",
        "",
        "link-limited transfer",
    ]
    for l in doc["links"]:
        out.append(
            f"  {l['label']:<10} {l['bytes_per_second'] / 1e9:>7.2f} GB/s  full state {l['transfer_seconds']:>12.2f} s"
            f"  {l['gates_per_second_read']:>12.5f} gates/s (read)  {l['gates_per_second_read_write']:>12.5f} (read+write)"
        )
    out += ["", "storage cost of the full state (GB = 2^30 bytes)"]
    for m in doc["storage_cost_usd"]:
        out.append(f"  {m['label']:<10} ${m['usd_per_gb']:>6.2f}/GB  ${m['cost_usd']:>16,.0f}")
    b = doc["bottleneck"]
    out += [
        "",
        f"bottleneck: {b['bottleneck']} ({b['compute_label']} {b['compute_gate_rate']:.2f} gates/s vs "
        f"{b['link_label']} {b['link_gate_rate_read']:.5f} gates/s, ratio {b['ratio']:.3g}, {b['convention']} convention)",
    ]
    return "\n".join(out)
