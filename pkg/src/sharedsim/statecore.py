"""Amplitude layout, gates, chunk kernels and the dense in-memory oracle.

Amplitudes are complex128, little-endian, interleaved (re, im): 16 bytes each,
stored in basis-index order. Qubit ``t`` corresponds to bit ``t`` of the index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

AMP_DTYPE = np.dtype("<c16")
AMP_BYTES = AMP_DTYPE.itemsize  # 16

GATE_KINDS = ("H", "X", "U1Q", "CX")

_SQRT_HALF = 1.0 / math.sqrt(2.0)
H_MATRIX = np.array([[_SQRT_HALF, _SQRT_HALF], [_SQRT_HALF, -_SQRT_HALF]], dtype=complex)
X_MATRIX = np.array([[0, 1], [1, 0]], dtype=complex)


class GateError(ValueError):
    pass


class GeometryError(ValueError):
    """Chunk layout that a kernel or partition cannot honour."""


@dataclass(frozen=True)
class Gate:
    kind: str
    target: int
    control: Optional[int] = None
    matrix: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in GATE_KINDS:
            raise GateError(f"unknown gate kind {self.kind!r}")
        if self.target < 0:
            raise GateError(f"negative target {self.target}")
        if self.kind == "CX":
            if self.control is None or self.control < 0:
                raise GateError("CX needs a non-negative control qubit")
            if self.control == self.target:
                raise GateError("CX control must differ from target")
        elif self.control is not None:
            raise GateError(f"{self.kind} takes no control qubit")
        if self.kind == "U1Q":
            if self.matrix is None:
                raise GateError("U1Q needs a 2x2 matrix")
            m = np.asarray(self.matrix, dtype=complex)
            if m.shape != (2, 2):
                raise GateError(f"U1Q matrix must be 2x2, got {m.shape}")
            if not np.allclose(m.conj().T @ m, np.eye(2), rtol=0, atol=1e-12):
                raise GateError("U1Q matrix is not unitary")
            object.__setattr__(self, "matrix", m)
        elif self.matrix is not None:
            raise GateError(f"{self.kind} has a fixed matrix")

    @classmethod
    def h(cls, target: int) -> "Gate":
        return cls("H", target)

    @classmethod
    def x(cls, target: int) -> "Gate":
        return cls("X", target)

    @classmethod
    def u(cls, target: int, matrix) -> "Gate":
        return cls("U1Q", target, matrix=np.asarray(matrix, dtype=complex))

    @classmethod
    def cx(cls, control: int, target: int) -> "Gate":
        return cls("CX", target, control=control)

    @property
    def unitary(self) -> np.ndarray:
        """The 2x2 matrix acting on the target pair (X for CX)."""
        if self.kind == "H":
            return H_MATRIX
        if self.kind in ("X", "CX"):
            return X_MATRIX
        return self.matrix

    @property
    def label(self) -> str:
        if self.kind == "CX":
            return f"CX q{self.control}->q{self.target}"
        return f"{self.kind} q{self.target}"

    def qubits(self) -> tuple[int, ...]:
        return (self.target,) if self.control is None else (self.control, self.target)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "target": self.target}
        if self.control is not None:
            d["control"] = self.control
        if self.matrix is not None:
            d["matrix"] = [[z.real, z.imag] for z in self.matrix.ravel()]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Gate":
        matrix = None
        if "matrix" in d:
            matrix = np.array([complex(re, im) for re, im in d["matrix"]]).reshape(2, 2)
        return cls(d["kind"], int(d["target"]), d.get("control"), matrix)


@dataclass
class Circuit:
    n_qubits: int
    gates: list[Gate] = field(default_factory=list)

    def __post_init__(self):
        if self.n_qubits < 1:
            raise GateError(f"n_qubits must be positive, got {self.n_qubits}")
        for g in self.gates:
            check_gate(g, self.n_qubits)

    def __len__(self):
        return len(self.gates)

    def __iter__(self) -> Iterator[Gate]:
        return iter(self.gates)


def check_gate(gate: Gate, n_qubits: int) -> None:
    for q in gate.qubits():
        if q >= n_qubits:
            raise GateError(f"{gate.label}: qubit {q} out of range for {n_qubits} qubits")


def is_power_of_two(x: int) -> bool:
    return x > 0 and (x & (x - 1)) == 0


def pair_index(i: int, t: int) -> tuple[int, int]:
    """Return the (lo, hi) amplitude pair a target-``t`` gate mixes, starting from ``i``."""
    if (i >> t) & 1:
        raise ValueError(f"index {i} has bit {t} set; pass the low member of the pair")
    return i, i | (1 << t)


# ---------------------------------------------------------------------------
# dense oracle


@dataclass
class DenseState:
    n_qubits: int
    amplitudes: np.ndarray

    def __post_init__(self):
        if self.amplitudes.shape != (1 << self.n_qubits,):
            raise GeometryError(
                f"expected {1 << self.n_qubits} amplitudes, got {self.amplitudes.shape}"
            )


def init_basis_state(n: int, k: int) -> DenseState:
    if n < 1:
        raise ValueError(f"qubit count must be positive, got {n}")
    if not 0 <= k < (1 << n):
        raise ValueError(f"basis index {k} out of range for {n} qubits")
    amps = np.zeros(1 << n, dtype=AMP_DTYPE)
    amps[k] = 1.0
    return DenseState(n, amps)


def norm_sq(source) -> float:
    """Sum of |amp|^2 over a DenseState, an array, or an iterable of chunks."""
    if isinstance(source, DenseState):
        source = source.amplitudes
    if isinstance(source, np.ndarray):
        source = (source,)
    total = 0.0
    for chunk in source:
        f = np.asarray(chunk).view(np.float64)
        total += float(np.dot(f, f))
    return total


def apply_gate_dense(state: DenseState, gate: Gate) -> DenseState:
    """Reference application over the whole vector (in place).

    Deliberately written differently from the chunk kernel: tensor reshape +
    einsum for one-qubit gates, explicit index enumeration for CX.
    """
    check_gate(gate, state.n_qubits)
    n, t = state.n_qubits, gate.target
    psi = state.amplitudes
    if gate.kind == "CX":
        idx = np.arange(1 << n)
        lo = idx[(((idx >> t) & 1) == 0) & (((idx >> gate.control) & 1) == 1)]
        hi = lo + (1 << t)
        psi[lo], psi[hi] = psi[hi].copy(), psi[lo].copy()
        return state
    view = psi.reshape(1 << (n - t - 1), 2, 1 << t)
    view[...] = np.einsum("ij,ajb->aib", gate.unitary, view)
    return state


def run_dense(state: DenseState, gates: Iterable[Gate]) -> DenseState:
    for g in gates:
        apply_gate_dense(state, g)
    return state


# ---------------------------------------------------------------------------
# chunk kernels


def _mix(a: np.ndarray, b: np.ndarray, m: np.ndarray) -> None:
    """(a, b) <- m @ (a, b), elementwise over equally shaped views."""
    if m[0, 0] == 0 and m[1, 1] == 0 and m[0, 1] == 1 and m[1, 0] == 1:
        tmp = a.copy()
        a[...] = b
        b[...] = tmp
        return
    if not np.iscomplexobj(m) or not m.imag.any():
        # real matrix: work on float views, half the flops of complex arithmetic
        m = m.real
        a, b = a.view(np.float64), b.view(np.float64)
    tmp = a.copy()
    a *= m[0, 0]
    a += m[0, 1] * b
    b *= m[1, 1]
    b += m[1, 0] * tmp


def _mix_masked(a, b, m, mask) -> None:
    if mask is None:
        _mix(a, b, m)
        return
    if not mask.any():
        return
    sa, sb = a[mask], b[mask]
    _mix(sa, sb, m)
    a[mask] = sa
    b[mask] = sb


def _control_mask(gate: Gate, global_index: np.ndarray | int):
    """None means "apply everywhere", otherwise a boolean mask (or scalar bool)."""
    if gate.kind != "CX":
        return None
    return ((global_index >> gate.control) & 1) == 1


def apply_gate_chunkpair(
    lo_chunk: np.ndarray,
    hi_chunk: Optional[np.ndarray],
    gate: Gate,
    global_offset: int,
    chunk_len: int,
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Apply ``gate`` to one chunk (intra mode) or one chunk pair (cross mode), in place.

    Intra mode: ``2**target < chunk_len``; ``hi_chunk`` must be None.
    Cross mode: ``hi_chunk`` starts at ``global_offset + 2**target``.
    """
    if not is_power_of_two(chunk_len) or chunk_len < 2:
        raise GeometryError(f"chunk_len must be a power of two >= 2, got {chunk_len}")
    if global_offset % chunk_len:
        raise GeometryError(f"offset {global_offset} not aligned to chunk_len {chunk_len}")
    if lo_chunk.shape != (chunk_len,):
        raise GeometryError(f"lo chunk has shape {lo_chunk.shape}, expected ({chunk_len},)")
    t = gate.target
    stride = 1 << t
    m = gate.unitary
    cbits = chunk_len.bit_length() - 1

    if stride < chunk_len:
        if hi_chunk is not None:
            raise GeometryError(f"stride {stride} < chunk_len {chunk_len}: intra-chunk gate takes one chunk")
        view = lo_chunk.reshape(-1, 2, stride)
        a, b = view[:, 0, :], view[:, 1, :]
        mask = None
        if gate.kind == "CX":
            if gate.control >= cbits:
                if not (global_offset >> gate.control) & 1:
                    return lo_chunk, None
            else:
                local = np.arange(chunk_len).reshape(-1, 2, stride)[:, 0, :]
                mask = _control_mask(gate, local)
        _mix_masked(a, b, m, mask)
        return lo_chunk, None

    if hi_chunk is None or hi_chunk.shape != (chunk_len,):
        raise GeometryError(f"stride {stride} >= chunk_len {chunk_len}: cross-chunk gate needs a hi chunk")
    if (global_offset >> t) & 1:
        raise GeometryError(f"lo chunk offset {global_offset} has target bit {t} set")
    mask = None
    if gate.kind == "CX":
        if gate.control >= cbits:
            if not (global_offset >> gate.control) & 1:
                return lo_chunk, hi_chunk
        else:
            mask = _control_mask(gate, np.arange(chunk_len))
    _mix_masked(lo_chunk, hi_chunk, m, mask)
    return lo_chunk, hi_chunk


def apply_gate_streaming(amps: np.ndarray, gate: Gate, chunk_len: int) -> np.ndarray:
    """Apply ``gate`` to a full vector chunk by chunk via ``apply_gate_chunkpair``."""
    size = amps.shape[0]
    if chunk_len > size:
        raise GeometryError(f"chunk_len {chunk_len} exceeds state length {size}")
    stride = 1 << gate.target
    if stride < chunk_len:
        for off in range(0, size, chunk_len):
            apply_gate_chunkpair(amps[off:off + chunk_len], None, gate, off, chunk_len)
    else:
        for off in range(0, size, chunk_len):
            if (off >> gate.target) & 1:
                continue
            apply_gate_chunkpair(
                amps[off:off + chunk_len], amps[off + stride:off + stride + chunk_len],
                gate, off, chunk_len,
            )
    return amps


# ---------------------------------------------------------------------------
# circuits: random generation and the text format


def random_unitary(rng: np.random.Generator) -> np.ndarray:
    z = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))


def random_circuit(n: int, length: int, rng: np.random.Generator, kinds: Sequence[str] = GATE_KINDS) -> Circuit:
    kinds = [k for k in kinds if k != "CX" or n >= 2]
    gates = []
    for _ in range(length):
        kind = kinds[rng.integers(len(kinds))]
        t = int(rng.integers(n))
        if kind == "CX":
            c = int(rng.integers(n - 1))
            c = c + 1 if c >= t else c
            gates.append(Gate.cx(c, t))
        elif kind == "U1Q":
            gates.append(Gate.u(t, random_unitary(rng)))
        else:
            gates.append(Gate(kind, t))
    return Circuit(n, gates)


def parse_circuit(text: str) -> list[Gate]:
    """Parse ``h q`` / ``x q`` / ``u q <8 reals>`` / ``cx c t`` lines; ``#`` starts a comment."""
    gates = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        op, *args = line.split()
        op = op.lower()
        try:
            if op in ("h", "x") and len(args) == 1:
                gates.append(Gate(op.upper(), int(args[0])))
            elif op == "cx" and len(args) == 2:
                gates.append(Gate.cx(int(args[0]), int(args[1])))
            elif op == "u" and len(args) == 9:
                v = [float(s) for s in args[1:]]
                m = np.array([complex(v[k], v[k + 1]) for k in range(0, 8, 2)]).reshape(2, 2)
                gates.append(Gate.u(int(args[0]), m))
            else:
                raise GateError(f"cannot parse {raw.strip()!r}")
        except (ValueError, GateError) as exc:
            raise GateError(f"line {lineno}: {exc}") from None
    return gates


def format_circuit(gates: Iterable[Gate]) -> str:
    lines = []
    for g in gates:
        if g.kind == "CX":
            lines.append(f"cx {g.control} {g.target}")
        elif g.kind == "U1Q":
            vals = " ".join(repr(float(x)) for z in g.matrix.ravel() for x in (z.real, z.imag))
            lines.append(f"u {g.target} {vals}")
        else:
            lines.append(f"{g.kind.lower()} {g.target}")
    return "\n".join(lines) + "\n"


def load_circuit(path: str | Path, n_qubits: int) -> Circuit:
    return Circuit(n_qubits, parse_circuit(Path(path).read_text()))
