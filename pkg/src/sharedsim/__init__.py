"""Out-of-core, multi-worker state-vector simulation over a shared chunk pool."""

from .statecore import Circuit, DenseState, Gate, apply_gate_chunkpair, apply_gate_dense, init_basis_state, norm_sq
from .storage import ChunkPool, NetworkProfile, PoolManifest, create_pool, open_pool, wrap_emulated_remote
from .cluster import WorkRange, partition_pairs
from .engine import BackendConfig, GateMetrics, RoundMetrics, aggregate_round, execute_range, run_circuit_local

__version__ = "0.1.0"
