import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sharedsim.storage import create_pool, write_basis_state  # noqa: E402


@pytest.fixture
def make_pool(tmp_path):
    """Factory: make_pool(n, chunk_bytes, shards=2, k=None) -> manifest in a fresh directory."""
    counter = iter(range(1000))

    def make(n, chunk_bytes, shards=2, k=None):
        manifest = create_pool(n, chunk_bytes, shards, tmp_path / f"pool{next(counter)}")
        if k is not None:
            write_basis_state(manifest, k)
        return manifest

    return make


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1].rstrip("."))):
        terminalreporter.write_line(line)
