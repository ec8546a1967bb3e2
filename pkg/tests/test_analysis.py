import json

import pytest
from hypothesis import given, strategies as st

from sharedsim.analysis import (
    ComputeProfile, LinkProfile, MediaPrice, ProfileTable, WorkloadParams, analyze, bottleneck_report,
    format_report, gate_flops, gates_per_second, link_gate_rate, required_gate_rate, state_bytes,
    storage_cost_usd, transfer_seconds,
)

GPU = ComputeProfile("GPU", 1e15)
LINK_100G = LinkProfile("100GbE", 12.5e9)


@pytest.mark.parametrize("n,flops", [(40, 4_398_046_511_104), (1, 8), (27, 536_870_912)])
def test_gate_flops(n, flops):
    assert gate_flops(n) == flops


def test_gates_per_second():
    assert gates_per_second(GPU, 40) == pytest.approx(227.37, abs=0.01)
    assert gates_per_second(ComputeProfile("unit", 8), 1) == 1.0


def test_cpu_rate_follows_formula():
    # flops / gate_flops: the decimal 4.6e12 rating gives ~1.046 gates/s
    assert gates_per_second(ComputeProfile("CPU-SP", 4.6e12), 40) == pytest.approx(1.0459, abs=1e-4)
    # the published 1.15 comes out when the rating is read as 4.6 x 2^40
    assert gates_per_second(ComputeProfile("CPU-SP", 4.6 * 2**40), 40) == pytest.approx(1.15, abs=1e-12)


@pytest.mark.parametrize("w,rate", [((10000, 1000, 86400), 115.74), ((1, 1, 1), 1.0), ((2, 3, 6), 1.0)])
def test_required_gate_rate(w, rate):
    assert required_gate_rate(WorkloadParams(*w)) == pytest.approx(rate, abs=0.01)


def test_state_bytes():
    assert state_bytes(40) == 17_592_186_044_416
    assert state_bytes(27) == 2_147_483_648
    assert state_bytes(1) == 32
    with pytest.raises(ValueError):
        state_bytes(0)


def test_transfer_seconds():
    assert transfer_seconds(state_bytes(40), LINK_100G) == pytest.approx(1407.37, abs=0.1)
    assert transfer_seconds(1.25e9, LinkProfile("10GbE", 1.25e9)) == 1.0
    with pytest.raises(ValueError):
        transfer_seconds(0, LINK_100G)
    assert link_gate_rate(40, LINK_100G) == pytest.approx(0.00071, abs=1e-5)


@pytest.mark.parametrize("price,cost", [(5, 81_920), (20, 327_680), (6, 98_304)])
def test_storage_cost(price, cost):
    assert storage_cost_usd(40, MediaPrice("m", price)) == cost


@given(st.integers(1, 50), st.floats(0.01, 1000))
def test_storage_cost_scaling(n, price):
    m = MediaPrice("m", price)
    assert storage_cost_usd(n + 1, m) == pytest.approx(2 * storage_cost_usd(n, m), rel=1e-12)
    assert storage_cost_usd(n, MediaPrice("m2", 2 * price)) == pytest.approx(2 * storage_cost_usd(n, m))


@given(st.floats(1.0, 1e18), st.integers(1, 63))
def test_rate_times_flops_is_flops(flops, n):
    p = ComputeProfile("p", flops)
    assert gates_per_second(p, n) * gate_flops(n) == pytest.approx(flops, rel=4e-16)


def test_bottleneck_link():
    rep = bottleneck_report(40, GPU, LINK_100G, WorkloadParams(10000, 1000, 86400))
    assert rep.bottleneck == "link"
    assert rep.ratio == pytest.approx(3.2e5, rel=0.01)
    assert rep.compute_meets_requirement and not rep.link_meets_requirement
    rw = bottleneck_report(40, GPU, LINK_100G, convention="read_write")
    assert rw.ratio == pytest.approx(2 * rep.ratio)


def test_bottleneck_compute():
    rep = bottleneck_report(4, ComputeProfile("slow", 10.0), LINK_100G)
    assert rep.bottleneck == "compute"
    with pytest.raises(ValueError):
        bottleneck_report(4, GPU, LINK_100G, convention="both")


def test_invalid_profiles():
    for bad in (lambda: ComputeProfile("x", 0), lambda: MediaPrice("x", -1), lambda: LinkProfile("x", 0),
                lambda: WorkloadParams(1, 0, 1)):
        with pytest.raises(ValueError):
            bad()


def test_profile_table_override(tmp_path):
    path = tmp_path / "profiles.json"
    path.write_text(json.dumps({"media": [{"label": "NVMe", "usd_per_gb": 0.1}]}))
    table = ProfileTable.load(path)
    assert [m.label for m in table.media] == ["NVMe"]
    assert table.compute == ProfileTable.default().compute


def test_analyze_document_and_text():
    doc = analyze(40, ProfileTable.default())
    assert doc["state_bytes"] == 17_592_186_044_416
    assert [c["cost_usd"] for c in doc["storage_cost_usd"]] == [81_920, 327_680, 98_304]
    assert doc["workload"]["required_gate_rate"] == pytest.approx(115.74, abs=0.01)
    text = format_report(doc)
    for needle in ("227.37", "1407.37", "81,920", "327,680", "98,304", "115.74"):
        assert needle in text
    assert "2,147,483,648" in format_report(analyze(27, ProfileTable.default()))
