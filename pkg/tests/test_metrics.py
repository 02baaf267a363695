import pytest
from hypothesis import given
from hypothesis import strategies as st

from defer.metrics import (
    CSV_HEADER,
    EnergyParams,
    MetricsReport,
    NodeMetrics,
    csv_rows,
    energy_estimate,
    measure_throughput,
    per_node_energy,
)


class TestEnergyEstimate:
    def test_zero_in_zero_out(self):
        assert energy_estimate(0.0, 0) == 0.0

    def test_network_only(self):
        # 8e6 bits at 10 pJ/bit
        assert energy_estimate(0.0, 8_000_000) == pytest.approx(8.0e-5)

    def test_compute_plus_network_exact(self):
        p = EnergyParams(tdp_watts=15.0, joules_per_bit=1.0e-11)
        assert energy_estimate(1.0, 10 ** 9, p) == 15.01

    @given(
        a=st.floats(0, 1e3), b=st.floats(0, 1e3),
        bits=st.integers(0, 10 ** 12), more=st.integers(0, 10 ** 12),
    )
    def test_linear_in_both_arguments(self, a, b, bits, more):
        p = EnergyParams()
        lhs = energy_estimate(a + b, bits + more, p)
        rhs = (energy_estimate(a, bits, p) + energy_estimate(b, more, p))
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-15)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            energy_estimate(-1.0, 0)

    def test_param_validation(self):
        with pytest.raises(ValueError):
            EnergyParams(tdp_watts=0.0)
        with pytest.raises(ValueError):
            EnergyParams(joules_per_bit=float("nan"))


class TestThroughput:
    def test_definition(self):
        assert measure_throughput(10, 20.0) == 0.5

    def test_zero_cycles(self):
        assert measure_throughput(0, 5.0) == 0.0

    def test_window_must_be_positive(self):
        with pytest.raises(ValueError):
            measure_throughput(1, 0.0)


def sample_report():
    nodes = [
        NodeMetrics(index=0, cycles=4, compute_seconds=0.2,
                    overhead_seconds=0.01, payload_bytes={"data": 1000}),
        NodeMetrics(index=1, cycles=4, compute_seconds=0.1,
                    overhead_seconds=0.02, payload_bytes={"data": 500}),
    ]
    return MetricsReport(
        cycles_completed=4,
        window_seconds=8.0,
        overhead_by_class={"architecture": 0.001, "weights": 0.1, "data": 0.05},
        payload_bytes={"architecture": 2048, "weights": 10_000, "data": 3000},
        nodes=nodes,
    )


class TestReport:
    def test_throughput_is_cycles_over_window(self):
        r = sample_report()
        assert r.throughput == 0.5
        assert r.overhead_seconds == pytest.approx(0.151)

    def test_per_node_energy(self):
        r = sample_report()
        p = EnergyParams(tdp_watts=10.0, joules_per_bit=1e-11)
        e = per_node_energy(r, p)
        assert e[0] == pytest.approx(0.2 * 10 + 8000 * 1e-11)
        assert e[1] == pytest.approx(0.1 * 10 + 4000 * 1e-11)

    def test_node_metrics_json_round_trip(self):
        n = NodeMetrics(index=3, cycles=7, compute_seconds=1.5,
                        overhead_seconds=0.25, payload_bytes={"data": 42})
        back = NodeMetrics.from_json(n.to_json(), index=3)
        assert back == n

    def test_csv_rows_schema(self):
        rows = csv_rows("chain12", 2, "BinaryFloat", "LZ", sample_report())
        assert len(rows) == 3
        assert CSV_HEADER.count(",") == rows[0].count(",")
        head = rows[0].split(",")
        assert head[0] == "chain12" and head[1] == "2"
        assert head[4] == "architecture"
