import socket
import subprocess
import sys

import pytest

from defer.bench import BenchPlan, CodecConfig, DEFAULT_CODEC_MATRIX, run_bench, shape_link
from defer.metrics import CSV_HEADER


def tiny_plan(**overrides):
    base = dict(
        model_kind="chain", layers=6, width=4, node_counts=(1, 2),
        codec_configs=(CodecConfig.from_dict({"name": "bin32+lz"}),),
        mode="cycles", cycles=6, in_process=True, seed=11,
    )
    base.update(overrides)
    return BenchPlan(**base)


class TestPlan:
    def test_default_matrix_mirrors_the_four_configs(self):
        names = [d["name"] for d in DEFAULT_CODEC_MATRIX]
        assert names == ["text", "text+lz", "bin32", "bin32+lz"]

    def test_from_dict_round_trip(self):
        doc = {
            "model": {"kind": "resnet", "blocks": 2},
            "run": {"node_counts": [1, 3], "mode": "cycles", "cycles": 9,
                    "seed": 5, "in_process": True},
            "link": {"latency_ms": 2.0, "bandwidth_mbps": 100.0},
            "codecs": [{"name": "x", "weights": "text", "data": "bin16+lz"}],
        }
        plan = BenchPlan.from_dict(doc)
        assert plan.model_kind == "resnet"
        assert plan.node_counts == (1, 3)
        assert plan.link_latency_ms == 2.0
        assert plan.codec_configs[0].data.rate_bits == 16

    def test_yaml_load(self, tmp_path):
        plan_file = tmp_path / "plan.yaml"
        plan_file.write_text(
            "model: {kind: chain, layers: 4, width: 4}\n"
            "run: {node_counts: [1], mode: cycles, cycles: 3, in_process: true}\n"
        )
        plan = BenchPlan.load(plan_file)
        assert plan.layers == 4
        assert plan.node_counts == (1,)

    def test_model_is_seed_deterministic(self):
        a, b = tiny_plan().model(), tiny_plan().model()
        for name in a.weights:
            assert a.weights[name].tobytes() == b.weights[name].tobytes()

    def test_bad_mode_rejected(self):
        with pytest.raises(ValueError):
            tiny_plan(mode="forever")


class TestShapeLink:
    def test_pass_through(self):
        assert shape_link(0, 0) == {"link_latency_s": 0.0, "link_bandwidth_bps": 0.0}

    def test_units(self):
        knobs = shape_link(50, 8)
        assert knobs["link_latency_s"] == 0.05
        assert knobs["link_bandwidth_bps"] == 8e6

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            shape_link(-1, 0)


class TestRunBench:
    def test_rows_per_cell(self, tmp_path):
        out = tmp_path / "results.csv"
        rows, summary = run_bench(tiny_plan(), out_csv=out)
        # header + 2 node counts x 1 codec x 3 message classes
        assert rows[0] == CSV_HEADER
        assert len(rows) == 1 + 2 * 1 * 3
        assert out.read_text().count("\n") == len(rows)
        assert set(summary) == {(1, "bin32+lz"), (2, "bin32+lz")}

    def test_payload_columns_reproducible_across_runs(self):
        rows1, _ = run_bench(tiny_plan())
        rows2, _ = run_bench(tiny_plan())

        def payloads(rows):
            return [r.split(",")[7] for r in rows[1:]]

        assert payloads(rows1) == payloads(rows2)

    def test_compute_bound_pipeline_gains(self):
        # each node's share of injected compute halves at k=2
        plan = tiny_plan(layers=8, compute_ms_per_layer=5.0, cycles=24,
                         node_counts=(1, 2), seed=21)
        _, summary = run_bench(plan)
        assert summary[(2, "bin32+lz")] > 1.4 * summary[(1, "bin32+lz")]


class TestChildProcesses:
    def test_bind_failure_is_reported(self):
        taken = socket.socket()
        taken.bind(("127.0.0.1", 0))
        port = taken.getsockname()[1]
        try:
            proc = subprocess.run(
                [sys.executable, "-m", "defer.cli", "compute",
                 "--model-port", str(port), "--weights-port", str(port + 1),
                 "--data-port", str(port + 2)],
                capture_output=True, text=True, timeout=30)
        finally:
            taken.close()
        assert proc.returncode == 2
        assert "bind failed" in proc.stderr
