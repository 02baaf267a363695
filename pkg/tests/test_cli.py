import contextlib

import numpy as np
from click.testing import CliRunner

from defer.cli import main
from defer.model import load_tensor, run_model, save_model, save_tensor
from defer.node import ComputeNode
from defer.synth import make_chain, make_resnet, random_input


@contextlib.contextmanager
def cluster(k):
    nodes = [ComputeNode() for _ in range(k)]
    for n in nodes:
        n.start()
    try:
        yield nodes
    finally:
        for n in nodes:
            n.stop()


def nodes_arg(nodes):
    return ",".join(
        f"127.0.0.1:{n.model_port}:{n.weights_port}:{n.data_port}" for n in nodes)


class TestInspectPartitions:
    def test_prints_partition_digest(self, tmp_path):
        save_model(make_resnet(3, seed=41), tmp_path / "m")
        runner = CliRunner()
        res = runner.invoke(main, ["inspect-partitions", "--model",
                                   str(tmp_path / "m"), "-k", "3"])
        assert res.exit_code == 0, res.output
        assert res.output.count("partition ") == 3
        assert "weight bytes" in res.output

    def test_csv_output(self, tmp_path):
        save_model(make_chain(6, seed=42), tmp_path / "m")
        out = tmp_path / "parts.csv"
        res = CliRunner().invoke(main, [
            "inspect-partitions", "--model", str(tmp_path / "m"),
            "-k", "2", "--csv", str(out)])
        assert res.exit_code == 0, res.output
        lines = out.read_text().strip().splitlines()
        assert lines[0].startswith("index,layer_count")
        assert len(lines) == 3

    def test_too_many_partitions_fails_cleanly(self, tmp_path):
        save_model(make_chain(2, seed=43), tmp_path / "m")
        res = CliRunner().invoke(main, [
            "inspect-partitions", "--model", str(tmp_path / "m"), "-k", "9"])
        assert res.exit_code != 0
        assert "bridges" in res.output


class TestDispatch:
    def test_end_to_end_with_files(self, tmp_path):
        g = make_chain(6, width=5, seed=44)
        save_model(g, tmp_path / "model")
        rng = np.random.default_rng(44)
        inputs = [random_input(g, rng) for _ in range(3)]
        in_dir = tmp_path / "inputs"
        in_dir.mkdir()
        for i, t in enumerate(inputs):
            save_tensor(t, in_dir / f"{i:03d}.tensor")
        out_dir = tmp_path / "outputs"
        csv_path = tmp_path / "metrics.csv"

        with cluster(2) as nodes:
            res = CliRunner().invoke(main, [
                "dispatch",
                "--model", str(tmp_path / "model"),
                "--nodes", nodes_arg(nodes),
                "--inputs", str(in_dir),
                "--out", str(out_dir),
                "--metrics-csv", str(csv_path),
            ])
        assert res.exit_code == 0, res.output
        for i, x in enumerate(inputs):
            got = load_tensor(out_dir / f"{i:03d}.tensor")
            assert got.tobytes() == run_model(g, x).tobytes()
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0].startswith("model,nodes,serialization")
        assert len(lines) == 4  # header + three message classes

    def test_bad_nodes_string(self, tmp_path):
        save_model(make_chain(2, seed=45), tmp_path / "model")
        save_tensor(np.zeros((1, 16), dtype=np.float32), tmp_path / "x.tensor")
        res = CliRunner().invoke(main, [
            "dispatch", "--model", str(tmp_path / "model"),
            "--nodes", "localhost:1:2", "--inputs", str(tmp_path / "x.tensor")])
        assert res.exit_code != 0
        assert "host:mp:wp:dp" in res.output


class TestBenchCli:
    def test_yaml_plan_to_csv(self, tmp_path):
        plan = tmp_path / "plan.yaml"
        plan.write_text(
            "model: {kind: chain, layers: 4, width: 4}\n"
            "run: {node_counts: [1, 2], mode: cycles, cycles: 4,\n"
            "      in_process: true, seed: 3}\n"
            "codecs:\n"
            "  - {name: bin32, weights: bin32, data: bin32}\n"
        )
        out = tmp_path / "results.csv"
        res = CliRunner().invoke(main, [
            "bench", "--plan", str(plan), "--out", str(out), "-v"])
        assert res.exit_code == 0, res.output
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 1 + 2 * 3
