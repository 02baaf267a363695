"""Local benchmark harness: spawns a dispatcher plus k compute nodes,
sweeps node counts against a codec matrix, and emits the metrics CSV.

Node processes are real OS processes talking over loopback so the wire
protocol is exercised honestly; an in-process mode (threads) exists for
fast tests.  All models, weights and inputs derive from the plan seed.
"""

from __future__ import annotations

import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import CodecSpec, DEFAULT_ARCH
from .dispatcher import ChainConfig, NodeAddress, configure, run_timed_window
from .errors import ChildCrashed, DeferError, PortBindFailure
from .metrics import CSV_HEADER, MetricsReport, csv_rows
from .model import ModelGraph
from .node import ComputeNode
from .synth import make_chain, make_resnet, random_input
from .wire import ChunkConfig

DEFAULT_CODEC_MATRIX = (
    {"name": "text", "weights": "text", "data": "text", "architecture": "text"},
    {"name": "text+lz", "weights": "text+lz", "data": "text+lz", "architecture": "text"},
    {"name": "bin32", "weights": "bin32", "data": "bin32", "architecture": "text"},
    {"name": "bin32+lz", "weights": "bin32+lz", "data": "bin32+lz", "architecture": "text"},
)


@dataclass(frozen=True)
class CodecConfig:
    name: str
    architecture: CodecSpec
    weights: CodecSpec
    data: CodecSpec

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        return cls(
            name=str(d.get("name") or d.get("data", "custom")),
            architecture=CodecSpec.parse(d.get("architecture", "text")),
            weights=CodecSpec.parse(d.get("weights", "bin32+lz")),
            data=CodecSpec.parse(d.get("data", "bin32+lz")),
        )

    @property
    def serialization_label(self) -> str:
        return self.data.serialization

    @property
    def compression_label(self) -> str:
        return "LZ" if self.data.compression == "LZ" else "Uncompressed"


@dataclass
class BenchPlan:
    """Everything one sweep needs; the seed pins models, weights, inputs."""

    model_kind: str = "chain"
    layers: int = 12
    width: int = 16
    blocks: int = 4
    side: int = 8
    channels: int = 4
    node_counts: tuple[int, ...] = (1, 4, 6, 8)
    codec_configs: tuple[CodecConfig, ...] = tuple(
        CodecConfig.from_dict(d) for d in DEFAULT_CODEC_MATRIX)
    mode: str = "cycles"          # "cycles": fixed count; "window": fixed time
    cycles: int = 50
    window_seconds: float = 10.0
    seed: int = 0
    in_process: bool = False
    compute_ms_per_layer: float = 0.0
    link_latency_ms: float = 0.0
    link_bandwidth_mbps: float = 0.0
    chunk_bytes: int = 512 * 1024
    window: int = 16              # in-flight cap
    host: str = "127.0.0.1"

    def __post_init__(self):
        if any(k < 1 for k in self.node_counts):
            raise ValueError("node counts must be >= 1")
        if self.mode not in ("cycles", "window"):
            raise ValueError("mode must be 'cycles' or 'window'")

    def model(self) -> ModelGraph:
        if self.model_kind == "chain":
            return make_chain(self.layers, width=self.width, seed=self.seed)
        if self.model_kind == "resnet":
            return make_resnet(self.blocks, side=self.side,
                               channels=self.channels, seed=self.seed)
        raise ValueError(f"unknown model kind {self.model_kind!r}")

    def model_label(self) -> str:
        if self.model_kind == "chain":
            return f"chain{self.layers}x{self.width}"
        return f"resnet{self.blocks}b"

    @classmethod
    def from_dict(cls, doc: dict) -> "BenchPlan":
        model = doc.get("model", {})
        run = doc.get("run", {})
        link = doc.get("link", {})
        codecs = doc.get("codecs")
        kwargs = dict(
            model_kind=model.get("kind", "chain"),
            layers=int(model.get("layers", 12)),
            width=int(model.get("width", 16)),
            blocks=int(model.get("blocks", 4)),
            side=int(model.get("side", 8)),
            channels=int(model.get("channels", 4)),
            node_counts=tuple(int(k) for k in run.get("node_counts", (1, 4, 6, 8))),
            mode=run.get("mode", "cycles"),
            cycles=int(run.get("cycles", 50)),
            window_seconds=float(run.get("window_seconds", 10.0)),
            seed=int(run.get("seed", 0)),
            in_process=bool(run.get("in_process", False)),
            compute_ms_per_layer=float(run.get("compute_ms_per_layer", 0.0)),
            window=int(run.get("window", 16)),
            chunk_bytes=int(run.get("chunk_bytes", 512 * 1024)),
            link_latency_ms=float(link.get("latency_ms", 0.0)),
            link_bandwidth_mbps=float(link.get("bandwidth_mbps", 0.0)),
        )
        if codecs:
            kwargs["codec_configs"] = tuple(CodecConfig.from_dict(d) for d in codecs)
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "BenchPlan":
        """YAML everywhere; TOML where the interpreter ships tomllib."""
        path = Path(path)
        if path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError as e:
                raise DeferError(
                    "TOML plans need Python >= 3.11; use a YAML plan here") from e
            doc = tomllib.loads(path.read_text())
        else:
            import yaml

            doc = yaml.safe_load(path.read_text())
        return cls.from_dict(doc or {})


def shape_link(latency_ms: float, bandwidth_mbps: float) -> dict:
    """Per-hop shaping knobs in the units the runtimes take."""
    if latency_ms < 0 or bandwidth_mbps < 0:
        raise ValueError("shaping parameters must be >= 0")
    return {
        "link_latency_s": latency_ms / 1e3,
        "link_bandwidth_bps": bandwidth_mbps * 1e6,
    }


class _ChildNode:
    """A ``defer compute`` child process plus its supervisor thread."""

    def __init__(self, index: int, plan: BenchPlan):
        self.index = index
        argv = [
            sys.executable, "-m", "defer.cli", "compute",
            "--host", plan.host,
            "--model-port", "0", "--weights-port", "0", "--data-port", "0",
            "--chunk-bytes", str(plan.chunk_bytes),
            "--compute-delay-per-layer-ms", str(plan.compute_ms_per_layer),
            "--link-latency-ms", str(plan.link_latency_ms),
            "--link-bandwidth-mbps", str(plan.link_bandwidth_mbps),
        ]
        self.proc = subprocess.Popen(
            argv, stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True)
        self.lines: list[str] = []
        self.address: NodeAddress | None = None
        self._got_ports = threading.Event()
        self.supervisor = threading.Thread(target=self._watch, daemon=True)
        self.supervisor.start()

    def _watch(self) -> None:
        for line in self.proc.stdout:
            line = line.strip()
            self.lines.append(line)
            if line.startswith("ports "):
                fields = dict(kv.split("=") for kv in line.split()[1:])
                self.address = NodeAddress(
                    "127.0.0.1", int(fields["model"]),
                    int(fields["weights"]), int(fields["data"]))
                self._got_ports.set()
        self.proc.wait()
        self._got_ports.set()

    def wait_address(self, timeout: float = 15.0) -> NodeAddress:
        if not self._got_ports.wait(timeout) or self.address is None:
            detail = "; ".join(self.lines[-3:])
            if any("bind" in l.lower() for l in self.lines):
                raise PortBindFailure(f"node {self.index}: {detail}")
            raise ChildCrashed(self.index, detail or "no port announcement")
        return self.address

    def finish(self, timeout: float = 20.0) -> None:
        try:
            code = self.proc.wait(timeout)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            raise ChildCrashed(self.index, "did not exit after shutdown")
        self.supervisor.join(timeout=5.0)
        if code != 0:
            raise ChildCrashed(self.index, f"exit code {code}: "
                               + "; ".join(self.lines[-3:]))

    def kill(self) -> None:
        if self.proc.poll() is None:
            self.proc.kill()


class _LocalNode:
    """In-process stand-in with the same surface the harness needs."""

    def __init__(self, index: int, plan: BenchPlan):
        self.index = index
        shaping = shape_link(plan.link_latency_ms, plan.link_bandwidth_mbps)
        self.node = ComputeNode(
            host=plan.host,
            chunk=ChunkConfig(plan.chunk_bytes),
            compute_delay_per_layer_s=plan.compute_ms_per_layer / 1e3,
            **shaping,
        )
        self.node.start()

    def wait_address(self, timeout: float = 15.0) -> NodeAddress:
        n = self.node
        return NodeAddress(n.host, n.model_port, n.weights_port, n.data_port)

    def finish(self, timeout: float = 20.0) -> None:
        ok = self.node.run(timeout=timeout)
        if not ok:
            raise ChildCrashed(self.index, str(self.node.error or "unclean exit"))

    def kill(self) -> None:
        self.node.stop()


def _spawn_nodes(plan: BenchPlan, k: int):
    maker = _LocalNode if plan.in_process else _ChildNode
    return [maker(i, plan) for i in range(k)]


def run_single(plan: BenchPlan, k: int, codec: CodecConfig) -> MetricsReport:
    """One (node count, codec config) cell of the sweep."""
    graph = plan.model()
    rng = np.random.default_rng(plan.seed + 1)
    pool = [random_input(graph, rng) for _ in range(8)]
    children = _spawn_nodes(plan, k)
    session = None
    try:
        addrs = tuple(c.wait_address() for c in children)
        cfg = ChainConfig(
            nodes=addrs,
            arch_spec=codec.architecture,
            weights_spec=codec.weights,
            data_spec=codec.data,
            chunk=ChunkConfig(plan.chunk_bytes),
            window=plan.window,
            result_host=plan.host,
            **shape_link(plan.link_latency_ms, plan.link_bandwidth_mbps),
        )
        session = configure(graph, cfg)
        if plan.mode == "cycles":
            started = time.perf_counter()
            outs = session.infer_stream(
                [pool[i % len(pool)] for i in range(plan.cycles)])
            elapsed = max(time.perf_counter() - started, 1e-9)
            assert len(outs) == plan.cycles
            report = session.shutdown(window_seconds=elapsed)
        else:
            run_timed_window(
                session, lambda: pool[np.random.randint(len(pool))],
                plan.window_seconds)
            report = session.shutdown(window_seconds=plan.window_seconds)
        for c in children:
            c.finish()
        return report
    except BaseException:
        for c in children:
            c.kill()
        if session is not None:
            session.abort()
        raise


def run_bench(plan: BenchPlan, out_csv: str | Path | None = None,
              log=lambda s: None) -> tuple[list[str], dict]:
    """Full sweep; returns CSV rows (header included) and a summary map."""
    rows = [CSV_HEADER]
    summary: dict[tuple[int, str], float] = {}
    for k in plan.node_counts:
        for codec in plan.codec_configs:
            log(f"running k={k} codec={codec.name} ...")
            report = run_single(plan, k, codec)
            summary[(k, codec.name)] = report.throughput
            rows.extend(csv_rows(
                plan.model_label(), k,
                codec.serialization_label, codec.compression_label, report))
            log(f"  throughput {report.throughput:.3f} cycles/s, "
                f"payload {report.total_payload() / 1e6:.3f} MB")
    if out_csv is not None:
        Path(out_csv).write_text("\n".join(rows) + "\n")
    return rows, summary
