"""Dispatcher runtime: partition, configure each node over two
connections, then stream inputs through the chain and collect ordered
results.

One logical sender and one logical receiver run concurrently; a bounded
in-flight window keeps memory flat.  All per-connection byte counts and
formatting times feed the run's MetricsReport.
"""

from __future__ import annotations

import socket
import threading
import time
from dataclasses import dataclass

import numpy as np

from .codec import CodecSpec, DEFAULT_ARCH, DEFAULT_DATA, DEFAULT_WEIGHTS, encode_timed
from .codec import decode as decode_tensor
from .errors import (
    ChainBroken,
    ConfigRejected,
    DeferError,
    NodeUnreachable,
    OrderViolation,
)
from .metrics import MetricsReport, NodeMetrics
from .model import ModelGraph, graph_to_text
from .partition import Partition, auto_cuts, partition_model
from .payloads import (
    encode_architecture,
    encode_weights_bundle,
    format_next_hop,
    parse_ack,
)
from .shaping import ShapedSender
from .wire import (
    ChunkConfig,
    FrameReader,
    FrameWriter,
    Message,
    MessageKind,
    SequencedSender,
    frame_size,
)


@dataclass(frozen=True)
class NodeAddress:
    host: str
    model_port: int
    weights_port: int
    data_port: int

    def __post_init__(self):
        ports = (self.model_port, self.weights_port, self.data_port)
        if len(set(ports)) != 3:
            raise ValueError(f"ports must be distinct, got {ports}")

    @classmethod
    def parse(cls, text: str) -> "NodeAddress":
        """``host:model_port:weights_port:data_port``"""
        parts = text.strip().split(":")
        if len(parts) != 4:
            raise ValueError(f"expected host:mp:wp:dp, got {text!r}")
        return cls(parts[0], int(parts[1]), int(parts[2]), int(parts[3]))


@dataclass(frozen=True)
class ChainConfig:
    nodes: tuple[NodeAddress, ...]
    arch_spec: CodecSpec = DEFAULT_ARCH
    weights_spec: CodecSpec = DEFAULT_WEIGHTS
    data_spec: CodecSpec = DEFAULT_DATA
    chunk: ChunkConfig = ChunkConfig()
    window: int = 16
    result_host: str = "127.0.0.1"
    result_port: int = 0
    connect_timeout: float = 10.0
    link_latency_s: float = 0.0
    link_bandwidth_bps: float = 0.0

    def __post_init__(self):
        if len(self.nodes) < 1:
            raise ValueError("a chain needs at least one node")
        if self.window < 1:
            raise ValueError("window must be >= 1")


class ChainSession:
    """A configured chain.  ``submit`` and ``result`` are the two ends of
    the pipeline; ``shutdown`` drains it and gathers node metrics."""

    def __init__(self, graph: ModelGraph, cfg: ChainConfig):
        self.cfg = cfg
        self.graph = graph
        self.partitions: list[Partition] = []
        self._control: list[socket.socket] = []
        self._control_readers: list[FrameReader] = []
        self._control_writers: list[FrameWriter] = []
        self._weights_bytes = 0
        self._recv_control_bytes = 0
        self._overhead = {"architecture": 0.0, "weights": 0.0, "data": 0.0}
        self._result_server: socket.socket | None = None
        self._result_conn: socket.socket | None = None
        self._data_sock: socket.socket | None = None
        self._data_writer: FrameWriter | None = None
        self._data_shaper: ShapedSender | None = None
        self._sender: SequencedSender | None = None
        self._send_lock = threading.Lock()
        self._window = threading.Semaphore(cfg.window)
        self._cond = threading.Condition()
        self._results: dict[int, tuple[np.ndarray, float]] = {}
        self._next_result = 0
        self._submitted = 0
        self._received = 0
        self._drained = threading.Event()
        self._receiver: threading.Thread | None = None
        self._error: DeferError | None = None
        self._started_at: float | None = None
        self._shutdown_sent = False

    # --- configuration -----------------------------------------------------

    def configure(self) -> "ChainSession":
        cfg = self.cfg
        k = len(cfg.nodes)
        if not self.partitions:
            self.partitions = partition_model(self.graph, auto_cuts(self.graph, k))
        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server.bind((cfg.result_host, cfg.result_port))
        server.listen(1)
        server.settimeout(cfg.connect_timeout)
        self._result_server = server
        result_addr = server.getsockname()

        try:
            for i, addr in enumerate(cfg.nodes):
                self._configure_node(i, addr, result_addr)
            self._open_data_path()
            self._result_conn, _ = server.accept()
        except (OSError, socket.timeout) as e:
            self._teardown_partial()
            raise NodeUnreachable(len(self._control) - 1, str(e)) from e
        except DeferError:
            self._teardown_partial()
            raise

        self._receiver = threading.Thread(target=self._receive_loop, daemon=True)
        self._receiver.start()
        return self

    def _configure_node(self, i: int, addr: NodeAddress, result_addr) -> None:
        cfg = self.cfg
        part = self.partitions[i]
        try:
            model_conn = socket.create_connection(
                (addr.host, addr.model_port), timeout=cfg.connect_timeout)
            weights_conn = socket.create_connection(
                (addr.host, addr.weights_port), timeout=cfg.connect_timeout)
        except OSError as e:
            raise NodeUnreachable(i, str(e)) from e
        model_conn.settimeout(cfg.connect_timeout)
        weights_conn.settimeout(None)
        self._control.append(model_conn)
        writer = FrameWriter(model_conn.sendall, cfg.chunk)
        self._control_writers.append(writer)
        reader = FrameReader(model_conn.makefile("rb"))
        self._control_readers.append(reader)

        bundle, w_secs = encode_weights_bundle(part.weights, cfg.weights_spec)
        self._overhead["weights"] += w_secs
        weights_writer = FrameWriter(weights_conn.sendall, cfg.chunk)
        weights_writer.send(Message(MessageKind.WEIGHTS, 0, bundle))
        self._weights_bytes += weights_writer.counter.total
        weights_conn.close()

        arch_payload, a_secs = encode_architecture(
            graph_to_text(part.graph), cfg.arch_spec)
        self._overhead["architecture"] += a_secs
        writer.send(Message(MessageKind.ARCHITECTURE, 0, arch_payload))
        if i + 1 < len(cfg.nodes):
            hop = (cfg.nodes[i + 1].host, cfg.nodes[i + 1].data_port)
        else:
            hop = (result_addr[0], result_addr[1])
        writer.send(Message(MessageKind.NEXT_HOP, 0, format_next_hop(*hop)))

        ack = reader.read_message()
        if ack is None or ack.kind != MessageKind.RESULT:
            raise ConfigRejected(i, "node closed the control connection")
        self._recv_control_bytes += frame_size(len(ack.payload), cfg.chunk)
        doc = parse_ack(ack.payload)
        if doc["status"] != "ok":
            raise ConfigRejected(i, doc.get("reason", "unspecified"))

    def _open_data_path(self) -> None:
        cfg = self.cfg
        first = cfg.nodes[0]
        sock = socket.create_connection(
            (first.host, first.data_port), timeout=cfg.connect_timeout)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._data_sock = sock
        self._data_shaper = ShapedSender(
            sock.sendall, cfg.link_latency_s, cfg.link_bandwidth_bps)
        self._data_writer = FrameWriter(self._data_shaper.send, cfg.chunk)
        self._sender = SequencedSender(self._data_writer)

    def _teardown_partial(self) -> None:
        for writer, conn in zip(self._control_writers, self._control):
            try:
                writer.send(Message(MessageKind.SHUTDOWN, 0))
            except OSError:
                pass
        self._close_all()

    def _close_all(self) -> None:
        conns = list(self._control)
        for s in (self._result_conn, self._result_server, self._data_sock):
            if s is not None:
                conns.append(s)
        for s in conns:
            # a makefile() reader keeps the fd alive through close(), so
            # send the FIN explicitly to unblock the peer
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                s.close()
            except OSError:
                pass

    # --- streaming ---------------------------------------------------------

    def submit(self, tensor: np.ndarray) -> int:
        """Send one input; blocks while the in-flight window is full.
        Returns the sequence number its result will carry."""
        if self._error is not None:
            raise self._error
        if self._shutdown_sent:
            raise ChainBroken(0, "chain already shut down")
        self._window.acquire()
        if self._error is not None:
            self._window.release()
            raise self._error
        blob, secs = encode_timed(self.cfg.data_spec, tensor)
        with self._send_lock:
            if self._started_at is None:
                self._started_at = time.perf_counter()
            self._overhead["data"] += secs
            try:
                seq = self._sender.send(MessageKind.INFERENCE_DATA, blob)
            except OSError as e:
                self._error = ChainBroken(0, str(e))
                raise self._error from e
            self._submitted += 1
        return seq

    def _receive_loop(self) -> None:
        reader = FrameReader(self._result_conn.makefile("rb"))
        last = -1
        while True:
            try:
                msg = reader.read_message()
            except (DeferError, OSError) as e:
                self._fail(ChainBroken(len(self.cfg.nodes) - 1, str(e)))
                return
            if msg is None:
                if not self._drained.is_set():
                    self._fail(ChainBroken(
                        len(self.cfg.nodes) - 1, "result stream closed early"))
                return
            if msg.kind == MessageKind.SHUTDOWN:
                self._drained.set()
                with self._cond:
                    self._cond.notify_all()
                return
            if msg.kind != MessageKind.INFERENCE_DATA:
                self._fail(ChainBroken(
                    len(self.cfg.nodes) - 1, f"unexpected {msg.kind.name}"))
                return
            if msg.sequence <= last:
                self._fail(OrderViolation(
                    f"result {msg.sequence} after {last}"))
                return
            last = msg.sequence
            try:
                tensor = decode_tensor(msg.payload)
            except DeferError as e:
                self._fail(ChainBroken(len(self.cfg.nodes) - 1, str(e)))
                return
            with self._cond:
                self._results[msg.sequence] = (tensor, time.perf_counter())
                self._received += 1
                self._cond.notify_all()
            self._window.release()

    def _fail(self, err: DeferError) -> None:
        self._error = err
        with self._cond:
            self._cond.notify_all()
        # unblock any submitter stuck on the window
        self._window.release()

    def result(self, timeout: float | None = None) -> tuple[int, np.ndarray, float]:
        """Next result in submission order: (sequence, tensor, arrival time)."""
        deadline = None if timeout is None else time.perf_counter() + timeout
        with self._cond:
            while self._next_result not in self._results:
                if self._error is not None:
                    raise self._error
                wait = None if deadline is None else deadline - time.perf_counter()
                if wait is not None and wait <= 0:
                    raise TimeoutError(f"no result {self._next_result} yet")
                self._cond.wait(wait if wait is None or wait > 0 else 0)
            seq = self._next_result
            tensor, at = self._results.pop(seq)
            self._next_result += 1
        return seq, tensor, at

    def result_for(self, seq: int, timeout: float | None = None) -> np.ndarray:
        """Result for a specific submission; lets concurrent callers each
        wait on their own sequence number."""
        deadline = None if timeout is None else time.perf_counter() + timeout
        with self._cond:
            while seq not in self._results:
                if self._error is not None:
                    raise self._error
                wait = None if deadline is None else deadline - time.perf_counter()
                if wait is not None and wait <= 0:
                    raise TimeoutError(f"no result {seq} yet")
                self._cond.wait(wait if wait is None or wait > 0 else 0)
            tensor, _ = self._results.pop(seq)
        return tensor

    def infer_stream(self, inputs) -> list[np.ndarray]:
        """Run a whole sequence through the chain, preserving order.
        The sender never waits for result j before sending input j+1."""
        inputs = list(inputs)
        feeder_error: list[BaseException] = []

        def feed():
            try:
                for t in inputs:
                    self.submit(t)
            except BaseException as e:
                feeder_error.append(e)

        feeder = threading.Thread(target=feed, daemon=True)
        feeder.start()
        out = []
        for _ in inputs:
            if feeder_error:
                raise feeder_error[0]
            out.append(self.result(timeout=60.0)[1])
        feeder.join()
        if feeder_error:
            raise feeder_error[0]
        return out

    # --- teardown ----------------------------------------------------------

    def shutdown(self, window_seconds: float | None = None,
                 timeout: float = 30.0) -> MetricsReport:
        """Propagate Shutdown, wait for in-flight results, gather metrics."""
        with self._send_lock:
            if not self._shutdown_sent:
                self._shutdown_sent = True
                try:
                    self._sender.send(MessageKind.SHUTDOWN)
                except OSError as e:
                    self._error = self._error or ChainBroken(0, str(e))
        if self._data_shaper is not None:
            self._data_shaper.close()
        if not self._drained.wait(timeout) and self._error is None:
            self._error = ChainBroken(-1, "shutdown never echoed back")

        nodes = []
        for i, reader in enumerate(self._control_readers):
            try:
                msg = reader.read_message()
            except (DeferError, OSError):
                msg = None
            if msg is not None and msg.kind == MessageKind.SHUTDOWN:
                self._recv_control_bytes += frame_size(
                    len(msg.payload), self.cfg.chunk)
                nodes.append(NodeMetrics.from_json(
                    msg.payload.decode("utf-8"), index=i))
        report = self._build_report(nodes, window_seconds)
        self._close_all()
        if self._error is not None and not isinstance(self._error, ChainBroken):
            raise self._error
        return report

    def _build_report(self, nodes: list[NodeMetrics],
                      window_seconds: float | None) -> MetricsReport:
        if window_seconds is None:
            if self._started_at is not None:
                window_seconds = max(time.perf_counter() - self._started_at, 1e-9)
            else:
                window_seconds = 0.0
        payload = {
            "architecture": sum(w.counter.total for w in self._control_writers)
            + self._recv_control_bytes,
            "weights": self._weights_bytes,
            "data": (self._data_writer.counter.total if self._data_writer else 0)
            + sum(n.payload_bytes.get("data", 0) for n in nodes),
        }
        overhead = dict(self._overhead)
        overhead["data"] += sum(n.overhead_seconds for n in nodes)
        return MetricsReport(
            cycles_completed=self._received,
            window_seconds=window_seconds,
            overhead_by_class=overhead,
            payload_bytes=payload,
            nodes=nodes,
        )

    def abort(self) -> None:
        self._error = self._error or ChainBroken(-1, "aborted by caller")
        self._close_all()


def configure(graph: ModelGraph, cfg: ChainConfig) -> ChainSession:
    """Partition ``graph`` and set up every node; returns a live session."""
    return ChainSession(graph, cfg).configure()


def run_timed_window(session: ChainSession, input_factory,
                     window_seconds: float) -> int:
    """Keep the pipeline full for a fixed window; count results that
    arrive inside it.  The session is still live afterwards."""
    deadline = time.perf_counter() + window_seconds
    stop = threading.Event()

    def feed():
        while not stop.is_set() and time.perf_counter() < deadline:
            try:
                session.submit(input_factory())
            except DeferError:
                return

    feeder = threading.Thread(target=feed, daemon=True)
    feeder.start()
    cycles = 0
    while True:
        remaining = deadline - time.perf_counter()
        if remaining <= 0:
            break
        try:
            _, _, at = session.result(timeout=remaining)
        except TimeoutError:
            break
        except DeferError:
            break
        if at <= deadline:
            cycles += 1
    stop.set()
    feeder.join()
    # drain whatever is still in flight so shutdown is clean
    while session._received < session._submitted and session._error is None:
        try:
            session.result(timeout=30.0)
        except (TimeoutError, DeferError):
            break
    return cycles
