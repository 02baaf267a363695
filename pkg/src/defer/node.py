"""Compute node runtime: receive a partition, then relay inference
results down the chain in arrival order.

Two config connections (architecture+next-hop, weights) join through an
order-independent rendezvous.  After that exactly two stages run: a
reader feeding a bounded FIFO, and an inference/sender stage draining
it.  Sequence numbers pass through untouched, so FIFO order is
checkable end to end.
"""

from __future__ import annotations

import logging
import queue
import random
import socket
import threading
import time
from dataclasses import dataclass

from .codec import encode_timed
from .codec import decode as decode_tensor
from .errors import DeferError, OrderViolation
from .metrics import NodeMetrics
from .model import run_model
from .partition import Partition
from .payloads import (
    ack_ok,
    ack_rejected,
    data_codec_of,
    decode_architecture,
    decode_weights_bundle,
    parse_next_hop,
)
from .model import graph_from_text
from .shaping import ShapedSender
from .wire import (
    ChunkConfig,
    FrameReader,
    FrameWriter,
    Message,
    MessageKind,
    frame_encode,
)

log = logging.getLogger(__name__)

AWAITING_CONFIG = "AwaitingConfig"
READY = "Ready"
RUNNING = "Running"
STOPPED = "Stopped"

_PHASE_RANK = {AWAITING_CONFIG: 0, READY: 1, RUNNING: 2, STOPPED: 3}
_POLL_S = 0.05


@dataclass
class _Poison:
    clean: bool


class ComputeNode:
    """One worker in the chain.  Runs until a Shutdown propagates through.

    ``compute_delay_per_layer_s`` injects synthetic per-layer compute and
    ``jitter_max_s`` adds uniform random delay per message; both exist
    for benchmarking and pipeline tests.
    """

    def __init__(
        self,
        host: str = "127.0.0.1",
        model_port: int = 0,
        weights_port: int = 0,
        data_port: int = 0,
        queue_depth: int = 16,
        chunk: ChunkConfig = ChunkConfig(),
        compute_delay_per_layer_s: float = 0.0,
        jitter_max_s: float = 0.0,
        jitter_seed: int | None = None,
        link_latency_s: float = 0.0,
        link_bandwidth_bps: float = 0.0,
    ):
        self.host = host
        self._ports = {"model": model_port, "weights": weights_port, "data": data_port}
        self._queue: queue.Queue = queue.Queue(maxsize=queue_depth)
        self._chunk = chunk
        self._delay_per_layer = compute_delay_per_layer_s
        self._jitter_max = jitter_max_s
        self._rng = random.Random(jitter_seed)
        self._link_latency = link_latency_s
        self._link_bandwidth = link_bandwidth_bps

        self._phase = AWAITING_CONFIG
        self._phase_lock = threading.Lock()
        self.ready = threading.Event()
        self.stopped = threading.Event()
        self._stopping = False

        self.partition: Partition | None = None
        self.next_hop: tuple[str, int] | None = None
        self.metrics = NodeMetrics(index=-1)
        self.error: BaseException | None = None
        self.clean_exit = False

        self._listeners: dict[str, socket.socket] = {}
        self._conns: list[socket.socket] = []
        self._threads: list[threading.Thread] = []
        self._weights_box: dict | None = None
        self._weights_event = threading.Event()
        self._control_writer: FrameWriter | None = None
        self._data_writer: FrameWriter | None = None
        self._data_shaper: ShapedSender | None = None
        self._downstream_sock: socket.socket | None = None
        self._upstream_sock: socket.socket | None = None

    # --- lifecycle ---------------------------------------------------------

    @property
    def phase(self) -> str:
        return self._phase

    def _advance(self, phase: str) -> None:
        with self._phase_lock:
            if _PHASE_RANK[phase] < _PHASE_RANK[self._phase]:
                raise DeferError(
                    f"phase may only move forward ({self._phase} -> {phase})")
            self._phase = phase

    def start(self) -> None:
        """Bind all three ports and begin accepting."""
        for name in ("model", "weights", "data"):
            s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            s.bind((self.host, self._ports[name]))
            s.listen(1)
            self._ports[name] = s.getsockname()[1]
            self._listeners[name] = s
        for target in (self._weights_loop, self._config_loop, self._data_loop):
            t = threading.Thread(target=target, daemon=True)
            t.start()
            self._threads.append(t)

    @property
    def model_port(self) -> int:
        return self._ports["model"]

    @property
    def weights_port(self) -> int:
        return self._ports["weights"]

    @property
    def data_port(self) -> int:
        return self._ports["data"]

    def run(self, timeout: float | None = None) -> bool:
        """Block until shutdown; True on a clean exit."""
        if not self._listeners:
            self.start()
        self.stopped.wait(timeout)
        for t in self._threads:
            t.join(timeout=5.0)
        return self.clean_exit and self.error is None

    def stop(self) -> None:
        """Hard teardown for tests and signal handlers."""
        self._stopping = True
        self.stopped.set()
        self.ready.set()
        for s in self._conns:
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        for s in list(self._listeners.values()) + self._conns:
            try:
                s.close()
            except OSError:
                pass

    # --- configuration -----------------------------------------------------

    def _accept(self, name: str) -> socket.socket | None:
        try:
            conn, _ = self._listeners[name].accept()
        except OSError:
            return None
        self._conns.append(conn)
        self._listeners[name].close()
        return conn

    def _weights_loop(self) -> None:
        conn = self._accept("weights")
        if conn is None:
            return
        try:
            msg = FrameReader(conn.makefile("rb")).read_message()
            if msg is None or msg.kind != MessageKind.WEIGHTS:
                raise DeferError("expected a Weights message")
            self._weights_box = {"weights": decode_weights_bundle(msg.payload)}
        except (DeferError, OSError) as e:
            self._weights_box = {"error": e}
        finally:
            self._weights_event.set()

    def _config_loop(self) -> None:
        conn = self._accept("model")
        if conn is None:
            return
        try:
            self.receive_config(conn)
        except DeferError as e:
            self.error = self.error or e
            self._advance(STOPPED)
            self.ready.set()
            self.stopped.set()
            for s in self._listeners.values():
                try:
                    s.close()
                except OSError:
                    pass
            return
        # watch for dispatcher-side teardown while relaying
        watcher = threading.Thread(target=self._control_watch,
                                   args=(conn,), daemon=True)
        watcher.start()
        self._threads.append(watcher)
        self.stopped.wait()
        self._send_metrics_ack()

    def receive_config(self, model_conn: socket.socket) -> Partition:
        """Join architecture, weights and next-hop; build and validate the
        partition; open the downstream connection; acknowledge."""
        reader = FrameReader(model_conn.makefile("rb"))
        self._control_writer = FrameWriter(model_conn.sendall, self._chunk)
        arch_msg = reader.read_message()
        if arch_msg is None or arch_msg.kind != MessageKind.ARCHITECTURE:
            raise DeferError("expected an Architecture message first")
        hop_msg = reader.read_message()
        if hop_msg is None or hop_msg.kind != MessageKind.NEXT_HOP:
            raise DeferError("expected a NextHop message")
        self._control_reader = reader
        self._weights_event.wait()
        box = self._weights_box or {}
        try:
            if "error" in box:
                raise box["error"]
            text = decode_architecture(arch_msg.payload)
            graph = graph_from_text(text, box["weights"])
            self.next_hop = parse_next_hop(hop_msg.payload)
            self._connect_downstream()
        except (DeferError, OSError) as e:
            self._control_writer.send(
                Message(MessageKind.RESULT, 0, ack_rejected(str(e))))
            raise DeferError(f"configuration rejected: {e}") from e
        self.partition = Partition(index=0, graph=graph)
        infer = threading.Thread(target=self.relay_loop, daemon=True)
        infer.start()
        self._threads.append(infer)
        self._control_writer.send(
            Message(MessageKind.RESULT, 0,
                    ack_ok(len(self.partition.layer_ids()))))
        self._advance(READY)
        self.ready.set()
        return self.partition

    def _connect_downstream(self) -> None:
        host, port = self.next_hop
        sock = socket.create_connection((host, port), timeout=10.0)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._downstream_sock = sock
        self._conns.append(sock)
        shaper = ShapedSender(sock.sendall, self._link_latency,
                              self._link_bandwidth)
        self._data_shaper = shaper
        self._data_writer = FrameWriter(shaper.send, self._chunk)

    def _control_watch(self, conn: socket.socket) -> None:
        try:
            msg = self._control_reader.read_message()
        except (DeferError, OSError):
            msg = None
        if self.stopped.is_set():
            return
        # Shutdown order from the dispatcher, or it went away entirely
        if msg is None or msg.kind == MessageKind.SHUTDOWN:
            self._initiate_stop(clean=msg is not None)

    def _send_metrics_ack(self) -> None:
        if self._control_writer is None:
            return
        try:
            self._control_writer.send(
                Message(MessageKind.SHUTDOWN, 0,
                        self.metrics.to_json().encode("utf-8")))
        except OSError:
            pass

    # --- relay -------------------------------------------------------------

    def _data_loop(self) -> None:
        conn = self._accept("data")
        if conn is None:
            return
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._upstream_sock = conn
        self.ready.wait()
        if self.stopped.is_set():
            return
        reader = FrameReader(conn.makefile("rb"))
        last_seq = -1
        while not self._stopping:
            try:
                msg = reader.read_message()
            except (DeferError, OSError) as e:
                if not self._stopping:
                    self.error = self.error or e
                    self._enqueue(_Poison(clean=False))
                return
            if msg is None:
                # upstream closed without a Shutdown
                if not self._stopping:
                    self._enqueue(_Poison(clean=False))
                return
            if msg.kind == MessageKind.SHUTDOWN:
                self._enqueue(_Poison(clean=True))
                return
            if msg.kind != MessageKind.INFERENCE_DATA:
                self.error = DeferError(f"unexpected {msg.kind.name} on data path")
                self._enqueue(_Poison(clean=False))
                return
            if msg.sequence <= last_seq:
                self.error = OrderViolation(
                    f"sequence {msg.sequence} after {last_seq}")
                self._enqueue(_Poison(clean=False))
                return
            last_seq = msg.sequence
            self._enqueue((msg.sequence, msg.payload))

    def _enqueue(self, item) -> None:
        while True:
            try:
                self._queue.put(item, timeout=_POLL_S)
                return
            except queue.Full:
                if self._stopping:
                    return

    def relay_loop(self) -> None:
        """Drain the FIFO: decode, run the partition, re-encode, forward."""
        delay = self._delay_per_layer * len(self.partition.layer_ids())
        while True:
            try:
                item = self._queue.get(timeout=_POLL_S)
            except queue.Empty:
                if self._stopping:
                    item = _Poison(clean=False)
                else:
                    continue
            if isinstance(item, _Poison):
                self._finish(item.clean)
                return
            seq, payload = item
            if self._phase == READY:
                self._advance(RUNNING)
            try:
                started = time.perf_counter()
                spec = data_codec_of(payload)
                tensor = decode_tensor(payload)
                result = run_model(self.partition.graph, tensor)
                if delay > 0:
                    time.sleep(delay)
                if self._jitter_max > 0:
                    time.sleep(self._rng.uniform(0.0, self._jitter_max))
                self.metrics.compute_seconds += time.perf_counter() - started
                blob, enc_s = encode_timed(spec, result)
                self.metrics.overhead_seconds += enc_s
                self._data_writer.send(Message(MessageKind.INFERENCE_DATA, seq, blob))
                self.metrics.cycles += 1
            except (DeferError, OSError) as e:
                # mid-stream failure: abort the chain rather than skip a
                # message and silently break FIFO continuity
                log.error("relay aborted at seq %d: %s", seq, e)
                self.error = self.error or e
                self._finish(clean=False)
                return

    def _finish(self, clean: bool) -> None:
        self._stopping = True
        try:
            if self._data_writer is not None:
                self._data_writer.send(Message(MessageKind.SHUTDOWN, 0))
            if self._data_shaper is not None:
                self._data_shaper.close()
        except (OSError, DeferError) as e:
            self.error = self.error or e
            clean = False
        if not clean and self._upstream_sock is not None:
            # abort goes both directions, then the connection drops
            try:
                self._upstream_sock.sendall(
                    frame_encode(Message(MessageKind.SHUTDOWN, 0)))
            except OSError:
                pass
            try:
                self._upstream_sock.close()
            except OSError:
                pass
        self.clean_exit = clean and self.error is None
        # data bytes only: control-channel traffic is counted by the
        # dispatcher, and the metrics ack cannot include itself
        if self._data_writer is not None:
            self.metrics.payload_bytes = {"data": self._data_writer.counter.total}
        self._advance(STOPPED)
        for s in self._listeners.values():
            try:
                s.close()
            except OSError:
                pass
        self.stopped.set()

    def _initiate_stop(self, clean: bool) -> None:
        self._stopping = True
        self._enqueue(_Poison(clean=clean))
