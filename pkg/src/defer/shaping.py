"""Link shaping for loopback experiments: added latency plus a
token-bucket bandwidth cap, applied on the sending side.

Delivery of message i finishes at

    max(enqueue_i + latency, finish_{i-1}) + size_i / bandwidth

so latency delays each message once without throttling steady-state
throughput, while bandwidth serializes transmission.  A pacing thread
performs the writes, keeping the caller free to pipeline.
"""

from __future__ import annotations

import queue
import threading
import time


class ShapedSender:
    """Wraps a ``send(bytes)`` callable with latency/bandwidth pacing.

    latency_s <= 0 and bandwidth_bps <= 0 mean pass-through (and no
    pacing thread is started).
    """

    _SLICE = 64 * 1024

    def __init__(self, send_fn, latency_s: float = 0.0, bandwidth_bps: float = 0.0):
        self._send = send_fn
        self._latency = max(0.0, latency_s)
        self._bandwidth = max(0.0, bandwidth_bps)
        self._active = self._latency > 0 or self._bandwidth > 0
        self._error: BaseException | None = None
        if self._active:
            self._queue: queue.Queue = queue.Queue(maxsize=64)
            self._vt = 0.0  # completion time of the previous delivery
            self._thread = threading.Thread(target=self._run, daemon=True)
            self._thread.start()

    def send(self, data: bytes) -> None:
        if not self._active:
            self._send(data)
            return
        if self._error is not None:
            raise self._error
        self._queue.put((data, time.perf_counter()))

    def close(self, timeout: float = 30.0) -> None:
        """Flush queued writes and stop the pacing thread."""
        if self._active:
            self._queue.put(None)
            self._thread.join(timeout=timeout)
            if self._error is not None:
                raise self._error

    def _run(self) -> None:
        while True:
            item = self._queue.get()
            if item is None:
                return
            data, enqueued = item
            start = max(enqueued + self._latency, self._vt)
            try:
                if self._bandwidth > 0:
                    mark = start
                    for off in range(0, len(data), self._SLICE):
                        piece = data[off:off + self._SLICE]
                        mark += len(piece) * 8.0 / self._bandwidth
                        self._sleep_until(mark)
                        self._send(piece)
                    self._vt = mark
                else:
                    self._sleep_until(start)
                    self._send(data)
                    self._vt = start
            except BaseException as e:  # surface on the caller's next send
                self._error = e
                return

    @staticmethod
    def _sleep_until(target: float) -> None:
        delay = target - time.perf_counter()
        if delay > 0:
            time.sleep(delay)
