"""Framed, chunked message transport shared by every connection.

Frame layout (all integers little-endian):

    magic   2 bytes  b"DF"
    kind    1 byte   MessageKind
    seq     8 bytes  per-connection sequence number
    length  8 bytes  total payload size
    chunks  repeated: u32 chunk size, then that many payload bytes

Payloads are split into chunks of at most ``chunk_bytes`` (default
512 * 1024).  An empty payload has zero chunks, so the minimal frame is
exactly the 19-byte header.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from enum import IntEnum

from .errors import BadMagic, ChunkOverflow, TruncatedFrame

MAGIC = b"DF"
HEADER = struct.Struct("<2sBQQ")
HEADER_BYTES = HEADER.size  # 19
CHUNK_HEADER = struct.Struct("<I")
DEFAULT_CHUNK_BYTES = 512 * 1024
MAX_PAYLOAD = 1 << 48


class MessageKind(IntEnum):
    ARCHITECTURE = 1
    WEIGHTS = 2
    NEXT_HOP = 3
    INFERENCE_DATA = 4
    RESULT = 5
    SHUTDOWN = 6


@dataclass(frozen=True)
class ChunkConfig:
    chunk_bytes: int = DEFAULT_CHUNK_BYTES

    def __post_init__(self):
        if self.chunk_bytes < 4096:
            raise ValueError("chunk_bytes must be >= 4096")


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    sequence: int
    payload: bytes = b""


def frame_encode(msg: Message, chunk: ChunkConfig = ChunkConfig()) -> bytes:
    """Render one message as a complete frame."""
    payload = msg.payload
    if len(payload) >= MAX_PAYLOAD:
        raise ValueError("payload too large for the frame format")
    parts = [HEADER.pack(MAGIC, int(msg.kind), msg.sequence, len(payload))]
    step = chunk.chunk_bytes
    for off in range(0, len(payload), step):
        piece = payload[off:off + step]
        parts.append(CHUNK_HEADER.pack(len(piece)))
        parts.append(piece)
    return b"".join(parts)


def frame_size(payload_len: int, chunk: ChunkConfig = ChunkConfig()) -> int:
    chunks = -(-payload_len // chunk.chunk_bytes) if payload_len else 0
    return HEADER_BYTES + payload_len + 4 * chunks


class FrameReader:
    """Pulls messages off a blocking binary stream (``read(n)``).

    ``read_message`` returns None on a clean end-of-stream at a frame
    boundary and raises TruncatedFrame if the stream dies mid-frame.
    """

    def __init__(self, stream):
        self._stream = stream

    def _read_exact(self, n: int, context: str) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            piece = self._stream.read(n - len(buf))
            if not piece:
                raise TruncatedFrame(f"stream ended inside {context}")
            buf += piece
        return bytes(buf)

    def read_message(self) -> Message | None:
        first = self._stream.read(1)
        if not first:
            return None
        header = first + self._read_exact(HEADER_BYTES - 1, "frame header")
        magic, kind_byte, seq, total = HEADER.unpack(header)
        if magic != MAGIC:
            raise BadMagic(f"expected {MAGIC!r}, got {magic!r}")
        try:
            kind = MessageKind(kind_byte)
        except ValueError as e:
            raise BadMagic(f"unknown message kind {kind_byte}") from e
        remaining = total
        pieces = []
        while remaining:
            (chunk_len,) = CHUNK_HEADER.unpack(
                self._read_exact(4, "chunk header"))
            if chunk_len == 0 or chunk_len > remaining:
                raise ChunkOverflow(
                    f"chunk of {chunk_len} bytes with {remaining} left in frame")
            pieces.append(self._read_exact(chunk_len, "chunk body"))
            remaining -= chunk_len
        return Message(kind, seq, b"".join(pieces))


class PayloadCounter:
    """Cumulative bytes written per message kind, frame headers included."""

    def __init__(self):
        self._lock = threading.Lock()
        self._by_kind: dict[MessageKind, int] = {}
        self._total = 0

    def add(self, kind: MessageKind, n: int) -> None:
        with self._lock:
            self._by_kind[kind] = self._by_kind.get(kind, 0) + n
            self._total += n

    @property
    def total(self) -> int:
        with self._lock:
            return self._total

    def by_kind(self) -> dict[MessageKind, int]:
        with self._lock:
            return dict(self._by_kind)

    def reset(self) -> None:
        with self._lock:
            self._by_kind.clear()
            self._total = 0


class FrameWriter:
    """Serializes messages onto a send callable, counting every byte.

    One writer per connection; the internal lock keeps concurrent
    callers from interleaving frames.
    """

    def __init__(self, send_fn, chunk: ChunkConfig = ChunkConfig(),
                 counter: PayloadCounter | None = None):
        self._send = send_fn
        self._chunk = chunk
        self.counter = counter if counter is not None else PayloadCounter()
        self._lock = threading.Lock()

    def send(self, msg: Message) -> None:
        frame = frame_encode(msg, self._chunk)
        with self._lock:
            self._send(frame)
        self.counter.add(msg.kind, len(frame))


def count_payload(writer: FrameWriter) -> int:
    """Cumulative bytes this connection has written, headers included."""
    return writer.counter.total


class SequencedSender:
    """FrameWriter plus a strictly increasing per-connection sequence."""

    def __init__(self, writer: FrameWriter):
        self._writer = writer
        self._seq = 0
        self._lock = threading.Lock()

    def send(self, kind: MessageKind, payload: bytes = b"") -> int:
        with self._lock:
            seq = self._seq
            self._seq += 1
            self._writer.send(Message(kind, seq, payload))
        return seq
