"""Payload schemas for the non-tensor message kinds.

Architecture: one codec-id byte (text, optionally LZ) then the graph
text.  Weights: u32le entry count, then per entry a u16le name length,
the UTF-8 name, a u64le blob length, and a tensor blob.  NextHop:
ASCII ``host:port``.  Config acks and node metrics ride as JSON text.
"""

from __future__ import annotations

import json
import struct
import time

import numpy as np

from .codec import TEXT, CodecSpec, encode_timed, parse_header
from .errors import CorruptStream, MalformedBlob
from .lz import compress_bytes, decompress_bytes
from .codec import decode as decode_tensor


def encode_architecture(text: str, spec: CodecSpec) -> tuple[bytes, float]:
    """Architecture is text by nature; only the LZ stage of ``spec`` applies."""
    flag = CodecSpec(TEXT, None, spec.compression)
    start = time.perf_counter()
    body = text.encode("utf-8")
    if spec.compression == "LZ":
        body = compress_bytes(body)
    payload = bytes([flag.codec_id]) + body
    return payload, time.perf_counter() - start


def decode_architecture(payload: bytes) -> str:
    if not payload:
        raise MalformedBlob("empty architecture payload")
    flag = CodecSpec.from_id(payload[0])
    if flag.serialization != TEXT:
        raise MalformedBlob("architecture payload must be text-serialized")
    body = payload[1:]
    if flag.compression == "LZ":
        try:
            body = decompress_bytes(body)
        except CorruptStream as e:
            raise MalformedBlob(f"architecture body corrupt: {e}") from e
    return body.decode("utf-8")


def encode_weights_bundle(weights: dict[str, np.ndarray],
                          spec: CodecSpec) -> tuple[bytes, float]:
    parts = [struct.pack("<I", len(weights))]
    overhead = 0.0
    for name in sorted(weights):
        blob, secs = encode_timed(spec, weights[name])
        overhead += secs
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<Q", len(blob)))
        parts.append(blob)
    return b"".join(parts), overhead


def decode_weights_bundle(payload: bytes) -> dict[str, np.ndarray]:
    if len(payload) < 4:
        raise MalformedBlob("weights bundle shorter than its count field")
    (count,) = struct.unpack_from("<I", payload, 0)
    weights: dict[str, np.ndarray] = {}
    off = 4
    for _ in range(count):
        if off + 2 > len(payload):
            raise MalformedBlob("weights bundle truncated at a name length")
        (name_len,) = struct.unpack_from("<H", payload, off)
        off += 2
        name = payload[off:off + name_len].decode("utf-8")
        off += name_len
        if off + 8 > len(payload):
            raise MalformedBlob("weights bundle truncated at a blob length")
        (blob_len,) = struct.unpack_from("<Q", payload, off)
        off += 8
        if off + blob_len > len(payload):
            raise MalformedBlob(f"weight {name!r} blob truncated")
        weights[name] = decode_tensor(payload[off:off + blob_len])
        off += blob_len
    if off != len(payload):
        raise MalformedBlob("weights bundle has trailing bytes")
    return weights


def data_codec_of(blob: bytes) -> CodecSpec:
    """The codec an inference payload arrived in; relays answer in kind."""
    return parse_header(blob)[0]


def format_next_hop(host: str, port: int) -> bytes:
    return f"{host}:{port}".encode("ascii")


def parse_next_hop(payload: bytes) -> tuple[str, int]:
    try:
        host, _, port = payload.decode("ascii").rpartition(":")
        if not host:
            raise ValueError("missing host")
        return host, int(port)
    except (UnicodeDecodeError, ValueError) as e:
        raise MalformedBlob(f"next-hop payload must be host:port: {e}") from e


def ack_ok(layer_count: int) -> bytes:
    return json.dumps({"status": "ok", "layers": layer_count}).encode("utf-8")


def ack_rejected(reason: str) -> bytes:
    return json.dumps({"status": "rejected", "reason": reason}).encode("utf-8")


def parse_ack(payload: bytes) -> dict:
    try:
        doc = json.loads(payload.decode("utf-8"))
        if doc.get("status") not in ("ok", "rejected"):
            raise ValueError("bad status")
        return doc
    except (UnicodeDecodeError, ValueError) as e:
        raise MalformedBlob(f"unparseable config ack: {e}") from e
