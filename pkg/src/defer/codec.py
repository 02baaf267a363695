"""Tensor encode/decode: two serializations and an optional LZ stage.

TextArray renders shortest round-trip decimals in nested brackets (the
human-readable route).  BinaryFloat packs little-endian 32-bit words,
keeping only the top ``rate_bits`` bits of each word; rate 32 is
bit-lossless and is the default everywhere correctness matters.

Blob layout: codec id byte, rank byte, rank x u64le extents, body.
LZ-compressed bodies carry their own u64le original-length prefix.
"""

from __future__ import annotations

import math
import re
import struct
import time
from dataclasses import dataclass

import numpy as np

from .errors import CorruptStream, MalformedBlob, UnknownCodec
from .lz import compress_bytes, decompress_bytes
from .model import as_tensor

TEXT = "TextArray"
BINARY = "BinaryFloat"

_SER_BIT = 0x80   # set: BinaryFloat
_LZ_BIT = 0x40
_RATE_MASK = 0x3F


@dataclass(frozen=True)
class CodecSpec:
    """One cell of the serialization x compression matrix."""

    serialization: str
    rate_bits: int | None = None
    compression: str = "None"

    def __post_init__(self):
        if self.serialization not in (TEXT, BINARY):
            raise ValueError(f"unknown serialization {self.serialization!r}")
        if self.compression not in ("None", "LZ"):
            raise ValueError(f"unknown compression {self.compression!r}")
        if self.serialization == BINARY:
            if self.rate_bits is None or not 8 <= int(self.rate_bits) <= 32:
                raise ValueError("BinaryFloat needs rate_bits in [8, 32]")
        elif self.rate_bits is not None:
            raise ValueError("rate_bits applies to BinaryFloat only")

    @property
    def codec_id(self) -> int:
        cid = _LZ_BIT if self.compression == "LZ" else 0
        if self.serialization == BINARY:
            cid |= _SER_BIT | int(self.rate_bits)
        return cid

    @classmethod
    def from_id(cls, cid: int) -> "CodecSpec":
        if not 0 <= cid <= 0xFF:
            raise UnknownCodec(f"codec id {cid} out of range")
        compression = "LZ" if cid & _LZ_BIT else "None"
        rate = cid & _RATE_MASK
        if cid & _SER_BIT:
            if not 8 <= rate <= 32:
                raise UnknownCodec(f"codec id 0x{cid:02x} has bad rate {rate}")
            return cls(BINARY, rate, compression)
        if rate != 0:
            raise UnknownCodec(f"codec id 0x{cid:02x} is not a known codec")
        return cls(TEXT, None, compression)

    @classmethod
    def parse(cls, text: str) -> "CodecSpec":
        """CLI shorthand: ``text``, ``bin32``, ``bin16``, each with ``+lz``."""
        base, plus, comp = text.strip().lower().partition("+")
        compression = "None"
        if plus:
            if comp != "lz":
                raise ValueError(f"unknown compression suffix {comp!r}")
            compression = "LZ"
        if base == "text":
            return cls(TEXT, None, compression)
        if base.startswith("bin"):
            return cls(BINARY, int(base[3:] or "32"), compression)
        raise ValueError(f"unknown codec {text!r}")

    def shorthand(self) -> str:
        base = "text" if self.serialization == TEXT else f"bin{self.rate_bits}"
        return base + ("+lz" if self.compression == "LZ" else "")

    @property
    def lossless(self) -> bool:
        return self.serialization == TEXT or self.rate_bits == 32


LOSSLESS_BINARY = CodecSpec(BINARY, 32)
DEFAULT_DATA = CodecSpec(BINARY, 32, "LZ")
DEFAULT_WEIGHTS = CodecSpec(BINARY, 32, "LZ")
DEFAULT_ARCH = CodecSpec(TEXT)


# --- text serialization ---------------------------------------------------

def format_value(v: np.float32) -> str:
    """Shortest decimal that round-trips through float32."""
    return str(np.float32(v))


def _text_tokens(flat: np.ndarray) -> list[str]:
    # quantized data has few distinct values; format each once.  Unique
    # by bit pattern, not value: -0.0 == 0.0 but renders differently.
    bits, inverse = np.unique(flat.view(np.uint32), return_inverse=True)
    if bits.size <= max(4096, flat.size // 4):
        strs = [str(v) for v in bits.view(np.float32)]
        return [strs[j] for j in inverse]
    return [str(v) for v in flat]


def _nest(tokens: list[str], shape: tuple[int, ...]) -> str:
    groups = tokens
    for extent in reversed(shape):
        groups = ["[" + ",".join(groups[i:i + extent]) + "]"
                  for i in range(0, len(groups), extent)]
    assert len(groups) == 1
    return groups[0]


def _skeleton(shape: tuple[int, ...]) -> bytes:
    s = b"x"
    for extent in reversed(shape):
        s = b"[" + b",".join([s] * extent) + b"]"
    return s


def _encode_text(t: np.ndarray) -> bytes:
    return _nest(_text_tokens(t.reshape(-1)), tuple(t.shape)).encode("ascii")


def _decode_text(body: bytes, shape: tuple[int, ...]) -> np.ndarray:
    if re.sub(rb"[^,\[\]]+", b"x", body) != _skeleton(shape):
        raise MalformedBlob("text body does not match the declared shape")
    raw = body.translate(None, b"[]")
    try:
        values = [float(tok) for tok in raw.split(b",")]
    except ValueError as e:
        raise MalformedBlob(f"unparseable decimal: {e}") from e
    if len(values) != math.prod(shape):
        raise MalformedBlob("element count does not match the declared shape")
    return np.array(values, dtype=np.float32).reshape(shape)


# --- binary serialization ---------------------------------------------------

def _rate_mask(rate_bits: int) -> np.uint32:
    return np.uint32((0xFFFFFFFF << (32 - rate_bits)) & 0xFFFFFFFF)


def _encode_binary(t: np.ndarray, rate_bits: int) -> bytes:
    words = np.ascontiguousarray(t, dtype="<f4").view("<u4")
    if rate_bits < 32:
        words = words & _rate_mask(rate_bits)
    return words.tobytes(order="C")


def _decode_binary(body: bytes, shape: tuple[int, ...]) -> np.ndarray:
    count = math.prod(shape)
    if len(body) != 4 * count:
        raise MalformedBlob(f"binary body is {len(body)} bytes, want {4 * count}")
    return np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(shape)


# --- blob assembly ----------------------------------------------------------

def _pack_header(codec_id: int, shape: tuple[int, ...]) -> bytes:
    if len(shape) > 255:
        raise MalformedBlob("rank exceeds 255")
    return bytes([codec_id, len(shape)]) + struct.pack(f"<{len(shape)}Q", *shape)


def encode(spec: CodecSpec, tensor: np.ndarray) -> bytes:
    """Serialize ``tensor`` under ``spec`` into a self-describing blob."""
    t = as_tensor(tensor)
    if spec.serialization == TEXT:
        body = _encode_text(t)
    else:
        body = _encode_binary(t, int(spec.rate_bits))
    if spec.compression == "LZ":
        body = compress_bytes(body)
    return _pack_header(spec.codec_id, tuple(t.shape)) + body


def parse_header(blob: bytes) -> tuple[CodecSpec, tuple[int, ...], bytes]:
    if len(blob) < 2:
        raise MalformedBlob("blob shorter than its fixed header")
    spec = CodecSpec.from_id(blob[0])
    rank = blob[1]
    if rank < 1:
        raise MalformedBlob("rank must be >= 1")
    end = 2 + 8 * rank
    if len(blob) < end:
        raise MalformedBlob("extent table truncated")
    shape = struct.unpack_from(f"<{rank}Q", blob, 2)
    if any(d < 1 for d in shape):
        raise MalformedBlob(f"extents must be >= 1, got {shape}")
    return spec, tuple(int(d) for d in shape), blob[end:]


def decode(blob: bytes) -> np.ndarray:
    """Inverse of ``encode``; the blob names its own codec."""
    spec, shape, body = parse_header(blob)
    if spec.compression == "LZ":
        try:
            body = decompress_bytes(body)
        except CorruptStream as e:
            raise MalformedBlob(f"compressed body is corrupt: {e}") from e
    if spec.serialization == TEXT:
        return _decode_text(body, shape)
    return _decode_binary(body, shape)


def encode_timed(spec: CodecSpec, tensor: np.ndarray) -> tuple[bytes, float]:
    """Encode plus the wall time spent formatting, excluding any I/O."""
    start = time.perf_counter()
    blob = encode(spec, tensor)
    return blob, time.perf_counter() - start


def measure_overhead(spec: CodecSpec, tensor: np.ndarray) -> float:
    """Seconds spent in encode (and compression) for one tensor."""
    return encode_timed(spec, tensor)[1]
