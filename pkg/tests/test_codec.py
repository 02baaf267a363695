import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from defer.codec import (
    BINARY,
    TEXT,
    CodecSpec,
    decode,
    encode,
    encode_timed,
    measure_overhead,
    parse_header,
)
from defer.errors import MalformedBlob, UnknownCodec
from defer.model import as_tensor

ALL_SPECS = [
    CodecSpec(TEXT),
    CodecSpec(TEXT, None, "LZ"),
    CodecSpec(BINARY, 32),
    CodecSpec(BINARY, 32, "LZ"),
    CodecSpec(BINARY, 24),
    CodecSpec(BINARY, 16, "LZ"),
    CodecSpec(BINARY, 8),
]

LOSSLESS = [s for s in ALL_SPECS if s.lossless]


def rand_tensor(rng, shape):
    return as_tensor(rng.standard_normal(shape) * rng.choice([1e-3, 1.0, 1e4]))


class TestCodecId:
    def test_round_trips(self):
        for spec in ALL_SPECS:
            assert CodecSpec.from_id(spec.codec_id) == spec

    def test_injective(self):
        seen = {}
        specs = [CodecSpec(TEXT, None, c) for c in ("None", "LZ")] + [
            CodecSpec(BINARY, r, c) for r in range(8, 33) for c in ("None", "LZ")
        ]
        for spec in specs:
            assert spec.codec_id not in seen, (spec, seen[spec.codec_id])
            seen[spec.codec_id] = spec

    def test_unknown_ids_rejected(self):
        for cid in (0x01, 0x3F, 0x81, 0x87, 0xA1 + 0x1F):
            with pytest.raises(UnknownCodec):
                CodecSpec.from_id(cid)

    def test_parse_shorthand(self):
        assert CodecSpec.parse("text") == CodecSpec(TEXT)
        assert CodecSpec.parse("bin32+lz") == CodecSpec(BINARY, 32, "LZ")
        assert CodecSpec.parse("bin16") == CodecSpec(BINARY, 16)
        with pytest.raises(ValueError):
            CodecSpec.parse("gzip")


class TestTextForm:
    def test_canonical_vector(self):
        blob = encode(CodecSpec(TEXT), as_tensor([1.0, 2.0]))
        spec, shape, body = parse_header(blob)
        assert shape == (2,)
        assert body == b"[1.0,2.0]"

    def test_nested_by_shape(self):
        blob = encode(CodecSpec(TEXT), as_tensor([[1.0, 2.0], [3.0, 4.0]]))
        _, _, body = parse_header(blob)
        assert body == b"[[1.0,2.0],[3.0,4.0]]"

    def test_shortest_round_trip_decimals(self):
        t = as_tensor([0.1, 1 / 3, 1e30])
        _, _, body = parse_header(encode(CodecSpec(TEXT), t))
        assert body == b"[0.1,0.33333334,1e+30]"
        assert (decode(encode(CodecSpec(TEXT), t)) == t).all()

    def test_malformed_nesting_rejected(self):
        good = bytearray(encode(CodecSpec(TEXT), as_tensor([[1.0], [2.0]])))
        bad = bytes(good).replace(b"[[1.0],[2.0]]", b"[1.0,2.0]")
        with pytest.raises(MalformedBlob):
            decode(bad)

    def test_garbage_token_rejected(self):
        bad = bytes(encode(CodecSpec(TEXT), as_tensor([1.0, 2.0]))).replace(b"2.0", b"2..0")
        with pytest.raises(MalformedBlob):
            decode(bad)


class TestBinaryForm:
    def test_rate32_bit_exact(self):
        rng = np.random.default_rng(0)
        t = rand_tensor(rng, (13, 7))
        out = decode(encode(CodecSpec(BINARY, 32), t))
        assert out.tobytes() == t.tobytes()

    def test_rate16_on_one_is_exact(self):
        # bit-level oracle: 1.0f = 0x3F800000, low 16 bits already zero
        (word,) = struct.unpack("<I", struct.pack("<f", 1.0))
        assert word & 0xFFFF == 0
        out = decode(encode(CodecSpec(BINARY, 16), as_tensor([1.0])))
        assert out.tolist() == [1.0]

    def test_truncation_zeroes_low_bits(self):
        rng = np.random.default_rng(1)
        t = rand_tensor(rng, (257,))
        out = decode(encode(CodecSpec(BINARY, 24), t))
        words = out.view(np.uint32)
        assert (words & np.uint32(0xFF)).max() == 0

    def test_rate24_error_bound(self):
        # brute-force scan of 1000 random elements against the original
        rng = np.random.default_rng(2)
        t = rand_tensor(rng, (1000,))
        out = decode(encode(CodecSpec(BINARY, 24), t))
        rel = np.abs(out.astype(np.float64) - t.astype(np.float64)) / np.abs(t)
        assert rel.max() <= 2.0 ** -7

    @pytest.mark.parametrize("rate", [10, 12, 16, 20, 24, 28, 31])
    def test_truncation_error_bound_all_rates(self, rate):
        # zeroing the low 32-rate mantissa bits moves a normal value by
        # strictly less than 2^(9-rate) in relative terms
        rng = np.random.default_rng(rate)
        t = rand_tensor(rng, (4096,))
        out = decode(encode(CodecSpec(BINARY, rate), t))
        rel = np.abs(out.astype(np.float64) - t.astype(np.float64)) / np.abs(t)
        assert rel.max() < 2.0 ** (9 - rate)

    def test_wrong_body_size_rejected(self):
        blob = bytearray(encode(CodecSpec(BINARY, 32), as_tensor([1.0, 2.0])))
        with pytest.raises(MalformedBlob):
            decode(bytes(blob[:-3]))


class TestRoundTripLaws:
    @pytest.mark.parametrize("spec", LOSSLESS, ids=lambda s: s.shorthand())
    def test_lossless_round_trip(self, spec):
        rng = np.random.default_rng(3)
        for shape in [(1,), (5,), (2, 3), (2, 3, 4), (1, 2, 2, 2)]:
            t = rand_tensor(rng, shape)
            out = decode(encode(spec, t))
            assert out.shape == t.shape
            assert out.tobytes() == t.tobytes()

    @pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: s.shorthand())
    def test_zeros_survive_any_spec(self, spec):
        t = as_tensor(np.zeros((4, 4)))
        out = decode(encode(spec, t))
        assert (out == 0.0).all()

    @given(
        data=st.lists(
            st.floats(width=32, allow_nan=False, allow_infinity=False),
            min_size=1,
            max_size=64,
        ),
        lz=st.booleans(),
        text=st.booleans(),
    )
    @settings(max_examples=200, deadline=None)
    def test_property_round_trip(self, data, lz, text):
        spec = CodecSpec(TEXT if text else BINARY,
                         None if text else 32,
                         "LZ" if lz else "None")
        t = as_tensor(np.array(data, dtype=np.float32))
        out = decode(encode(spec, t))
        assert out.tobytes() == t.tobytes()

    def test_shape_survives(self):
        rng = np.random.default_rng(4)
        t = rand_tensor(rng, (3, 1, 5))
        for spec in ALL_SPECS:
            assert decode(encode(spec, t)).shape == (3, 1, 5)


class TestOverhead:
    def test_non_negative_and_measures_encode(self):
        t = as_tensor(np.ones((64, 64)))
        for spec in ALL_SPECS[:4]:
            assert measure_overhead(spec, t) >= 0.0

    def test_text_slower_than_binary_on_large_tensor(self):
        rng = np.random.default_rng(5)
        t = as_tensor(rng.standard_normal(1_000_000))
        _, t_text = encode_timed(CodecSpec(TEXT), t)
        _, t_bin = encode_timed(CodecSpec(BINARY, 32), t)
        assert t_text > t_bin

    def test_lz_adds_time(self):
        rng = np.random.default_rng(6)
        t = as_tensor(rng.standard_normal(500_000))
        _, plain = encode_timed(CodecSpec(BINARY, 32), t)
        _, with_lz = encode_timed(CodecSpec(BINARY, 32, "LZ"), t)
        assert with_lz >= plain


class TestHeader:
    def test_truncated_header(self):
        with pytest.raises(MalformedBlob):
            decode(b"\x00")

    def test_extent_table_truncated(self):
        with pytest.raises(MalformedBlob):
            decode(bytes([0x00, 2]) + b"\x01\x00\x00\x00")

    def test_rank_zero_rejected(self):
        with pytest.raises(MalformedBlob):
            decode(bytes([0x00, 0]))
