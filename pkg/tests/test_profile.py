import json
import math

import mpmath
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mimictun import synth
from mimictun.errors import IngestError, ProfileFormatError, SchemaError
from mimictun.profile import (
    CaptureRecord,
    FieldKind,
    build_schema,
    capacity,
    crc16_ccitt_false,
    ingest_capture,
    load_profile,
    profile_to_dict,
    read_capture,
    save_profile,
    schema_from_json,
    theoretical_goodput,
    write_capture,
)

from conftest import records, tiny_profile


def crc16_bitwise(data: bytes) -> bytes:
    # textbook shift-register CRC-16, poly 0x1021, init 0xFFFF, no reflection
    reg = 0xFFFF
    for byte in data:
        reg ^= byte << 8
        for _ in range(8):
            reg = ((reg << 1) ^ 0x1021) if reg & 0x8000 else reg << 1
            reg &= 0xFFFF
    return reg.to_bytes(2, "big")


def test_crc_check_value():
    assert crc16_ccitt_false(b"123456789") == b"\x29\xb1"


@given(st.binary(max_size=200))
def test_crc_matches_bitwise(data):
    assert crc16_ccitt_false(data) == crc16_bitwise(data)


SCHEMA_F1 = [{"name": "f1", "width": 1, "kind": "encoded"}, {"name": "f2", "width": 1, "kind": "encoded"}]


def test_ingest_first_seen_table():
    schema = build_schema(SCHEMA_F1)
    caps = records([0.0, 0.03, 0.07], [b"\x01\x00", b"\x02\x00", b"\x01\x00"])
    p = ingest_capture(caps, schema)
    assert p.tables["f1"].observations == (b"\x01", b"\x02")
    assert p.tables["f1"].count == 2
    assert p.delay_corpus.delays == pytest.approx((0.03, 0.04))


def test_ingest_eight_values_gives_three_bits():
    schema = build_schema(SCHEMA_F1)
    caps = records([i * 0.03 for i in range(20)], [bytes([i % 8, 0]) for i in range(20)])
    p = ingest_capture(caps, schema)
    assert p.tables["f1"].bits == 3
    assert capacity(p) == (3.0, 3)


def test_ingest_errors():
    schema = build_schema(SCHEMA_F1)
    with pytest.raises(IngestError, match="empty"):
        ingest_capture([], schema)
    with pytest.raises(IngestError, match=">= 2"):
        ingest_capture(records([0.0], [b"\x00\x00"]), schema)
    with pytest.raises(IngestError, match="record 2"):
        ingest_capture(records([0, 1, 2], [b"\x00\x00", b"\x00\x01", b"\x00"]), schema)
    with pytest.raises(IngestError, match="decrease"):
        ingest_capture(records([0, 1, 0.5], [b"\x00\x00"] * 3), schema)


def test_ingest_checks_computed_and_constant_fields():
    schema = build_schema([
        {"name": "hdr", "width": 1, "kind": "constant"},
        {"name": "f1", "width": 1, "kind": "encoded"},
        {"name": "chk", "width": 2, "kind": "computed"},
    ])
    good = [b"\xaa" + bytes([v]) for v in (1, 2)]
    good = [x + crc16_bitwise(x) for x in good]
    p = ingest_capture(records([0, 1], good), schema)
    assert p.tables["hdr"].observations == (b"\xaa",)
    bad = good[1][:-1] + bytes([good[1][-1] ^ 1])
    with pytest.raises(IngestError, match="record 1"):
        ingest_capture(records([0, 1], [good[0], bad]), schema)
    other = b"\xbb\x01" + crc16_bitwise(b"\xbb\x01")
    with pytest.raises(IngestError, match="constant"):
        ingest_capture(records([0, 1], [good[0], other]), schema)


def test_segments_break_delays():
    text = "# capture\n0.0 0100\n0.03 0200\n\n5.0 0100\n5.04 0300\n"
    caps = read_capture(text.splitlines())
    assert [c.segment for c in caps] == [0, 0, 1, 1]
    p = ingest_capture(caps, build_schema(SCHEMA_F1))
    assert p.delay_corpus.delays == pytest.approx((0.03, 0.04))
    assert read_capture(write_capture(caps).splitlines()) == caps


def test_ingest_idempotent(small_profile):
    caps = synth.synthetic_capture(small_profile, 300, seed=4)
    a = ingest_capture(caps, small_profile.schema, key=bytes(16))
    b = ingest_capture(caps, small_profile.schema, key=bytes(16))
    assert a == b


@pytest.mark.parametrize("counts,expected", [
    ([8], (3.0, 3)),
    ([1], (0.0, 0)),
    ([4, 2, 16], (7.0, 7)),
])
def test_capacity_exact(counts, expected):
    assert capacity(tiny_profile(counts)) == expected


def test_capacity_against_high_precision_oracle():
    mpmath.mp.dps = 40
    s, b = capacity(tiny_profile([5, 3]))
    oracle = mpmath.log(5, 2) + mpmath.log(3, 2)
    assert abs(s - float(oracle)) < 1e-12
    assert round(float(oracle), 4) == 3.9069
    assert b == 3


def test_game_profile_capacity(game_profile):
    s, b = capacity(game_profile)
    assert s == 516.0 and b == 516
    assert theoretical_goodput(game_profile, 0.03334) == pytest.approx(15477, abs=1)


def test_goodput_trivial_and_domain():
    p = tiny_profile([1])
    assert theoretical_goodput(p, 0.5) == 0
    assert theoretical_goodput(tiny_profile([2] * 100), 0.5) == pytest.approx(200)
    for bad in (0, -1.0):
        with pytest.raises(ValueError):
            theoretical_goodput(p, bad)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 300), min_size=1, max_size=8))
def test_capacity_bounds(counts):
    s, b = capacity(tiny_profile(counts, width=2))
    assert b <= s + 1e-9
    assert s < b + len(counts)
    assert b == sum(math.floor(math.log2(c) + 1e-12) for c in counts)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 200), min_size=1, max_size=5), st.data())
def test_capacity_monotone(counts, data):
    i = data.draw(st.integers(0, len(counts) - 1))
    bigger = list(counts)
    bigger[i] += 1
    assert capacity(tiny_profile(bigger, width=2))[0] >= capacity(tiny_profile(counts, width=2))[0]


def test_profile_round_trip(small_profile):
    text = save_profile(small_profile)
    again = load_profile(text)
    assert again == small_profile
    assert save_profile(again) == text


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=1, max_size=4), st.binary(min_size=16, max_size=16))
def test_profile_round_trip_property(counts, key):
    p = tiny_profile(counts, key=key)
    assert load_profile(save_profile(p)) == p


def _doc(profile, **changes):
    d = profile_to_dict(profile)
    d.update(changes)
    return d


def test_load_rejects_bad_documents():
    p = tiny_profile([4, 4])
    with pytest.raises(ProfileFormatError):
        load_profile("not json")
    with pytest.raises(ProfileFormatError, match="version"):
        load_profile(json.dumps(_doc(p, version=99)))
    dup = _doc(p)
    dup["tables"]["f1"][1] = dup["tables"]["f1"][0]
    with pytest.raises(ProfileFormatError, match="duplicate"):
        load_profile(json.dumps(dup))
    off = _doc(p)
    off["schema"][1]["offset"] = 7
    with pytest.raises(ProfileFormatError):
        load_profile(json.dumps(off))
    with pytest.raises(ProfileFormatError):
        load_profile(json.dumps(_doc(p, key="abcd")))


def test_schema_errors():
    with pytest.raises(SchemaError, match="unknown kind"):
        schema_from_json('[{"name": "a", "width": 1, "kind": "grammar"}]')
    with pytest.raises(SchemaError):
        build_schema([{"name": "c", "width": 2, "kind": "computed"}])
    with pytest.raises(SchemaError, match="duplicate"):
        build_schema([{"name": "a", "width": 1, "kind": "encoded"}] * 2)
    s = schema_from_json('{"fields": [{"name": "a", "width": 3, "kind": "ENCODED"}]}')
    assert s[0].kind is FieldKind.ENCODED and s[0].end == 3


def test_capture_record_parse_error():
    with pytest.raises(IngestError, match="line 2"):
        read_capture(["0.0 00", "0.1 zz"])
    assert read_capture(["# only a comment"]) == []
    assert isinstance(read_capture(["1.5 0a0b"])[0], CaptureRecord)
