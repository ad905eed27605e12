"""Host-protocol profiles: field schema, observation tables and delay corpus.

A profile is learned once from a capture of the host protocol and shared
out-of-band by both tunnel endpoints.  It records, for every field of the
datagram payload, the ordered list of distinct values seen in the capture,
plus the interpacket delays used later to fit the timing model.

Capture text format, one record per line::

    <timestamp_seconds> <hex_payload>

Lines starting with ``#`` are comments.  A blank line ends a contiguous
capture segment; no delay is measured across a segment break.
"""
from __future__ import annotations

import binascii
import json
import math
import secrets
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Iterable, Sequence

from .errors import IngestError, ProfileFormatError, SchemaError

PROFILE_FORMAT = "mimictun-profile"
PROFILE_VERSION = 1
KEY_BYTES = 16
DEFAULT_UDP_PORT = 4713


class FieldKind(str, Enum):
    CONSTANT = "constant"
    ENCODED = "encoded"
    COMPUTED = "computed"


def crc16_ccitt_false(data: bytes) -> bytes:
    # poly 0x1021, init 0xFFFF, no reflection, no final xor
    return binascii.crc_hqx(data, 0xFFFF).to_bytes(2, "big")


# rule name -> (output width in bytes, function)
CHECKSUM_RULES = {
    "crc16-ccitt-false": (2, crc16_ccitt_false),
}
DEFAULT_RULE = "crc16-ccitt-false"


@dataclass(frozen=True)
class FieldSpec:
    """One field of the host datagram.

    ``covers`` is only meaningful for COMPUTED fields: the half-open byte
    range the checksum rule is evaluated over.  It defaults to every byte
    before the field.
    """

    name: str
    offset: int
    width: int
    kind: FieldKind
    rule: str | None = None
    covers: tuple[int, int] | None = None

    @property
    def end(self) -> int:
        return self.offset + self.width

    @property
    def span(self) -> slice:
        return slice(self.offset, self.offset + self.width)


def build_schema(fields: Iterable[dict]) -> tuple[FieldSpec, ...]:
    """Build a validated schema from plain dicts.

    Each dict needs ``name``, ``width`` and ``kind``; ``offset`` is optional
    and, when given, must match the running offset.  COMPUTED fields may
    carry ``rule`` (default CRC-16/CCITT-FALSE) and ``covers``.
    """
    schema = []
    offset = 0
    for i, raw in enumerate(fields):
        try:
            name = str(raw["name"])
            width = int(raw["width"])
            kind_text = str(raw["kind"]).lower()
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"field {i}: missing or invalid key ({exc})") from None
        try:
            kind = FieldKind(kind_text)
        except ValueError:
            raise SchemaError(f"field {i} ({name}): unknown kind {raw['kind']!r}") from None
        if "offset" in raw and int(raw["offset"]) != offset:
            raise SchemaError(
                f"field {i} ({name}): offset {raw['offset']} but fields must be "
                f"contiguous (expected {offset})"
            )
        rule = None
        covers = None
        if kind is FieldKind.COMPUTED:
            rule = raw.get("rule", DEFAULT_RULE)
            cov = raw.get("covers", (0, offset))
            covers = (int(cov[0]), int(cov[1]))
        schema.append(FieldSpec(name, offset, width, kind, rule, covers))
        offset += width
    validate_schema(schema, offset)
    return tuple(schema)


def validate_schema(schema: Sequence[FieldSpec], datagram_len: int) -> None:
    if not schema:
        raise SchemaError("schema has no fields")
    names = set()
    pos = 0
    for f in schema:
        if f.name in names:
            raise SchemaError(f"duplicate field name {f.name!r}")
        names.add(f.name)
        if f.width < 1:
            raise SchemaError(f"field {f.name!r}: width must be >= 1")
        if f.offset != pos:
            raise SchemaError(f"field {f.name!r}: offset {f.offset} out of place (expected {pos})")
        pos = f.end
        if f.kind is FieldKind.COMPUTED:
            if f.rule not in CHECKSUM_RULES:
                raise SchemaError(f"field {f.name!r}: unknown checksum rule {f.rule!r}")
            width, _ = CHECKSUM_RULES[f.rule]
            if width != f.width:
                raise SchemaError(f"field {f.name!r}: rule {f.rule} yields {width} bytes, field has {f.width}")
            start, stop = f.covers
            if not 0 <= start < stop <= f.offset:
                raise SchemaError(f"field {f.name!r}: covered range {f.covers} must lie before the field")
        elif f.rule is not None or f.covers is not None:
            raise SchemaError(f"field {f.name!r}: only computed fields take a rule")
    if pos != datagram_len:
        raise SchemaError(f"field widths sum to {pos}, datagram length is {datagram_len}")


def schema_from_json(text: str) -> tuple[FieldSpec, ...]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"schema is not valid JSON: {exc}") from None
    if isinstance(doc, dict):
        doc = doc.get("fields")
    if not isinstance(doc, list):
        raise SchemaError("schema must be a list of fields or {'fields': [...]}")
    return build_schema(doc)


def schema_to_dicts(schema: Sequence[FieldSpec]) -> list[dict]:
    out = []
    for f in schema:
        d = {"name": f.name, "offset": f.offset, "width": f.width, "kind": f.kind.value}
        if f.kind is FieldKind.COMPUTED:
            d["rule"] = f.rule
            d["covers"] = list(f.covers)
        out.append(d)
    return out


@dataclass(frozen=True)
class ObservationTable:
    """Ordered distinct values observed for one field."""

    field: str
    observations: tuple[bytes, ...]

    @property
    def count(self) -> int:
        return len(self.observations)

    @property
    def bits(self) -> int:
        """Whole bits this field can carry: floor(log2(count))."""
        return self.count.bit_length() - 1

    @cached_property
    def index(self) -> dict[bytes, int]:
        return {obs: i for i, obs in enumerate(self.observations)}


@dataclass(frozen=True)
class DelayCorpus:
    delays: tuple[float, ...]

    @property
    def count(self) -> int:
        return len(self.delays)

    @property
    def mean(self) -> float:
        return math.fsum(self.delays) / len(self.delays) if self.delays else 0.0


@dataclass(frozen=True)
class CaptureRecord:
    timestamp: float
    payload: bytes
    segment: int = 0


@dataclass(frozen=True)
class Profile:
    schema: tuple[FieldSpec, ...]
    tables: dict[str, ObservationTable]
    delay_corpus: DelayCorpus
    key: bytes
    datagram_len: int
    udp_port: int = DEFAULT_UDP_PORT

    def __post_init__(self):
        validate_profile(self)

    @cached_property
    def encoded_fields(self) -> tuple[FieldSpec, ...]:
        return tuple(f for f in self.schema if f.kind is FieldKind.ENCODED)

    @cached_property
    def theoretical_bits(self) -> float:
        return capacity(self)[0]

    @cached_property
    def usable_bits(self) -> int:
        return capacity(self)[1]


def validate_profile(p: Profile) -> None:
    validate_schema(p.schema, p.datagram_len)
    if len(p.key) != KEY_BYTES:
        raise ProfileFormatError(f"key must be {KEY_BYTES} bytes, got {len(p.key)}")
    if not 0 <= p.udp_port <= 65535:
        raise ProfileFormatError(f"udp port {p.udp_port} out of range")
    expected = {f.name for f in p.schema if f.kind is not FieldKind.COMPUTED}
    if set(p.tables) != expected:
        raise ProfileFormatError(
            f"tables for {sorted(p.tables)} but non-computed fields are {sorted(expected)}"
        )
    for f in p.schema:
        if f.kind is FieldKind.COMPUTED:
            continue
        table = p.tables[f.name]
        obs = table.observations
        if not obs:
            raise ProfileFormatError(f"field {f.name!r} has no observations")
        if f.kind is FieldKind.CONSTANT and len(obs) != 1:
            raise ProfileFormatError(f"constant field {f.name!r} has {len(obs)} observations")
        if len(set(obs)) != len(obs):
            raise ProfileFormatError(f"field {f.name!r} has duplicate observations")
        if any(len(o) != f.width for o in obs):
            raise ProfileFormatError(f"field {f.name!r}: observation width differs from {f.width}")
    if any(not d >= 0 for d in p.delay_corpus.delays):
        raise ProfileFormatError("delay corpus contains negative or NaN delays")


def read_capture(lines: Iterable[str]) -> list[CaptureRecord]:
    """Parse capture text (see module docstring) into records."""
    records = []
    segment = 0
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if line.startswith("#"):
            continue
        if not line:
            if records and records[-1].segment == segment:
                segment += 1
            continue
        parts = line.split()
        if len(parts) != 2:
            raise IngestError(f"line {lineno}: expected '<timestamp> <hex>'")
        try:
            ts = float(parts[0])
            payload = bytes.fromhex(parts[1])
        except ValueError as exc:
            raise IngestError(f"line {lineno}: {exc}") from None
        records.append(CaptureRecord(ts, payload, segment))
    return records


def write_capture(records: Iterable[CaptureRecord]) -> str:
    out = []
    last = None
    for r in records:
        if last is not None and r.segment != last:
            out.append("")
        out.append(f"{r.timestamp!r} {r.payload.hex()}")
        last = r.segment
    return "\n".join(out) + "\n"


def ingest_capture(
    capture: Sequence[CaptureRecord],
    schema: Sequence[FieldSpec],
    *,
    key: bytes | None = None,
    udp_port: int = DEFAULT_UDP_PORT,
) -> Profile:
    """Learn a profile from captured host-protocol datagrams.

    Tables keep distinct values per field in first-seen order.  Constant
    fields must hold a single value and computed fields must agree with
    their checksum rule, otherwise the capture does not match the schema.
    A fresh random key is drawn when none is given.
    """
    if not capture:
        raise IngestError("empty capture")
    if len(capture) < 2:
        raise IngestError("need >= 2 records to measure interpacket delays")
    schema = tuple(schema)
    datagram_len = sum(f.width for f in schema)
    validate_schema(schema, datagram_len)

    seen: dict[str, dict[bytes, None]] = {
        f.name: {} for f in schema if f.kind is not FieldKind.COMPUTED
    }
    delays = []
    prev = None
    for i, rec in enumerate(capture):
        if len(rec.payload) != datagram_len:
            raise IngestError(f"payload is {len(rec.payload)} bytes, schema needs {datagram_len}", i)
        for f in schema:
            value = rec.payload[f.span]
            if f.kind is FieldKind.COMPUTED:
                _, rule = CHECKSUM_RULES[f.rule]
                if rule(rec.payload[f.covers[0]:f.covers[1]]) != value:
                    raise IngestError(f"field {f.name!r} fails rule {f.rule}", i)
            else:
                seen[f.name].setdefault(value, None)
        if prev is not None and prev.segment == rec.segment:
            gap = rec.timestamp - prev.timestamp
            if gap < 0:
                raise IngestError("timestamps decrease", i)
            delays.append(gap)
        prev = rec
    for f in schema:
        if f.kind is FieldKind.CONSTANT and len(seen[f.name]) != 1:
            raise IngestError(f"constant field {f.name!r} takes {len(seen[f.name])} values")

    tables = {name: ObservationTable(name, tuple(vals)) for name, vals in seen.items()}
    return Profile(
        schema=schema,
        tables=tables,
        delay_corpus=DelayCorpus(tuple(delays)),
        key=secrets.token_bytes(KEY_BYTES) if key is None else bytes(key),
        datagram_len=datagram_len,
        udp_port=udp_port,
    )


def capacity(profile: Profile) -> tuple[float, int]:
    """Return (theoretical_bits, usable_bits) for one datagram.

    theoretical = sum(log2 |table|), usable = sum(floor(log2 |table|)),
    both over ENCODED fields only.
    """
    theoretical = 0.0
    usable = 0
    for f in profile.schema:
        if f.kind is FieldKind.ENCODED:
            table = profile.tables[f.name]
            theoretical += math.log2(table.count)
            usable += table.bits
    return theoretical, usable


def theoretical_goodput(profile: Profile, t_avg: float) -> float:
    """Best-case goodput in bits/s when one datagram leaves every ``t_avg`` seconds."""
    if not t_avg > 0:
        raise ValueError(f"t_avg must be positive, got {t_avg}")
    return profile.theoretical_bits / t_avg


def profile_to_dict(profile: Profile) -> dict:
    return {
        "format": PROFILE_FORMAT,
        "version": PROFILE_VERSION,
        "datagram_len": profile.datagram_len,
        "udp_port": profile.udp_port,
        "key": profile.key.hex(),
        "schema": schema_to_dicts(profile.schema),
        "tables": {
            f.name: [o.hex() for o in profile.tables[f.name].observations]
            for f in profile.schema
            if f.kind is not FieldKind.COMPUTED
        },
        "delays": list(profile.delay_corpus.delays),
    }


def save_profile(profile: Profile) -> str:
    return json.dumps(profile_to_dict(profile), indent=1) + "\n"


def load_profile(text: str | bytes) -> Profile:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProfileFormatError(f"not a JSON document: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != PROFILE_FORMAT:
        raise ProfileFormatError("not a mimictun profile document")
    if doc.get("version") != PROFILE_VERSION:
        raise ProfileFormatError(f"unsupported profile version {doc.get('version')!r}")
    try:
        datagram_len = int(doc["datagram_len"])
        schema = []
        for raw in doc["schema"]:
            kind = FieldKind(raw["kind"])
            covers = tuple(raw["covers"]) if "covers" in raw else None
            schema.append(
                FieldSpec(raw["name"], int(raw["offset"]), int(raw["width"]), kind, raw.get("rule"), covers)
            )
        tables = {
            name: ObservationTable(name, tuple(bytes.fromhex(h) for h in obs))
            for name, obs in doc["tables"].items()
        }
        return Profile(
            schema=tuple(schema),
            tables=tables,
            delay_corpus=DelayCorpus(tuple(float(d) for d in doc["delays"])),
            key=bytes.fromhex(doc["key"]),
            datagram_len=datagram_len,
            udp_port=int(doc.get("udp_port", DEFAULT_UDP_PORT)),
        )
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ProfileFormatError(f"malformed profile: {exc}") from None
    except SchemaError as exc:
        raise ProfileFormatError(f"invalid schema: {exc}") from None
