"""Observation-based format-transforming encoding.

Bits are turned into a host datagram by using them, field by field, as an
index into that field's observation table.  A field with ``n`` observations
carries ``floor(log2(n))`` bits; the index is read big-endian and fields
are consumed in schema order.  Bits left over after the data run out are
filled with random padding so every field stays uniformly distributed.

Bit strings are passed either as ``str`` of ``'0'``/``'1'`` characters or
as ``bytes`` (8 bits per byte, most significant first).
"""
from __future__ import annotations

import secrets
from typing import Callable

from .errors import CapacityError, NotEncodable, NotHostProtocol
from .profile import CHECKSUM_RULES, FieldKind, Profile

PadSource = Callable[[int], int]


def _as_int(data: str | bytes) -> tuple[int, int]:
    if isinstance(data, str):
        if data and set(data) - {"0", "1"}:
            raise ValueError("bit strings may only contain '0' and '1'")
        return (int(data, 2) if data else 0), len(data)
    data = bytes(data)
    return int.from_bytes(data, "big"), 8 * len(data)


def encode_int(profile: Profile, value: int, nbits: int, pad: PadSource | None = None) -> bytes:
    """Encode the ``nbits``-bit integer ``value`` into one datagram payload."""
    usable = profile.usable_bits
    if nbits > usable:
        raise CapacityError(f"{nbits} bits offered, datagram carries {usable}")
    if nbits < 0 or value >> nbits:
        raise ValueError("value does not fit in nbits")
    spare = usable - nbits
    word = value << spare
    if spare:
        word |= (pad or secrets.randbits)(spare) & ((1 << spare) - 1)

    out = bytearray(profile.datagram_len)
    remaining = usable
    computed = []
    for f in profile.schema:
        if f.kind is FieldKind.COMPUTED:
            computed.append(f)
            continue
        table = profile.tables[f.name]
        b = table.bits if f.kind is FieldKind.ENCODED else 0
        if b:
            remaining -= b
            idx = (word >> remaining) & ((1 << b) - 1)
        else:
            idx = 0
        out[f.offset:f.end] = table.observations[idx]
    for f in computed:
        _, rule = CHECKSUM_RULES[f.rule]
        out[f.offset:f.end] = rule(bytes(out[f.covers[0]:f.covers[1]]))
    return bytes(out)


def encode(profile: Profile, data: str | bytes, *, pad: PadSource | None = None) -> bytes:
    """Encode a bit string (at most ``usable_bits`` long) as a host payload.

    ``pad(k)`` must return a ``k``-bit integer; it defaults to
    :func:`secrets.randbits`.
    """
    value, nbits = _as_int(data)
    return encode_int(profile, value, nbits, pad)


def decode_int(profile: Profile, payload: bytes) -> int:
    """Recover the ``usable_bits``-bit integer carried by ``payload``."""
    if len(payload) != profile.datagram_len:
        raise NotHostProtocol(f"payload is {len(payload)} bytes, host datagrams are {profile.datagram_len}")
    word = 0
    for f in profile.encoded_fields:
        table = profile.tables[f.name]
        b = table.bits
        if not b:
            continue
        value = payload[f.offset:f.end]
        idx = table.index.get(value)
        if idx is None:
            raise NotHostProtocol(f"field {f.name!r}: value {value.hex()} never observed")
        if idx >> b:
            raise NotEncodable(f"field {f.name!r}: observation {idx} is outside the {b}-bit code range")
        word = (word << b) | idx
    return word


def decode(profile: Profile, payload: bytes) -> str:
    """Bit string of length ``usable_bits``; data sits at the front, padding after."""
    usable = profile.usable_bits
    if not usable:
        decode_int(profile, payload)
        return ""
    return format(decode_int(profile, payload), f"0{usable}b")


def encode_bytes(profile: Profile, data: bytes, pad: PadSource | None = None) -> bytes:
    return encode_int(profile, int.from_bytes(data, "big"), 8 * len(data), pad)


def decode_bytes(profile: Profile, payload: bytes, nbytes: int) -> bytes:
    """Inverse of :func:`encode_bytes` for an ``nbytes``-long message."""
    spare = profile.usable_bits - 8 * nbytes
    if spare < 0:
        raise CapacityError(f"{nbytes} bytes exceed datagram capacity")
    return (decode_int(profile, payload) >> spare).to_bytes(nbytes, "big")


def validate_syntax(profile: Profile, payload: bytes) -> bool:
    """True when ``payload`` could have come from the host protocol.

    Every non-computed field must hold an observed value (constants their
    single value) and every computed field must satisfy its rule.
    """
    if len(payload) != profile.datagram_len:
        return False
    for f in profile.schema:
        value = payload[f.offset:f.end]
        if f.kind is FieldKind.COMPUTED:
            _, rule = CHECKSUM_RULES[f.rule]
            if rule(payload[f.covers[0]:f.covers[1]]) != value:
                return False
        elif value not in profile.tables[f.name].index:
            return False
    return True
