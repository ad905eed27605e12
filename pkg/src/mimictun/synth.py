"""Synthetic host-protocol fixtures.

Real PMU captures are not redistributable, so tests and demos use a
Synchrophasor-like stand-in: a 30 frame/s stream whose interpacket delays
fall in three modes around 33.34 ms, and a C37.118-shaped datagram layout
(constant header, measurement fields, trailing CRC).
"""
from __future__ import annotations

import numpy as np

from .profile import (
    CHECKSUM_RULES,
    CaptureRecord,
    DelayCorpus,
    FieldKind,
    ObservationTable,
    Profile,
    build_schema,
)
from .fte_codec import encode_int
from .timing import BinMap, TimingModel

# early / nominal / late frame; mean of the stationary chain is 33.34 ms
SYNCHRO_MODES = (0.02900, 0.03334, 0.03768)
SYNCHRO_ROWS = (
    (0.1, 0.3, 0.6),
    (0.2, 0.6, 0.2),
    (0.6, 0.3, 0.1),
)
SYNCHRO_SD = 0.0005


def markov_delays(n, rows, modes, sd, rng) -> np.ndarray:
    """Delays from a Markov chain over ``modes`` with Gaussian jitter, clipped at 0."""
    rng = np.random.default_rng(rng)
    rows = np.asarray(rows, dtype=float)
    cum = np.cumsum(rows, axis=1)
    u = rng.random(n)
    states = np.empty(n, dtype=np.int64)
    s = int(rng.integers(len(modes)))
    for k in range(n):
        s = min(int(np.searchsorted(cum[s], u[k], side="right")), len(modes) - 1)
        states[k] = s
    d = np.asarray(modes)[states] + rng.normal(0.0, sd, n)
    return np.clip(d, 0.0, None)


def synchro_delays(n: int = 20_000, seed=0) -> np.ndarray:
    return markov_delays(n, SYNCHRO_ROWS, SYNCHRO_MODES, SYNCHRO_SD, seed)


# (name, width, kind, observation count) -- counts chosen so usable = theoretical = 516 bits
_SYNCHRO_FIELDS = (
    [("sync", 2, "constant", 1), ("framesize", 2, "constant", 1), ("idcode", 2, "constant", 1),
     ("soc", 4, "encoded", 2**8), ("fracsec", 4, "encoded", 2**10), ("stat", 2, "encoded", 2**2)]
    + [(f"phasor{i}_{part}", 4, "encoded", 2**12) for i in range(8) for part in ("mag", "ang")]
    + [("freq", 4, "encoded", 2**10), ("dfreq", 4, "encoded", 2**8)]
    + [(f"analog{i}", 4, "encoded", 2**11) for i in range(26)]
)

# small variant for capture-driven demos: 256 usable bits, every value seen in a few thousand frames
_SMALL_FIELDS = (
    [("sync", 2, "constant", 1), ("framesize", 2, "constant", 1), ("idcode", 2, "constant", 1),
     ("soc", 4, "encoded", 8), ("fracsec", 4, "encoded", 30), ("stat", 2, "encoded", 4)]
    + [(f"phasor{i}", 4, "encoded", 64) for i in range(40)]
    + [("freq", 4, "encoded", 16), ("dfreq", 4, "encoded", 8)]
)


def synchro_schema(small: bool = False):
    layout = _SMALL_FIELDS if small else _SYNCHRO_FIELDS
    fields = [{"name": n, "width": w, "kind": k} for n, w, k, _ in layout]
    fields.append({"name": "chk", "width": 2, "kind": "computed"})
    return build_schema(fields)


def _distinct_values(count, width, rng):
    seen = {}
    while len(seen) < count:
        for v in rng.integers(0, 256, size=(count, width), dtype=np.uint8):
            seen.setdefault(bytes(v), None)
            if len(seen) == count:
                break
    return tuple(seen)


def synchro_profile(seed=0, small: bool = False, delays=None, key: bytes | None = None,
                    udp_port: int = 4713) -> Profile:
    """A Synchrophasor-shaped profile with random observation tables.

    The full variant carries exactly 516 bits per datagram.
    """
    rng = np.random.default_rng(seed)
    layout = _SMALL_FIELDS if small else _SYNCHRO_FIELDS
    schema = synchro_schema(small)
    constants = {"sync": b"\xaa\x01", "framesize": None, "idcode": b"\x00\x07"}
    tables = {}
    for name, width, kind, count in layout:
        if kind == "constant":
            value = constants.get(name)
            if value is None:
                value = (sum(w for _, w, _, _ in layout) + 2).to_bytes(width, "big")
            tables[name] = ObservationTable(name, (value,))
        else:
            tables[name] = ObservationTable(name, _distinct_values(count, width, rng))
    if delays is None:
        delays = synchro_delays(20_000, rng)
    return Profile(
        schema=schema,
        tables=tables,
        delay_corpus=DelayCorpus(tuple(float(x) for x in delays)),
        key=bytes(rng.integers(0, 256, 16, dtype=np.uint8)) if key is None else key,
        datagram_len=schema[-1].end,
        udp_port=udp_port,
    )


def synthetic_capture(profile: Profile, n: int, seed=0, delays=None, start: float = 0.0) -> list[CaptureRecord]:
    """Genuine-looking traffic: every field value drawn uniformly from its full table."""
    rng = np.random.default_rng(seed)
    if delays is None:
        delays = synchro_delays(n - 1, rng)
    times = start + np.concatenate(([0.0], np.cumsum(np.asarray(delays, dtype=float)[: n - 1])))
    records = []
    for t in times:
        payload = bytearray(encode_int(profile, 0, 0, pad=lambda k: 0))
        for f in profile.schema:
            if f.kind is FieldKind.ENCODED:
                obs = profile.tables[f.name].observations
                payload[f.span] = obs[int(rng.integers(len(obs)))]
        payload = _fix_checksums(profile, bytes(payload))
        records.append(CaptureRecord(float(t), payload))
    return records


def _fix_checksums(profile: Profile, payload: bytes) -> bytes:
    out = bytearray(payload)
    for f in profile.schema:
        if f.kind is FieldKind.COMPUTED:
            _, rule = CHECKSUM_RULES[f.rule]
            out[f.span] = rule(bytes(out[f.covers[0]:f.covers[1]]))
    return bytes(out)


def model_from_rows(rows, pools, labels=None, scale: int = 1000) -> TimingModel:
    """Timing model with prescribed transition rows (scaled to integer counts).

    ``pools`` gives the delays of each state; pools must not overlap so
    that boundaries can sit between them.
    """
    k = len(rows)
    labels = tuple(labels or "abcdefghijklmnopqrstuvwxyz"[:k])
    counts = tuple(tuple(int(round(p * scale)) for p in row) for row in rows)
    pools = tuple(tuple(sorted(float(x) for x in p)) for p in pools)
    peaks = tuple(float(np.median(p)) for p in pools)
    bounds = tuple((pools[i][-1] + pools[i + 1][0]) / 2 for i in range(k - 1))
    return TimingModel(BinMap(peaks, bounds, labels), counts, pools)
