"""Covert channel endpoints.

The protocol logic lives in :class:`Endpoint`, which performs no I/O: the
caller feeds it received datagrams and asks it for the next datagram each
time the pacing clock fires.  :mod:`mimictun.sim` drives endpoints in
virtual time; :func:`run_client` / :func:`run_server` drive them on real
UDP and TCP sockets with asyncio.

Every datagram leaves on the timing model's schedule.  At each firing the
pacer sends, in priority order, a due retransmission, the next unsent data
frame, a pending acknowledgment, or chaff; an acknowledgment that has
waited half a retransmission timeout is promoted to the front so that two
busy peers cannot starve each other.  Messages are sent one at a time
per direction; the next starts once the peer acknowledges the whole
message.

Acknowledgment frame body (tag 0xFE)::

    [0]      flags, bit 0 = message complete
    [1:5]    message digest (first 4 bytes of SHA-256 over the frame bodies),
             zero unless complete
    [5:9]    CRC-32 of flags || digest || bitmap
    [9:9+k]  bitmap of received sequence numbers, seq i = bit 7-(i%8) of byte i//8
    rest     random
"""
from __future__ import annotations

import asyncio
import hashlib
import logging
import secrets
import zlib
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import framing
from .errors import (
    CapacityError,
    CorruptMessage,
    NotEncodable,
    NotHostProtocol,
    SessionFailure,
)
from .fte_codec import decode_bytes, encode_bytes, validate_syntax
from .framing import ACK_TAG, CHAFF_TAG, Frame
from .profile import Profile
from .timing import TimingModel, _step

log = logging.getLogger(__name__)

ACK_HEADER = 9
MIN_RTO = 0.2
RTO_FACTOR = 4
MAX_RETRIES = 10
PEER_TIMEOUT = 30.0
ACK_MAX_AGE = 0.5  # fraction of the RTO an ack may wait before it jumps the queue


def ack_capacity(chunk_bytes: int) -> int:
    """Sequence numbers an ack bitmap can describe at this frame size."""
    return min(framing.MAX_FRAMES, 8 * (chunk_bytes - 1 - ACK_HEADER))


def message_digest(bodies) -> bytes:
    h = hashlib.sha256()
    for b in bodies:
        h.update(b)
    return h.digest()[:4]


@dataclass(frozen=True)
class Ack:
    received: frozenset[int]
    done: bool = False
    digest: bytes = bytes(4)


def pack_ack(ack: Ack, chunk_bytes: int, randbytes=secrets.token_bytes) -> Frame:
    cap = ack_capacity(chunk_bytes)
    bitmap = bytearray((cap + 7) // 8)
    for s in ack.received:
        if s >= cap:
            raise ValueError(f"seq {s} outside ack bitmap")
        bitmap[s // 8] |= 0x80 >> (s % 8)
    head = bytes([1 if ack.done else 0]) + ack.digest
    crc = zlib.crc32(head + bitmap).to_bytes(4, "big")
    body = head + crc + bytes(bitmap)
    return Frame(ACK_TAG, body + randbytes(chunk_bytes - 1 - len(body)))


def unpack_ack(frame: Frame, chunk_bytes: int) -> Ack | None:
    """Parse an ack frame; None when the checksum does not match."""
    cap = ack_capacity(chunk_bytes)
    body = frame.body
    head, crc, bitmap = body[:5], body[5:9], body[9:9 + (cap + 7) // 8]
    if zlib.crc32(head + bitmap).to_bytes(4, "big") != crc or head[0] > 1:
        return None
    received = frozenset(s for s in range(cap) if bitmap[s // 8] & (0x80 >> (s % 8)))
    return Ack(received, bool(head[0]), bytes(head[1:5]))


@dataclass
class SendCounters:
    firings: int = 0
    data_frames: int = 0
    chaff_frames: int = 0
    ack_frames: int = 0
    retransmissions: int = 0
    overruns: int = 0
    dropped_by_link: int = 0
    messages_completed: int = 0
    bytes_completed: int = 0


@dataclass
class RecvCounters:
    datagrams: int = 0
    foreign: int = 0
    garbage: int = 0
    chaff: int = 0
    acks: int = 0
    data_frames: int = 0
    duplicates: int = 0
    corrupt: int = 0
    messages_delivered: int = 0
    bytes_delivered: int = 0


@dataclass
class OutMessage:
    payload: bytes
    frames: list[Frame]
    digest: bytes
    unsent: deque = field(default_factory=deque)
    sent_at: dict = field(default_factory=dict)
    retries: dict = field(default_factory=dict)
    acked: set = field(default_factory=set)


class Sender:
    """Outgoing half of a session.  Owned by the pacing loop."""

    def __init__(self, chunk_bytes: int, rto: float, max_retries: int = MAX_RETRIES,
                 peer_timeout: float = PEER_TIMEOUT, randbytes=secrets.token_bytes):
        self.chunk_bytes = chunk_bytes
        self.rto = rto
        self.max_retries = max_retries
        self.peer_timeout = peer_timeout
        self.randbytes = randbytes
        self.max_payload = ack_capacity(chunk_bytes) * (chunk_bytes - 1) - framing.LENGTH_BYTES
        self.backlog: deque[bytes] = deque()
        self.backlog_bytes = 0
        self.current: OutMessage | None = None
        self._last_payload: bytes | None = None
        self.pending_ack: Frame | None = None
        self.ack_since: float | None = None
        self.first_data_at: float | None = None
        self.last_complete_at: float | None = None
        self.last_progress_at: float | None = None
        self.counters = SendCounters()

    def offer(self, data: bytes) -> None:
        """Queue stream bytes, split into messages that fit one sequence space."""
        for i in range(0, len(data), self.max_payload):
            chunk = data[i:i + self.max_payload]
            self.backlog.append(chunk)
            self.backlog_bytes += len(chunk)

    @property
    def idle(self) -> bool:
        return self.current is None and not self.backlog

    def _start_next(self) -> None:
        payload = self.backlog.popleft()
        self.backlog_bytes -= len(payload)
        body_len = self.chunk_bytes - 1
        if (
            payload == self._last_payload
            and (framing.LENGTH_BYTES + len(payload)) % body_len == 0
            and len(payload) > 1
        ):
            # a pad-free repeat would be indistinguishable from a retransmission
            self.backlog.appendleft(payload[-1:])
            self.backlog_bytes += 1
            payload = payload[:-1]
        frames = framing.segment(payload, self.chunk_bytes, self.randbytes)
        self.current = OutMessage(payload, frames, message_digest(f.body for f in frames),
                                  deque(range(len(frames))))
        self._last_payload = payload

    def queue_ack(self, frame: Frame, now: float) -> None:
        """Replace the pending ack; a newer ack keeps the age of the one it replaces."""
        if self.pending_ack is None:
            self.ack_since = now
        self.pending_ack = frame

    def _take_ack(self) -> Frame:
        frame, self.pending_ack, self.ack_since = self.pending_ack, None, None
        self.counters.ack_frames += 1
        return frame

    def on_ack(self, ack: Ack, now: float) -> None:
        msg = self.current
        if msg is None:
            return
        if ack.done:
            if ack.digest != msg.digest or len(ack.received) < len(msg.frames):
                return  # stale completion of the previous message
            self.counters.messages_completed += 1
            self.counters.bytes_completed += len(msg.payload)
            self.last_complete_at = now
            self.last_progress_at = now
            self.current = None
            return
        fresh = {s for s in ack.received if s < len(msg.frames)} - msg.acked
        if fresh:
            msg.acked |= fresh
            self.last_progress_at = now

    def arq_tick(self, now: float) -> set[int]:
        """Sequence numbers whose last transmission is at least one RTO old and still unacked."""
        msg = self.current
        if msg is None:
            return set()
        return {s for s, t in msg.sent_at.items() if s not in msg.acked and now - t >= self.rto}

    def check_health(self, now: float) -> None:
        msg = self.current
        if msg is None or self.last_progress_at is None:
            return
        if now - self.last_progress_at >= self.peer_timeout:
            raise SessionFailure(f"no acknowledgment from peer for {now - self.last_progress_at:.1f} s")

    def next_frame(self, now: float) -> Frame:
        """Pick what to send at this firing: retransmit > data > ack > chaff.

        An ack that has waited half an RTO goes first, otherwise two busy
        peers would starve each other's acks and retransmit forever.
        """
        if self.pending_ack is not None and now - self.ack_since >= ACK_MAX_AGE * self.rto:
            return self._take_ack()
        if self.current is None and self.backlog:
            self._start_next()
        msg = self.current
        if msg is not None:
            due = self.arq_tick(now)
            if due:
                s = min(due, key=lambda k: (msg.sent_at[k], k))
                n = msg.retries.get(s, 0)
                if n >= self.max_retries:
                    raise SessionFailure(f"frame {s} retransmitted {n} times without acknowledgment")
                msg.retries[s] = n + 1
                msg.sent_at[s] = now
                self.counters.retransmissions += 1
                self.counters.data_frames += 1
                return msg.frames[s]
            if msg.unsent:
                s = msg.unsent.popleft()
                msg.sent_at[s] = now
                if self.first_data_at is None:
                    self.first_data_at = now
                if self.last_progress_at is None or s == 0:
                    self.last_progress_at = now
                self.counters.data_frames += 1
                return msg.frames[s]
        if self.pending_ack is not None:
            return self._take_ack()
        self.counters.chaff_frames += 1
        return Frame(CHAFF_TAG, self.randbytes(self.chunk_bytes - 1))


class Receiver:
    """Incoming half of a session.  Owned by the receive loop."""

    def __init__(self, chunk_bytes: int, randbytes=secrets.token_bytes):
        self.chunk_bytes = chunk_bytes
        self.randbytes = randbytes
        self.capacity = ack_capacity(chunk_bytes)
        self.frames: dict[int, bytes] = {}
        self.expected: int | None = None
        self.last: dict[int, bytes] | None = None
        self.last_digest = bytes(4)
        self.counters = RecvCounters()

    def _ack(self, done=False) -> Frame:
        if done:
            return pack_ack(Ack(frozenset(self.last), True, self.last_digest), self.chunk_bytes, self.randbytes)
        return pack_ack(Ack(frozenset(self.frames)), self.chunk_bytes, self.randbytes)

    def on_data(self, frame: Frame) -> tuple[Frame | None, bytes | None]:
        """Store one data frame.  Returns (ack to send, completed payload)."""
        c = self.counters
        c.data_frames += 1
        seq, body = frame.seq, frame.body
        if seq >= self.capacity:
            c.garbage += 1
            return None, None
        if not self.frames and self.last is not None and self.last.get(seq) == body:
            c.duplicates += 1
            return self._ack(done=True), None
        if seq in self.frames:
            if self.frames[seq] != body:
                c.corrupt += 1
                return None, None
            c.duplicates += 1
            return self._ack(), None
        if seq == 0:
            length = framing.declared_length(frame)
            need = framing.frames_needed(length, self.chunk_bytes)
            if length == 0 or need > self.capacity:
                c.garbage += 1
                return None, None
            stale = [s for s in self.frames if s >= need]
            for s in stale:
                del self.frames[s]
            c.corrupt += len(stale)
            self.expected = need
        elif self.expected is not None and seq >= self.expected:
            c.corrupt += 1
            return None, None
        self.frames[seq] = body
        if self.expected is not None and len(self.frames) == self.expected:
            try:
                payload = framing.reassemble(
                    (Frame(s, b) for s, b in self.frames.items()), self.chunk_bytes)
            except CorruptMessage:
                c.corrupt += 1
                self.frames.clear()
                self.expected = None
                return None, None
            self.last = self.frames
            self.last_digest = message_digest(self.frames[s] for s in range(self.expected))
            self.frames = {}
            self.expected = None
            c.messages_delivered += 1
            c.bytes_delivered += len(payload)
            return self._ack(done=True), payload
        return self._ack(), None


class Pacer:
    """Firing schedule drawn from the timing model.

    Each firing draws the next (delay, state) pair; the next firing is
    ``intended + delay`` so late sends never accumulate drift.
    """

    def __init__(self, model: TimingModel, rng: np.random.Generator, start: float = 0.0):
        self.model = model
        self.rng = rng
        self.state = model.state_index(model.initial_state(rng))
        self.next_fire = start

    def advance(self) -> float:
        us, up = self.rng.random(2)
        delay, self.state = _step(self.model, self.state, us, up)
        fired = self.next_fire
        self.next_fire = fired + delay
        return delay


class Endpoint:
    """One side of the covert channel, free of I/O.

    ``fire(now)`` returns the datagram to send at the current firing;
    ``receive(datagram, now)`` returns payloads completed by that datagram.
    The receive side talks to the pacing side only through ``control``.
    """

    def __init__(
        self,
        profile: Profile,
        model: TimingModel,
        *,
        seed=None,
        start: float = 0.0,
        chunk_bytes: int | None = None,
        rto: float | None = None,
        max_retries: int = MAX_RETRIES,
        peer_timeout: float = PEER_TIMEOUT,
        record: bool = False,
        randbytes: Callable[[int], bytes] = secrets.token_bytes,
    ):
        self.profile = profile
        self.model = model
        self.chunk_bytes = chunk_bytes or framing.chunk_size_for(profile)
        if 8 * self.chunk_bytes > profile.usable_bits:
            raise CapacityError(f"{self.chunk_bytes}-byte frames exceed the datagram capacity")
        self.rto = rto if rto is not None else max(RTO_FACTOR * model.mean_delay, MIN_RTO)
        self.sender = Sender(self.chunk_bytes, self.rto, max_retries, peer_timeout, randbytes)
        self.receiver = Receiver(self.chunk_bytes, randbytes)
        self.pacer = Pacer(model, np.random.default_rng(seed), start)
        self.control: deque = deque()
        self.send_log: list[float] | None = [] if record else None
        self.failure: str | None = None

    # -- pacing side -------------------------------------------------------
    @property
    def next_fire(self) -> float:
        return self.pacer.next_fire

    def submit(self, data: bytes) -> None:
        if data:
            self.sender.offer(data)

    def _drain_control(self, now: float) -> None:
        while self.control:
            kind, item = self.control.popleft()
            if kind == "ack-out":
                self.sender.queue_ack(item, now)
            elif kind == "ack-in":
                self.sender.on_ack(item, now)

    def fire(self, now: float) -> bytes:
        """Build the datagram for this firing and schedule the next one."""
        self._drain_control(now)
        try:
            self.sender.check_health(now)
            frame = self.sender.next_frame(now)
        except SessionFailure as exc:
            self.failure = str(exc)
            raise
        datagram = encode_bytes(self.profile, framing.encrypt_frame(frame, self.profile.key))
        self.sender.counters.firings += 1
        if self.send_log is not None:
            self.send_log.append(now)
        self.pacer.advance()
        return datagram

    def note_overrun(self) -> None:
        self.sender.counters.overruns += 1

    # -- receive side ------------------------------------------------------
    def receive(self, datagram: bytes, now: float = 0.0) -> list[bytes]:
        c = self.receiver.counters
        c.datagrams += 1
        if not validate_syntax(self.profile, datagram):
            c.foreign += 1
            return []
        try:
            cipher = decode_bytes(self.profile, datagram, self.chunk_bytes)
        except (NotHostProtocol, NotEncodable):
            c.foreign += 1
            return []
        frame = framing.decrypt_frame(cipher, self.profile.key)
        kind = frame.kind
        if kind == "chaff":
            c.chaff += 1
            return []
        if kind == "ack":
            ack = unpack_ack(frame, self.chunk_bytes)
            if ack is None:
                c.garbage += 1
                return []
            c.acks += 1
            self.control.append(("ack-in", ack))
            return []
        if kind == "reserved":
            c.garbage += 1
            return []
        ack_frame, payload = self.receiver.on_data(frame)
        if ack_frame is not None:
            self.control.append(("ack-out", ack_frame))
        return [payload] if payload is not None else []

    # -- reporting ---------------------------------------------------------
    def goodput(self) -> float:
        return measure_goodput(self)

    def status(self) -> dict:
        return {
            "send": asdict(self.sender.counters),
            "recv": asdict(self.receiver.counters),
            "chunk_bytes": self.chunk_bytes,
            "rto": self.rto,
            "goodput_bps": self.goodput(),
            "failure": self.failure,
        }


def measure_goodput(endpoint: Endpoint) -> float:
    """Payload bits acknowledged per second, first data frame to last completion.

    Zero until a message has completed.
    """
    s = endpoint.sender
    if not s.counters.messages_completed or s.first_data_at is None:
        return 0.0
    elapsed = s.last_complete_at - s.first_data_at
    if elapsed <= 0:
        return 0.0
    return 8 * s.counters.bytes_completed / elapsed


def format_status(status: dict) -> str:
    lines = [f"goodput_bps {status['goodput_bps']:.1f}", f"chunk_bytes {status['chunk_bytes']}"]
    for side in ("send", "recv"):
        for k, v in status[side].items():
            lines.append(f"{side}.{k} {v}")
    if status.get("failure"):
        lines.append(f"failure {status['failure']}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# asyncio runtime
# --------------------------------------------------------------------------

@dataclass
class ChannelConfig:
    profile: Profile
    model: TimingModel
    role: str
    peer: tuple[str, int] | None
    udp_bind: tuple[str, int] = ("0.0.0.0", 0)
    local_port: int | None = None
    listen_host: str = "127.0.0.1"
    target: tuple[str, int] | None = None
    seed: int | None = None
    rto: float | None = None
    max_retries: int = MAX_RETRIES
    peer_timeout: float = PEER_TIMEOUT
    drop_rate: float = 0.0
    drop_seed: int | None = None
    read_size: int = 4096
    max_backlog: int = 1 << 20
    record: bool = False

    def __post_init__(self):
        if self.role not in ("client", "server"):
            raise ValueError(f"role must be client or server, not {self.role!r}")
        if self.role == "client" and self.local_port is None:
            raise ValueError("client needs a local TCP port")
        if self.role == "server" and self.target is None:
            raise ValueError("server needs a target address")
        if not 0 <= self.drop_rate < 1:
            raise ValueError("drop_rate must be in [0, 1)")


class _Datagrams(asyncio.DatagramProtocol):
    def __init__(self, tunnel: "Tunnel"):
        self.tunnel = tunnel

    def datagram_received(self, data, addr):
        self.tunnel._on_datagram(data, addr)

    def error_received(self, exc):
        log.debug("udp error: %s", exc)


class Tunnel:
    """Runs one :class:`Endpoint` on real sockets.

    Use ``await tunnel.start()``, then ``await tunnel.wait()`` (returns on
    ``stop()`` or session failure).
    """

    def __init__(self, config: ChannelConfig):
        self.config = config
        self.loop: asyncio.AbstractEventLoop | None = None
        self.endpoint: Endpoint | None = None
        self.peer = config.peer
        self.udp: asyncio.DatagramTransport | None = None
        self.tcp_server: asyncio.base_events.Server | None = None
        self.writer: asyncio.StreamWriter | None = None
        self._pending_out: list[bytes] = []
        self._connecting = False
        self._tasks: list[asyncio.Task] = []
        self._stopped = asyncio.Event()
        self._drop_rng = np.random.default_rng(config.drop_seed)
        self.error: str | None = None

    @property
    def local_address(self):
        return self.udp.get_extra_info("sockname") if self.udp else None

    @property
    def tcp_address(self):
        if self.tcp_server is None:
            return None
        return self.tcp_server.sockets[0].getsockname()

    async def start(self) -> None:
        cfg = self.config
        self.loop = asyncio.get_running_loop()
        self.endpoint = Endpoint(
            cfg.profile, cfg.model, seed=cfg.seed, start=self.loop.time(), rto=cfg.rto,
            max_retries=cfg.max_retries, peer_timeout=cfg.peer_timeout, record=cfg.record,
        )
        self.udp, _ = await self.loop.create_datagram_endpoint(
            lambda: _Datagrams(self), local_addr=cfg.udp_bind)
        if cfg.role == "client":
            try:
                self.tcp_server = await asyncio.start_server(self._on_local, cfg.listen_host, cfg.local_port)
            except OSError:
                self.udp.close()
                raise
        self._tasks.append(asyncio.create_task(self._pace()))

    async def wait(self) -> None:
        await self._stopped.wait()

    def stop(self, reason: str | None = None) -> None:
        if reason and self.error is None:
            self.error = reason
        for t in self._tasks:
            if t is not asyncio.current_task():
                t.cancel()
        if self.udp is not None:
            self.udp.close()
        if self.tcp_server is not None:
            self.tcp_server.close()
        if self.writer is not None:
            self.writer.close()
        self._stopped.set()

    def status(self) -> dict:
        st = self.endpoint.status()
        st["failure"] = st["failure"] or self.error
        return st

    # pacing loop: the only place datagrams are sent
    async def _pace(self) -> None:
        ep = self.endpoint
        loop = self.loop
        try:
            while True:
                intended = ep.next_fire
                delay = intended - loop.time()
                if delay > 0:
                    await asyncio.sleep(delay)
                datagram = ep.fire(intended)
                if self.peer is not None:
                    if self.config.drop_rate and self._drop_rng.random() < self.config.drop_rate:
                        ep.sender.counters.dropped_by_link += 1
                    else:
                        self.udp.sendto(datagram, self.peer)
                if loop.time() > ep.next_fire:
                    ep.note_overrun()
        except SessionFailure as exc:
            log.warning("session failure: %s", exc)
            self.stop(str(exc))
        except asyncio.CancelledError:
            pass

    # receive loop: socket reads and reassembly
    def _on_datagram(self, data: bytes, addr) -> None:
        ep = self.endpoint
        before = ep.receiver.counters.foreign
        delivered = ep.receive(data, self.loop.time())
        if self.peer is None and ep.receiver.counters.foreign == before:
            self.peer = addr[:2]
        for payload in delivered:
            self._deliver(payload)

    def _deliver(self, payload: bytes) -> None:
        if self.writer is not None and not self.writer.is_closing():
            self.writer.write(payload)
            return
        self._pending_out.append(payload)
        if self.config.role == "server" and not self._connecting:
            self._connecting = True
            self._tasks.append(asyncio.create_task(self._connect_target()))

    async def _connect_target(self) -> None:
        host, port = self.config.target
        try:
            reader, writer = await asyncio.open_connection(host, port)
        except OSError as exc:
            self.stop(f"target {host}:{port} unreachable: {exc}")
            return
        self._attach(reader, writer)
        await self._read_local(reader)

    async def _on_local(self, reader, writer) -> None:
        if self.writer is not None:
            writer.close()  # one session per endpoint pair
            return
        self._attach(reader, writer)
        await self._read_local(reader)

    def _attach(self, reader, writer) -> None:
        self.writer = writer
        for payload in self._pending_out:
            writer.write(payload)
        self._pending_out.clear()

    async def _read_local(self, reader) -> None:
        ep = self.endpoint
        try:
            while not self._stopped.is_set():
                while ep.sender.backlog_bytes > self.config.max_backlog:
                    await asyncio.sleep(self.config.model.mean_delay)
                data = await reader.read(self.config.read_size)
                if not data:
                    return
                ep.submit(data)
        except (ConnectionError, asyncio.CancelledError):
            return


async def run_client(config: ChannelConfig, stop: asyncio.Event | None = None) -> dict:
    """Run a client endpoint until ``stop`` is set or the session fails; return its status."""
    return await _run(config, stop)


async def run_server(config: ChannelConfig, stop: asyncio.Event | None = None) -> dict:
    """Run a server endpoint until ``stop`` is set or the session fails; return its status."""
    return await _run(config, stop)


async def _run(config, stop):
    tunnel = Tunnel(config)
    await tunnel.start()
    waiters = [asyncio.create_task(tunnel.wait())]
    if stop is not None:
        waiters.append(asyncio.create_task(stop.wait()))
    try:
        await asyncio.wait(waiters, return_when=asyncio.FIRST_COMPLETED)
    finally:
        for w in waiters:
            w.cancel()
        tunnel.stop()
    return tunnel.status()
