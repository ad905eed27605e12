"""Virtual-time harness for a pair of tunnel endpoints.

Runs two :class:`~mimictun.tunnel.Endpoint` objects against each other
through simulated lossy links, jumping the clock from event to event, so
hours of paced traffic take seconds and every run is reproducible.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import SessionFailure
from .tunnel import Endpoint


@dataclass
class Link:
    """One direction of the simulated network: fixed latency, independent drops."""

    drop_rate: float = 0.0
    latency: float = 0.002
    seed: int | None = None
    dropped: int = 0
    carried: int = 0

    def __post_init__(self):
        self._rng = np.random.default_rng(self.seed)

    def passes(self) -> bool:
        if self.drop_rate and self._rng.random() < self.drop_rate:
            self.dropped += 1
            return False
        self.carried += 1
        return True


@dataclass
class SimResult:
    delivered: tuple[bytes, bytes]
    end_time: float
    failure: str | None = None
    wire: list = field(default_factory=list)


def simulate(
    a: Endpoint,
    b: Endpoint,
    *,
    until: float,
    ab: Link | None = None,
    ba: Link | None = None,
    stop_when: Callable[[SimResult], bool] | None = None,
    keep_wire: bool = False,
    on_deliver: Callable[[int, bytes, float], None] | None = None,
) -> SimResult:
    """Run both endpoints until virtual time ``until`` (or ``stop_when`` holds).

    ``a`` sends over ``ab`` and ``b`` over ``ba``.  With ``keep_wire`` every
    datagram put on either link is kept as ``(time, sender, bytes)``.
    """
    eps = (a, b)
    links = (ab or Link(), ba or Link())
    delivered = [bytearray(), bytearray()]
    result = SimResult((b"", b""), 0.0)
    heap: list = []
    order = 0

    def push(t, kind, who, data=None):
        nonlocal order
        heapq.heappush(heap, (t, order, kind, who, data))
        order += 1

    push(a.next_fire, "fire", 0)
    push(b.next_fire, "fire", 1)
    now = 0.0
    while heap:
        t, _, kind, who, data = heapq.heappop(heap)
        if t > until:
            break
        now = t
        ep = eps[who]
        if kind == "fire":
            try:
                datagram = ep.fire(t)
            except SessionFailure as exc:
                result.failure = f"endpoint {who}: {exc}"
                break
            push(ep.next_fire, "fire", who)
            if keep_wire:
                result.wire.append((t, who, datagram))
            if links[who].passes():
                push(t + links[who].latency, "recv", 1 - who, datagram)
        else:
            for payload in ep.receive(data, t):
                delivered[who] += payload
                if on_deliver is not None:
                    on_deliver(who, payload, t)
        result.delivered = (bytes(delivered[0]), bytes(delivered[1]))
        if stop_when is not None and stop_when(result):
            break
    result.delivered = (bytes(delivered[0]), bytes(delivered[1]))
    result.end_time = now
    return result


def transfer_done(a: Endpoint, expected_at_b: int) -> Callable[[SimResult], bool]:
    """Stop condition: ``b`` holds ``expected_at_b`` bytes and ``a`` saw the final ack."""
    def check(res: SimResult) -> bool:
        return len(res.delivered[1]) >= expected_at_b and a.sender.idle
    return check
