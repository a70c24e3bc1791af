"""Deterministic discrete-event network front-end.

A single-threaded event loop owns an integer-nanosecond clock; links apply
seeded loss, duplication, bounded reordering and delay to frames; the packet
filter splits DATA from ACK traffic; the reconfiguration gate discards DATA
packets of applications whose dispatch tables are being rewritten.  Identical
(seed, submission order) always reproduces identical delivery traces.
"""

from __future__ import annotations

import heapq
import random
from collections import deque
from dataclasses import dataclass, field

from . import wire

NS_PER_SEC = 1_000_000_000


class Simulator:
    """Event loop: schedule callables at absolute or relative simulated times."""

    def __init__(self):
        self.now = 0
        self._heap: list = []
        self._seq = 0

    def schedule_at(self, when: int, fn):
        if when < self.now:
            when = self.now
        heapq.heappush(self._heap, (when, self._seq, fn))
        self._seq += 1

    def schedule(self, delay: int, fn):
        self.schedule_at(self.now + delay, fn)

    @property
    def pending(self) -> int:
        return len(self._heap)

    def run(self, stop=None, max_events: int | None = None) -> int:
        """Dispatch events in time order until the heap drains or ``stop()``.

        Returns the number of events processed; ``max_events`` guards against
        runaway simulations in tests.
        """
        count = 0
        while self._heap:
            if stop is not None and stop():
                break
            when, _, fn = heapq.heappop(self._heap)
            self.now = when
            fn()
            count += 1
            if max_events is not None and count >= max_events:
                raise RuntimeError(f"simulation exceeded {max_events} events")
        return count


@dataclass(frozen=True)
class LinkModel:
    """Per-direction link behavior; ``seed`` pins the entire fate sequence."""

    seed: int = 0
    loss_p: float = 0.0
    dup_p: float = 0.0
    reorder_p: float = 0.0
    reorder_d: int = 8
    delay: int = 2_000
    jitter: int = 0

    def __post_init__(self):
        for name in ("loss_p", "dup_p", "reorder_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be within [0, 1]")


class _Delivery:
    __slots__ = ("frame", "delivered", "index")

    def __init__(self, frame: bytes, index: int):
        self.frame = frame
        self.delivered = False
        self.index = index


class Link:
    """One direction of a point-to-point link feeding a deliver callback.

    Reordering swaps the payloads of two in-flight deliveries, displacing a
    frame by at most ``reorder_d`` positions; duplication schedules a second
    copy.  Counters satisfy delivered + lost == submitted + duplicated once
    the simulator drains.
    """

    def __init__(self, sim: Simulator, model: LinkModel, deliver):
        self.sim = sim
        self.model = model
        self._deliver_fn = deliver
        self._rng = random.Random(model.seed)
        self._sends = 0
        self._window: deque[_Delivery] = deque(maxlen=max(2 * model.reorder_d, 16))
        self.counters = {"submitted": 0, "delivered": 0, "lost": 0, "duplicated": 0, "reordered": 0}

    def send(self, frame: bytes):
        rng = self._rng
        self.counters["submitted"] += 1
        if rng.random() < self.model.loss_p:
            self.counters["lost"] += 1
            return
        copies = 1
        if rng.random() < self.model.dup_p:
            copies = 2
            self.counters["duplicated"] += 1
        for _ in range(copies):
            delivery = _Delivery(frame, self._sends)
            self._sends += 1
            swapped = False
            if rng.random() < self.model.reorder_p:
                in_flight = [
                    d for d in self._window
                    if not d.delivered and delivery.index - d.index <= self.model.reorder_d
                ]
                if in_flight:
                    victim = in_flight[rng.randrange(len(in_flight))]
                    delivery.frame, victim.frame = victim.frame, delivery.frame
                    # each frame is displaced at most once, keeping |shift| <= d
                    self._window.remove(victim)
                    swapped = True
                    self.counters["reordered"] += 1
            if not swapped:
                self._window.append(delivery)
            when = self.sim.now + self.model.delay
            if self.model.jitter:
                when += rng.randrange(self.model.jitter + 1)
            self.sim.schedule_at(when, lambda d=delivery: self._fire(d))

    def _fire(self, delivery: _Delivery):
        delivery.delivered = True
        self.counters["delivered"] += 1
        self._deliver_fn(delivery.frame)


def packet_filter(frame: bytes):
    """Classify a frame: ("data"|"ack", packet) or ("malformed", None)."""
    try:
        pkt = wire.decode_frame(frame)
    except wire.CodecError:
        return "malformed", None
    return ("ack" if pkt.header.pkt_flag == wire.FLAG_ACK else "data"), pkt


@dataclass(frozen=True)
class GateWindow:
    app_id: int
    start: int
    end: int


@dataclass
class ReconfigGate:
    """DATA packets of listed apps are discarded inside their windows."""

    windows: list[GateWindow] = field(default_factory=list)

    def add(self, app_id: int, start: int, end: int):
        self.windows.append(GateWindow(app_id, start, end))

    def is_gated(self, app_id: int, now: int) -> bool:
        return any(w.app_id == app_id and w.start <= now < w.end for w in self.windows)


def apply_gate(gate: ReconfigGate | None, pkt: wire.QnpPacket, now: int) -> bool:
    """True when the gate swallows this packet; ACKs always pass."""
    if gate is None or pkt.header.pkt_flag != wire.FLAG_DATA:
        return False
    return gate.is_gated(pkt.header.app_id, now)
