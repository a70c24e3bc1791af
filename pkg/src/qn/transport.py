"""Request-oriented reliable endpoints.

One Endpoint models a host plus its NIC front-end: outbound requests are
segmented and tracked until a request-level ACK arrives (retransmitting whole
requests on timeout, exponential backoff); inbound DATA packets are dispatched
to an RX queue by the configured dispatcher, staged immediately, and the
request is reassembled and delivered exactly once when its packet bitmap
completes.  An ACK is emitted on completion and the completed id also rides
outbound DATA packets as a piggyback.  Packets of a request whose first
packet was never dispatched are dropped by the dispatcher and recovered by
sender retransmission.  Endpoints are single-threaded event targets: frame
arrivals, ticks and API calls are processed serially.
"""

from __future__ import annotations

from collections import OrderedDict, deque
from dataclasses import dataclass

from . import wire
from .idl import RequestSchema
from .netsim import apply_gate, packet_filter

REQ_ID_SPACE = 1 << 32


class Backpressure(RuntimeError):
    """The unACKed-request table is full; retry after ACKs drain."""


@dataclass
class EndpointConfig:
    rto_initial: int = 200_000_000  # 200 ms simulated
    max_retries: int = 8
    entry_timeout: int = 1_000_000_000  # receiver request-entry expiry, 1 s
    entry_capacity: int = 1024
    max_unacked: int = 1024
    completed_ring: int = 1024


@dataclass
class _Unacked:
    frames: list[bytes]
    retries: int
    rto: int
    deadline: int


@dataclass
class _RequestEntry:
    req_id: int
    app_id: int
    req_type: int
    expected_pkts: int
    total_bytes: int
    staging: list[bytes | None]
    bitmap: int = 0
    deadline: int = 0
    queue: int = 0


class Endpoint:
    """A host endpoint bound to a dispatcher and a frame transmit function.

    ``dispatcher`` must expose dispatch(packet) -> DispatchResult and
    note_reconfig_drop(); ``send_frame`` takes raw frame bytes (a simulated
    link or a UDP socket writer).  ``on_request(queue, request, now)`` and
    ``on_delivery_failure(req_id)`` callbacks are optional.
    """

    def __init__(self, name: str, *, dispatcher, send_frame=None, schemas=(),
                 config: EndpointConfig | None = None, gate=None):
        self.name = name
        self.dispatcher = dispatcher
        self.send_frame = send_frame
        self.gate = gate
        self.config = config or EndpointConfig()
        self.schemas: dict[tuple[int, int], RequestSchema] = {
            (s.app_id, s.req_type): s for s in schemas
        }
        self.on_request = None
        self.on_delivery_failure = None
        # sender side
        self.next_req_id = 1
        self.unacked: dict[int, _Unacked] = {}
        self.last_completed = 0
        # receiver side
        self.entries: dict[int, _RequestEntry] = {}
        self.rx_queues: dict[int, deque] = {}
        self._completed: OrderedDict[int, None] = OrderedDict()
        self.metrics = {
            "sent_requests": 0,
            "data_pkts_sent": 0,
            "acked_requests": 0,
            "retransmissions": 0,
            "delivery_failures": 0,
            "completed_requests": 0,
            "duplicate_deliveries_suppressed": 0,
            "expired_entries": 0,
            "dropped_entry_full": 0,
            "dropped_len_mismatch": 0,
            "dropped_malformed": 0,
            "unknown_req_type": 0,
            "acks_sent": 0,
        }

    def add_schema(self, schema: RequestSchema):
        self.schemas[(schema.app_id, schema.req_type)] = schema

    # ---- sender ----

    def _alloc_req_id(self) -> int:
        rid = self.next_req_id
        while rid == 0 or rid in self.unacked:  # skip 0 and in-flight ids on wrap
            rid = (rid + 1) % REQ_ID_SPACE
        self.next_req_id = (rid + 1) % REQ_ID_SPACE
        return rid

    def send_req(self, request: wire.Request, now: int) -> int:
        if len(self.unacked) >= self.config.max_unacked:
            raise Backpressure(f"{len(self.unacked)} requests await ACKs")
        req_id = self._alloc_req_id()
        pkts = wire.segment_request(request, req_id, acked=self.last_completed)
        frames = [wire.encode_frame(p) for p in pkts]
        self.unacked[req_id] = _Unacked(
            frames, retries=0, rto=self.config.rto_initial,
            deadline=now + self.config.rto_initial,
        )
        self.metrics["sent_requests"] += 1
        self.metrics["data_pkts_sent"] += len(frames)
        for f in frames:
            self.send_frame(f)
        return req_id

    def on_ack(self, req_acked_id: int):
        if self.unacked.pop(req_acked_id, None) is not None:
            self.metrics["acked_requests"] += 1

    # ---- receiver ----

    def on_frame(self, frame: bytes, now: int):
        kind, pkt = packet_filter(frame)
        if kind == "malformed":
            self.metrics["dropped_malformed"] += 1
            return
        if kind == "ack":
            self.on_ack(pkt.header.req_acked_id)
            return
        if apply_gate(self.gate, pkt, now):
            self.dispatcher.note_reconfig_drop()
            return
        if pkt.header.req_acked_id:
            self.on_ack(pkt.header.req_acked_id)
        result = self.dispatcher.dispatch(pkt)
        if result.queue is None:
            return  # dispatcher counted the drop; sender retransmission recovers
        self.on_data(pkt, result.queue, now)

    def on_data(self, pkt: wire.QnpPacket, queue: int, now: int):
        hdr = pkt.header
        entry = self.entries.get(hdr.req_id)
        if entry is None:
            if len(self.entries) >= self.config.entry_capacity:
                self.metrics["dropped_entry_full"] += 1
                return
            entry = _RequestEntry(
                req_id=hdr.req_id,
                app_id=hdr.app_id,
                req_type=hdr.req_type,
                expected_pkts=hdr.req_len_in_pkts,
                total_bytes=hdr.req_len_in_bytes,
                staging=[None] * hdr.req_len_in_pkts,
                queue=queue,
            )
            self.entries[hdr.req_id] = entry
        if hdr.req_len_in_pkts != entry.expected_pkts or hdr.req_len_in_bytes != entry.total_bytes:
            self.metrics["dropped_malformed"] += 1
            return
        bit = 1 << hdr.pkt_seq_num_in_req
        if entry.bitmap & bit:
            return  # duplicate packet: idempotent
        entry.staging[hdr.pkt_seq_num_in_req] = pkt.payload
        entry.bitmap |= bit
        entry.deadline = now + self.config.entry_timeout
        if entry.bitmap.bit_count() == entry.expected_pkts:
            del self.entries[hdr.req_id]
            self._complete(entry, now)

    def _complete(self, entry: _RequestEntry, now: int):
        if sum(len(p) for p in entry.staging) != entry.total_bytes:
            self.metrics["dropped_len_mismatch"] += 1
            return
        self.last_completed = entry.req_id
        duplicate = entry.req_id in self._completed
        if duplicate:
            self.metrics["duplicate_deliveries_suppressed"] += 1
        else:
            self._completed[entry.req_id] = None
            if len(self._completed) > self.config.completed_ring:
                self._completed.popitem(last=False)
            schema = self.schemas.get((entry.app_id, entry.req_type))
            if schema is None:
                self.metrics["unknown_req_type"] += 1
            else:
                request = wire.decode_tlv(entry.staging, schema)
                self.rx_queues.setdefault(entry.queue, deque()).append(request)
                self.metrics["completed_requests"] += 1
                if self.on_request is not None:
                    self.on_request(entry.queue, request, now)
        ack = wire.make_ack(entry.app_id, entry.req_type, entry.req_id)
        self.send_frame(wire.encode_frame(ack))
        self.metrics["acks_sent"] += 1

    def recv_req(self, queue: int) -> list[wire.Request]:
        """Drain completed requests of one RX queue in completion order."""
        q = self.rx_queues.get(queue)
        if not q:
            return []
        out = list(q)
        q.clear()
        return out

    # ---- timers ----

    def tick(self, now: int):
        expired = [rid for rid, e in self.entries.items() if e.deadline <= now]
        for rid in expired:
            del self.entries[rid]
            self.metrics["expired_entries"] += 1
        for rid, u in list(self.unacked.items()):
            if u.deadline > now:
                continue
            if u.retries >= self.config.max_retries:
                del self.unacked[rid]
                self.metrics["delivery_failures"] += 1
                if self.on_delivery_failure is not None:
                    self.on_delivery_failure(rid)
                continue
            u.retries += 1
            u.rto *= 2
            u.deadline = now + u.rto
            self.metrics["retransmissions"] += 1
            for f in u.frames:  # first packet first, contents bit-exact
                self.send_frame(f)
