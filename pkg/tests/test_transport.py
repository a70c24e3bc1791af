"""Endpoint reliability: staging, ACKs, timers, retransmission, dedup."""

import pytest

from qn.idl import FieldDef, RequestSchema, parse_idl
from qn.rsd import RsdConfig, RsdEngine
from qn.rules import compile_rules
from qn.transport import Backpressure, Endpoint, EndpointConfig
from qn.wire import Request, decode_frame, encode_frame, segment_request

MS = 1_000_000
S = 1_000_000_000

SMALL_IDL = "request Ping { string body = 0 [dispatch]; }"


def big_schema():
    return RequestSchema(
        "Blob", 0, 0,
        (FieldDef(0, "head", "string", dispatch=True),)
        + tuple(FieldDef(i, f"p{i}", "string") for i in range(1, 4)),
    )


def big_request(schema):
    # packs into 4 packets: [head][p1][p2][p3]
    return Request(schema, (b"HD", b"a" * 1432, b"b" * 1432, b"c" * 1432))


def make_receiver(schemas, rules=None, defaults=None, config=None):
    tables = compile_rules(rules or [], defaults=defaults or {(0, 0): 0})
    engine = RsdEngine(tables, RsdConfig(n_parallel=1))
    sent = []
    ep = Endpoint("rx", dispatcher=engine, send_frame=sent.append, schemas=schemas, config=config)
    return ep, sent, engine


def frames_of(request, req_id, acked=0):
    return [encode_frame(p) for p in segment_request(request, req_id, acked)]


class TestReceive:
    def test_four_packets_in_order_single_ack(self):
        schema = big_schema()
        ep, sent, _ = make_receiver([schema])
        frames = frames_of(big_request(schema), req_id=4)
        assert len(frames) == 4
        for i, f in enumerate(frames):
            ep.on_frame(f, now=i)
        assert ep.metrics["completed_requests"] == 1
        assert ep.metrics["acks_sent"] == 1
        acks = [decode_frame(f) for f in sent]
        assert len(acks) == 1 and acks[0].header.req_acked_id == 4
        assert ep.recv_req(0)[0] == big_request(schema)

    def test_duplicate_packet_ignored(self):
        schema = big_schema()
        ep, sent, _ = make_receiver([schema])
        frames = frames_of(big_request(schema), req_id=4)
        ep.on_frame(frames[0], 0)
        ep.on_frame(frames[1], 1)
        ep.on_frame(frames[1], 2)  # duplicate
        assert ep.metrics["completed_requests"] == 0
        ep.on_frame(frames[2], 3)
        ep.on_frame(frames[3], 4)
        assert ep.metrics["completed_requests"] == 1
        assert len(ep.recv_req(0)) == 1

    def test_partial_request_expires_without_delivery(self):
        schema = big_schema()
        ep, sent, _ = make_receiver([schema])
        frames = frames_of(big_request(schema), req_id=4)
        ep.on_frame(frames[0], 0)
        ep.on_frame(frames[2], 1)
        ep.tick(now=1 * S + 2)
        assert not ep.entries
        assert ep.metrics["expired_entries"] == 1
        assert ep.metrics["completed_requests"] == 0
        assert ep.metrics["acks_sent"] == 0

    def test_timer_refreshed_by_each_packet(self):
        schema = big_schema()
        ep, _, _ = make_receiver([schema])
        frames = frames_of(big_request(schema), req_id=4)
        ep.on_frame(frames[0], 0)
        ep.on_frame(frames[1], 900 * MS)
        ep.tick(now=1 * S + 1)  # old deadline passed, refreshed one has not
        assert len(ep.entries) == 1

    def test_packet_before_first_dropped_then_recovered(self):
        schema = big_schema()
        ep, sent, engine = make_receiver([schema])
        frames = frames_of(big_request(schema), req_id=4)
        ep.on_frame(frames[1], 0)  # arrives before the first packet
        assert engine.metrics["dropped_no_first"] == 1
        assert not ep.entries
        for f in frames:  # full retransmission
            ep.on_frame(f, 1)
        assert ep.metrics["completed_requests"] == 1
        assert len(ep.recv_req(0)) == 1

    def test_entry_table_full_drops_packet(self):
        (schema,) = parse_idl(SMALL_IDL)
        ep, _, _ = make_receiver([schema], config=EndpointConfig(entry_capacity=2))
        # multi-packet requests occupy entries while incomplete
        blob = big_schema()
        ep.add_schema(blob)
        for rid in (1, 2, 3):
            ep.on_frame(frames_of(big_request(blob), rid)[0], 0)
        assert len(ep.entries) == 2
        assert ep.metrics["dropped_entry_full"] == 1

    def test_retransmit_after_completion_reacks_without_redelivery(self):
        schema = big_schema()
        ep, sent, _ = make_receiver([schema])
        frames = frames_of(big_request(schema), req_id=4)
        for f in frames:
            ep.on_frame(f, 0)
        for f in frames:  # sender never saw the ACK
            ep.on_frame(f, 1)
        assert ep.metrics["completed_requests"] == 1
        assert ep.metrics["duplicate_deliveries_suppressed"] == 1
        assert ep.metrics["acks_sent"] == 2
        assert len(ep.recv_req(0)) == 1

    def test_completion_order_preserved(self):
        (schema,) = parse_idl(SMALL_IDL)
        ep, _, _ = make_receiver([schema])
        for rid, body in ((1, b"one"), (2, b"two")):
            for f in frames_of(Request.of(schema, body=body), rid):
                ep.on_frame(f, 0)
        got = ep.recv_req(0)
        assert [r.values[0] for r in got] == [b"one", b"two"]
        assert ep.recv_req(0) == []


class TestSender:
    def make_sender(self, config=None):
        (schema,) = parse_idl(SMALL_IDL)
        tables = compile_rules([], defaults={(0, 0): 0})
        sent = []
        ep = Endpoint(
            "tx", dispatcher=RsdEngine(tables, RsdConfig(n_parallel=1)),
            send_frame=sent.append, schemas=[schema], config=config,
        )
        return ep, sent, schema

    def test_send_assigns_increasing_ids(self):
        ep, sent, schema = self.make_sender()
        ids = [ep.send_req(Request.of(schema, body=b"x"), now=0) for _ in range(3)]
        assert ids == [1, 2, 3]
        assert len(ep.unacked) == 3
        assert len(sent) == 3

    def test_ack_clears_unacked_and_duplicates_are_noops(self):
        ep, _, schema = self.make_sender()
        rid = ep.send_req(Request.of(schema, body=b"x"), now=0)
        ep.on_ack(rid)
        assert not ep.unacked
        ep.on_ack(rid)  # duplicate
        assert ep.metrics["acked_requests"] == 1

    def test_piggybacked_ack_on_inbound_data(self):
        ep, _, schema = self.make_sender()
        rid = ep.send_req(Request.of(schema, body=b"x"), now=0)
        inbound = frames_of(Request.of(schema, body=b"y"), req_id=9, acked=rid)[0]
        ep.on_frame(inbound, now=1)
        assert not ep.unacked  # piggyback acted as an ACK

    def test_response_carries_completed_request_id(self):
        ep, sent, schema = self.make_sender()
        for f in frames_of(Request.of(schema, body=b"req"), req_id=5):
            ep.on_frame(f, now=0)
        sent.clear()
        ep.send_req(Request.of(schema, body=b"resp"), now=1)
        hdr = decode_frame(sent[0]).header
        assert hdr.req_acked_id == 5

    def test_rto_retransmits_bit_exact_with_backoff(self):
        ep, sent, schema = self.make_sender()
        ep.send_req(Request.of(schema, body=b"x"), now=0)
        original = list(sent)
        ep.tick(now=100 * MS)
        assert sent == original  # RTO not reached
        ep.tick(now=201 * MS)
        assert sent[1:] == original  # same frames, first packet first
        assert ep.metrics["retransmissions"] == 1
        ep.tick(now=300 * MS)
        assert len(sent) == 2  # backoff doubled: next deadline at +400ms
        ep.tick(now=602 * MS)
        assert len(sent) == 3

    def test_retry_budget_exhaustion_surfaces_failure(self):
        ep, sent, schema = self.make_sender(EndpointConfig(max_retries=2))
        failures = []
        ep.on_delivery_failure = failures.append
        rid = ep.send_req(Request.of(schema, body=b"x"), now=0)
        now = 0
        for _ in range(4):
            now += 10 * S
            ep.tick(now)
        assert failures == [rid]
        assert not ep.unacked
        assert ep.metrics["delivery_failures"] == 1
        assert len(sent) == 3  # original + 2 retries

    def test_backpressure_when_unacked_full(self):
        ep, _, schema = self.make_sender(EndpointConfig(max_unacked=2))
        ep.send_req(Request.of(schema, body=b"x"), now=0)
        ep.send_req(Request.of(schema, body=b"x"), now=0)
        with pytest.raises(Backpressure):
            ep.send_req(Request.of(schema, body=b"x"), now=0)

    def test_req_id_wraparound_skips_zero(self):
        ep, _, schema = self.make_sender()
        ep.next_req_id = 0xFFFFFFFF
        first = ep.send_req(Request.of(schema, body=b"x"), now=0)
        ep.on_ack(first)
        second = ep.send_req(Request.of(schema, body=b"x"), now=0)
        assert (first, second) == (0xFFFFFFFF, 1)


def test_reassembled_length_must_match_header():
    # a forged packet set whose payload bytes disagree with req_len_in_bytes
    (schema,) = parse_idl(SMALL_IDL)
    ep, sent, _ = make_receiver([schema])
    pkts = segment_request(Request.of(schema, body=b"abcdef"), req_id=3)
    hdr = pkts[0].header
    forged = wire_replace(hdr, req_len_in_bytes=hdr.req_len_in_bytes + 4)
    ep.on_frame(encode_frame(type(pkts[0])(forged, pkts[0].payload)), 0)
    assert ep.metrics["completed_requests"] == 0
    assert ep.metrics["dropped_len_mismatch"] == 1
    assert ep.metrics["acks_sent"] == 0


def wire_replace(header, **kw):
    from dataclasses import replace

    return replace(header, **kw)
