"""ByteStream behavior, stash, dispatch paths, and the cycle meter."""

import random
from collections import Counter, deque

import pytest
from hypothesis import given, settings, strategies as st

from qn import wire
from qn.rsd import (
    ByteStream,
    DropReason,
    RsdConfig,
    RsdEngine,
    Stash,
    StreamOverflow,
    StreamUnderflow,
    dispatch_cycles,
    engine_match,
    shard,
)
from qn.rules import SkipAndCheckRule, Step, compile_rules, oracle_match, parse_rule_pattern

SCOPE = (0, 0, 0)


def uniform_rule(n, skip=0, check=b"A", queue=3):
    return SkipAndCheckRule(0, 0, 0, tuple(Step(skip, check) for _ in range(n)), queue)


def first_packet(payload, *, req_id=1, seg_cnt=None, app=0, typ=0, pkts=1, seq=0):
    return wire.QnpPacket(
        wire.QnpHeader(
            app_id=app, req_type=typ, req_id=req_id, req_acked_id=0,
            req_len_in_bytes=len(payload), req_len_in_pkts=pkts,
            pkt_seq_num_in_req=seq, pkt_flag=wire.FLAG_DATA,
            seg_cnt=wire.compute_seg_cnt(payload, len(payload)) if seg_cnt is None else seg_cnt,
        ),
        payload,
    )


def record(field_index, value):
    return bytes((field_index, wire.KIND_STRING)) + len(value).to_bytes(2, "big") + value


class TestByteStream:
    def test_fig10_read_then_write(self):
        # 4 FIFOs, read index 1, write index 0: read 3 -> "BEE",
        # then a 5-byte write wraps onto FIFO 0 twice.
        bs = ByteStream(n_fifos=4, depth=8)
        bs.write(b"XBEE")
        bs.read(1)  # advances read index to 1
        data, cycles = bs.read(3)
        assert data == b"BEE" and cycles == 3
        assert bs.write(b"DECAF") == 3
        assert list(bs.fifos[0]) == [ord("D"), ord("F")]
        assert bytes(bs.read(5)[0]) == b"DECAF"

    def test_write_full_round_returns_to_start(self):
        bs = ByteStream()
        bs.write(bytes(range(64)))
        assert bs.write_idx == 0 and bs.occupancy == 64

    def test_empty_ops_cost_nothing(self):
        bs = ByteStream()
        assert bs.write(b"") == 0
        assert bs.read(0) == (b"", 0)

    def test_inspect_is_non_consuming(self):
        bs = ByteStream()
        bs.write(b"HELLO")
        assert bs.inspect(4) == b"HELL"
        assert bs.read(4) == (b"HELL", 3)
        assert bs.occupancy == 1

    def test_inspect_beyond_one_round(self):
        bs = ByteStream(n_fifos=4, depth=8)
        bs.write(b"ABCDEF")
        assert bs.inspect(6) == b"ABCDEF"

    def test_op_size_limit(self):
        bs = ByteStream()
        with pytest.raises(ValueError):
            bs.write(b"x" * 65)
        with pytest.raises(ValueError):
            bs.read(65)

    def test_overflow_and_underflow(self):
        bs = ByteStream(n_fifos=4, depth=2)
        bs.write(b"12345678")
        with pytest.raises(StreamOverflow):
            bs.write(b"9")
        bs.reset()
        with pytest.raises(StreamUnderflow):
            bs.read(1)

    @settings(max_examples=150, deadline=None)
    @given(st.data())
    def test_fifo_order_preserved_against_plain_queue(self, data):
        bs = ByteStream(n_fifos=8, depth=16)
        model = deque()
        for _ in range(data.draw(st.integers(1, 40))):
            do_write = data.draw(st.booleans())
            if do_write:
                free = bs.capacity - bs.occupancy
                chunk = data.draw(st.binary(max_size=min(free, 16)))
                bs.write(chunk)
                model.extend(chunk)
            else:
                n = data.draw(st.integers(0, min(bs.occupancy, 16)))
                if data.draw(st.booleans()):
                    got = bs.inspect(n)
                    assert got == bytes(list(model)[:n])
                else:
                    got, _ = bs.read(n)
                    assert got == bytes(model.popleft() for _ in range(n))
        assert bs.occupancy == len(model)


class TestStash:
    def test_store_lookup(self):
        s = Stash()
        s.store(7, 3)
        assert s.lookup(7) == 3
        assert s.lookup(8) is None

    def test_direct_mapped_collision_overwrites(self):
        s = Stash()
        s.store(7, 3)
        s.store(7 + 256, 5)
        assert s.lookup(7) is None  # displaced
        assert s.lookup(7 + 256) == 5


class TestDispatch:
    def make_engine(self, rules=None, defaults=None, n_parallel=1):
        tables = compile_rules(rules or [], defaults=defaults)
        return RsdEngine(tables, RsdConfig(n_parallel=n_parallel))

    def test_first_then_stash_hit(self):
        eng = self.make_engine([SkipAndCheckRule(0, 0, 0, parse_rule_pattern("...AAA.BB"), 6)])
        payload = record(0, b"FEFAAACBB")
        first = eng.dispatch(first_packet(payload, req_id=9, pkts=2))
        assert first.queue == 6 and not first.stash_hit
        later = eng.dispatch(first_packet(b"", req_id=9, pkts=2, seq=1, seg_cnt=1))
        assert later.queue == 6 and later.stash_hit and later.cycles == 2
        assert eng.metrics["stash_hits"] == 1

    def test_seq_before_first_dropped(self):
        eng = self.make_engine([uniform_rule(1)])
        res = eng.dispatch(first_packet(b"", req_id=5, pkts=2, seq=1, seg_cnt=1))
        assert res.dropped and res.drop is DropReason.NO_FIRST_PACKET
        assert res.cycles == 2
        assert eng.metrics["dropped_no_first"] == 1

    def test_no_match_without_default_drops(self):
        eng = self.make_engine([uniform_rule(1, check=b"Z")])
        res = eng.dispatch(first_packet(record(0, b"AAAA")))
        assert res.drop is DropReason.NO_MATCH
        assert eng.metrics["dropped_no_match"] == 1

    def test_no_match_routes_to_default(self):
        eng = self.make_engine([uniform_rule(1, check=b"Z")], defaults={(0, 0): 9})
        res = eng.dispatch(first_packet(record(0, b"AAAA"), req_id=3, pkts=2))
        assert res.queue == 9
        # and later packets reuse the cached default decision
        later = eng.dispatch(first_packet(b"", req_id=3, pkts=2, seq=1, seg_cnt=1))
        assert later.queue == 9 and later.stash_hit

    def test_unknown_scope_uses_default_only(self):
        eng = self.make_engine([], defaults={(0, 7): 2})
        assert eng.dispatch(first_packet(record(0, b"x"), typ=7)).queue == 2
        assert eng.dispatch(first_packet(record(0, b"x"), typ=8)).dropped

    def test_rule_field_located_behind_other_records(self):
        rules = [SkipAndCheckRule(0, 0, 1, (Step(0, b"KEY"),), 4)]
        eng = self.make_engine(rules)
        payload = record(0, b"noise") + record(1, b"KEYxx")
        assert eng.dispatch(first_packet(payload)).queue == 4

    def test_match_cannot_run_past_field_end(self):
        # field is 8 bytes; rule needs 9; the next record must not leak in
        eng = self.make_engine([SkipAndCheckRule(0, 0, 0, parse_rule_pattern("...AAA.BB"), 6)])
        payload = record(0, b"FEFAAACB") + record(1, b"BBBB")
        assert eng.dispatch(first_packet(payload)).dropped

    def test_seg_cnt_zero_treated_as_one(self):
        eng = self.make_engine([uniform_rule(1)])
        res = eng.dispatch(first_packet(record(0, b"A" * 20), seg_cnt=0))
        assert res.queue == 3

    def test_seg_cnt_clamped_to_payload(self):
        eng = self.make_engine([uniform_rule(1)])
        res = eng.dispatch(first_packet(record(0, b"A" * 20), seg_cnt=200))
        assert res.queue == 3

    def test_seg_cnt_window_hides_late_fields(self):
        # the scoped field starts beyond seg_cnt * 64 ingested bytes
        rules = [SkipAndCheckRule(0, 0, 1, (Step(0, b"K"),), 4)]
        eng = self.make_engine(rules, defaults={(0, 0): 8})
        payload = record(0, b"n" * 100) + record(1, b"K")
        res = eng.dispatch(first_packet(payload, seg_cnt=1))
        assert res.queue == 8  # default: the field was not visible

    def test_displaced_stash_entry_recovers_via_retransmission(self):
        # requests 1 and 257 share a stash slot; the displaced one degrades to
        # no-first-packet drops until its first packet is seen again
        eng = self.make_engine([uniform_rule(1)])
        payload = record(0, b"A" * 8)
        assert eng.dispatch(first_packet(payload, req_id=1, pkts=2)).queue == 3
        assert eng.dispatch(first_packet(payload, req_id=257, pkts=2)).queue == 3
        dropped = eng.dispatch(first_packet(b"", req_id=1, pkts=2, seq=1, seg_cnt=1))
        assert dropped.drop is DropReason.NO_FIRST_PACKET
        assert eng.dispatch(first_packet(payload, req_id=1, pkts=2)).queue == 3  # retransmit
        assert eng.dispatch(first_packet(b"", req_id=1, pkts=2, seq=1, seg_cnt=1)).stash_hit

    def test_outcome_independent_of_n_parallel(self):
        rules = [SkipAndCheckRule(0, 0, 0, parse_rule_pattern("AB.C"), 5)]
        payloads = [record(0, bytes(random.Random(i).choices(b"ABC", k=6))) for i in range(200)]
        outcomes = []
        for n_parallel in (1, 4, 8):
            eng = self.make_engine(rules, n_parallel=n_parallel)
            outcomes.append(
                [eng.dispatch(first_packet(p, req_id=i + 1)).queue for i, p in enumerate(payloads)]
            )
        assert outcomes[0] == outcomes[1] == outcomes[2]


class TestCycleModel:
    def calibration_packet(self, value_len=60):
        return first_packet(record(0, b"A" * value_len))

    def test_table_values(self):
        for n, want in [(1, 15), (2, 21), (4, 33), (8, 57), (16, 105), (32, 201), (48, 297)]:
            assert dispatch_cycles(n) == want
            eng = RsdEngine(compile_rules([uniform_rule(n)]), RsdConfig(n_parallel=1))
            res = eng.dispatch(self.calibration_packet())
            assert res.queue == 3
            assert res.cycles == want, f"n={n}: {res.cycles} != {want}"

    def test_affine_model_on_random_uniform_shapes(self):
        rng = random.Random(0)
        for _ in range(60):
            n = rng.randint(1, 8)
            shape = [(rng.randint(0, 3), rng.randint(1, 8)) for _ in range(n)]
            scan = sum(sk + ln for sk, ln in shape)
            if scan >= 59:
                continue
            steps = []
            value = bytearray()
            for sk, ln in shape:
                value += bytes(rng.choices(b"xy", k=sk))
                chk = bytes(rng.choices(b"PQR", k=ln))
                value += chk
                steps.append(Step(sk, chk))
            value += b"z" * (60 - len(value))  # leftover so the flush stage runs
            r = SkipAndCheckRule(0, 0, 0, tuple(steps), 2)
            eng = RsdEngine(compile_rules([r]), RsdConfig(n_parallel=1))
            res = eng.dispatch(first_packet(record(0, bytes(value))))
            assert res.queue == 2
            assert res.cycles == dispatch_cycles(n)

    def test_multi_segment_costs_more(self):
        eng = RsdEngine(compile_rules([uniform_rule(1)]), RsdConfig(n_parallel=1))
        small = eng.dispatch(self.calibration_packet()).cycles
        big = eng.dispatch(first_packet(record(0, b"A" * 300))).cycles
        assert big > small  # extra ingest writes and flush segments

    def test_seg_cnt_limits_flush_cost(self):
        # same payload, smaller ingest window -> fewer metered cycles
        eng = RsdEngine(compile_rules([uniform_rule(1)]), RsdConfig(n_parallel=1))
        payload = record(0, b"A" * 300)
        full = eng.dispatch(first_packet(payload, seg_cnt=5)).cycles
        limited = eng.dispatch(first_packet(payload, seg_cnt=1)).cycles
        assert limited < full

    def test_count_cycles_off(self):
        eng = RsdEngine(compile_rules([uniform_rule(1)]), RsdConfig(n_parallel=1, count_cycles=False))
        assert eng.dispatch(self.calibration_packet()).cycles == 0


class TestShard:
    def test_single_rsd(self):
        assert all(shard(i, 1) == 0 for i in range(100))

    def test_deterministic(self):
        assert [shard(12345, 4)] * 5 == [shard(12345, 4) for _ in range(5)]

    def test_sequential_ids_balance(self):
        counts = Counter(shard(i, 4) for i in range(1, 100_001))
        for q in range(4):
            assert abs(counts[q] / 100_000 - 0.25) < 0.02


def test_engine_oracle_equivalence_smoke():
    rng = random.Random(3)
    rules = [
        SkipAndCheckRule(0, 0, 0, parse_rule_pattern(".AB"), 1),
        SkipAndCheckRule(0, 0, 0, parse_rule_pattern(".BA"), 2),
    ]
    tables = compile_rules(rules)
    eng = RsdEngine(tables, RsdConfig(n_parallel=1))
    for _ in range(3000):
        data = bytes(rng.choices(b"AB", k=rng.randint(0, 5)))
        assert engine_match(tables, SCOPE, data, eng) == oracle_match(rules, data, SCOPE)
