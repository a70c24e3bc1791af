"""Receive-side dispatch engine: ByteStream, matcher walk, stash, cycle model.

The engine mirrors the hardware datapath: a packet's first 64-byte segments
(bounded by the header's seg_cnt) are written into the ByteStream, the
matcher reads TLV record headers to find the scoped field, then walks the
RAM/CAM tables consuming skip+check bytes per state until a terminal entry or
a CAM miss.  Results land in a direct-mapped stash so non-first packets of a
request reuse the first packet's decision at a fixed 2-cycle cost.

Cycle accounting, per dispatched first packet:

* 3 cycles per 64-byte ByteStream write or read, 0 for inspect,
* 2 cycles per CAM compare, 1 per RAM entry fetch, 1 to emit the result,
* 1 cycle per 64-byte segment left to flush after the decision.

For a single-segment packet whose scoped field is the first record and whose
rules run n skip-and-checks (checks within the CAM width), the metered total
is exactly ``9 + 6n``; ``dispatch_cycles`` states that closed form and the
test suite asserts the meter reproduces it.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass

from . import wire
from .rules import RuleTables, Scope

N_FIFOS = 64
FIFO_DEPTH = 128
MAX_OP_BYTES = 64
STASH_DEPTH = 256

RW_CYCLES = 3
CAM_CYCLES = 2
RAM_FETCH_CYCLES = 1
EMIT_CYCLES = 1
STASH_HIT_CYCLES = 2


class ByteStreamError(RuntimeError):
    pass


class StreamOverflow(ByteStreamError):
    """Backpressure: the write would exceed FIFO capacity."""


class StreamUnderflow(ByteStreamError):
    pass


class ByteStream:
    """Parallel first-word-fall-through FIFOs presenting a serial byte stream.

    Bytes are spread round-robin across ``n_fifos`` queues from the write
    index; reads drain round-robin from the read index, so a FIFO can take
    two bytes of one write once the round wraps.  read/write cost 3 cycles,
    inspect exposes upcoming bytes without consuming them at no cycle cost.
    """

    __slots__ = ("n_fifos", "depth", "fifos", "read_idx", "write_idx", "occupancy")

    def __init__(self, n_fifos: int = N_FIFOS, depth: int = FIFO_DEPTH):
        self.n_fifos = n_fifos
        self.depth = depth
        self.fifos = [deque() for _ in range(n_fifos)]
        self.read_idx = 0
        self.write_idx = 0
        self.occupancy = 0

    @property
    def capacity(self) -> int:
        return self.n_fifos * self.depth

    def write(self, data: bytes) -> int:
        if len(data) > MAX_OP_BYTES:
            raise ValueError(f"write of {len(data)} bytes exceeds {MAX_OP_BYTES}")
        if not data:
            return 0
        if self.occupancy + len(data) > self.capacity:
            raise StreamOverflow(f"{len(data)} bytes into {self.capacity - self.occupancy} free")
        for b in data:
            fifo = self.fifos[self.write_idx]
            if len(fifo) >= self.depth:
                raise StreamOverflow(f"FIFO {self.write_idx} full")
            fifo.append(b)
            self.write_idx = (self.write_idx + 1) % self.n_fifos
        self.occupancy += len(data)
        return RW_CYCLES

    def read(self, n: int) -> tuple[bytes, int]:
        if n > MAX_OP_BYTES:
            raise ValueError(f"read of {n} bytes exceeds {MAX_OP_BYTES}")
        if n == 0:
            return b"", 0
        if n > self.occupancy:
            raise StreamUnderflow(f"read {n} of {self.occupancy} buffered bytes")
        out = bytearray()
        for _ in range(n):
            out.append(self.fifos[self.read_idx].popleft())
            self.read_idx = (self.read_idx + 1) % self.n_fifos
        self.occupancy -= n
        return bytes(out), RW_CYCLES

    def inspect(self, n: int) -> bytes:
        if n > MAX_OP_BYTES:
            raise ValueError(f"inspect of {n} bytes exceeds {MAX_OP_BYTES}")
        if n > self.occupancy:
            raise StreamUnderflow(f"inspect {n} of {self.occupancy} buffered bytes")
        out = bytearray()
        for i in range(n):
            fifo = self.fifos[(self.read_idx + i) % self.n_fifos]
            out.append(fifo[i // self.n_fifos])
        return bytes(out)

    def reset(self):
        for fifo in self.fifos:
            fifo.clear()
        self.read_idx = 0
        self.write_idx = 0
        self.occupancy = 0


class Stash:
    """Direct-mapped request-id -> queue cache (one valid bit per slot)."""

    __slots__ = ("slots",)

    def __init__(self, depth: int = STASH_DEPTH):
        self.slots: list[tuple[int, int] | None] = [None] * depth

    def store(self, req_id: int, queue: int):
        self.slots[req_id % len(self.slots)] = (req_id, queue)

    def lookup(self, req_id: int) -> int | None:
        entry = self.slots[req_id % len(self.slots)]
        if entry is not None and entry[0] == req_id:
            return entry[1]
        return None


class DropReason(enum.Enum):
    NO_MATCH = "no_match"
    NO_FIRST_PACKET = "no_first_packet"
    RECONFIG_GATE = "reconfig_gate"


@dataclass(frozen=True)
class DispatchResult:
    queue: int | None
    drop: DropReason | None
    cycles: int
    stash_hit: bool = False

    @property
    def dropped(self) -> bool:
        return self.queue is None


@dataclass(frozen=True)
class RsdConfig:
    n_parallel: int = 4
    cam_width: int = 8
    count_cycles: bool = True
    stash_depth: int = STASH_DEPTH

    def __post_init__(self):
        if self.n_parallel < 1:
            raise ValueError("n_parallel must be >= 1")


def dispatch_cycles(n_skip_and_checks: int) -> int:
    """Metered cost of a single-segment first packet running n skip-and-checks."""
    if n_skip_and_checks < 1:
        raise ValueError("n_skip_and_checks must be >= 1")
    return 9 + 6 * n_skip_and_checks


_HASH_MULT = 0x9E3779B1  # golden-ratio multiplier


def shard(req_id: int, n_parallel: int) -> int:
    """Stable request-id -> RSD index; all packets of a request land together."""
    if n_parallel <= 1:
        return 0
    return (((req_id * _HASH_MULT) & 0xFFFFFFFF) >> 16) % n_parallel


class RsdEngine:
    """Sharded dispatch pipeline over one set of rule tables and one stash.

    Shards are picked by request id; each shard owns a ByteStream, the stash
    and tables are engine-wide.  ``set_tables`` swaps tables atomically
    between packets (in-flight traffic is handled by the reconfiguration gate
    upstream, which reports its drops to this engine's metrics).
    """

    def __init__(self, tables: RuleTables, config: RsdConfig | None = None):
        self.tables = tables
        self.config = config or RsdConfig()
        self.stash = Stash(self.config.stash_depth)
        self._streams = [ByteStream() for _ in range(self.config.n_parallel)]
        self.shard_cycles = [0] * self.config.n_parallel
        self.metrics = {
            "dispatched": 0,
            "stash_hits": 0,
            "dropped_no_match": 0,
            "dropped_no_first": 0,
            "dropped_reconfig": 0,
            "total_cycles": 0,
        }

    def set_tables(self, tables: RuleTables):
        self.tables = tables

    def note_reconfig_drop(self):
        self.metrics["dropped_reconfig"] += 1

    def dispatch(self, pkt: wire.QnpPacket) -> DispatchResult:
        hdr = pkt.header
        idx = shard(hdr.req_id, self.config.n_parallel)
        if hdr.pkt_seq_num_in_req > 0:
            result = self._later_packet(hdr)
        else:
            result = self._first_packet(self._streams[idx], hdr, pkt.payload)
        if not self.config.count_cycles and result.cycles:
            result = DispatchResult(result.queue, result.drop, 0, result.stash_hit)
        self.shard_cycles[idx] += result.cycles
        self.metrics["total_cycles"] += result.cycles
        if result.queue is not None:
            self.metrics["dispatched"] += 1
            if result.stash_hit:
                self.metrics["stash_hits"] += 1
        elif result.drop is DropReason.NO_MATCH:
            self.metrics["dropped_no_match"] += 1
        elif result.drop is DropReason.NO_FIRST_PACKET:
            self.metrics["dropped_no_first"] += 1
        return result

    def _later_packet(self, hdr: wire.QnpHeader) -> DispatchResult:
        queue = self.stash.lookup(hdr.req_id)
        if queue is None:
            return DispatchResult(None, DropReason.NO_FIRST_PACKET, STASH_HIT_CYCLES)
        return DispatchResult(queue, None, STASH_HIT_CYCLES, stash_hit=True)

    def _first_packet(self, bs: ByteStream, hdr: wire.QnpHeader, payload: bytes) -> DispatchResult:
        bs.reset()
        cycles = 0
        seg_cnt = hdr.seg_cnt if hdr.seg_cnt >= 1 else 1
        ingest = payload[:seg_cnt * wire.SEG_BYTES]
        for off in range(0, len(ingest), MAX_OP_BYTES):
            cycles += bs.write(ingest[off:off + MAX_OP_BYTES])
        queue = None
        scope = self.tables.scope_for(hdr.app_id, hdr.req_type)
        if scope is not None:
            field_len, located, c = self._locate(bs, scope[2])
            cycles += c
            if located:
                q, c = self._walk(bs, scope, min(field_len, bs.occupancy), field_len)
                cycles += c
                queue = q
        if queue is None:
            queue = self.tables.default_queue(hdr.app_id, hdr.req_type)
            if queue is not None:
                cycles += EMIT_CYCLES
        cycles += self._flush(bs)
        if queue is None:
            return DispatchResult(None, DropReason.NO_MATCH, cycles)
        self.stash.store(hdr.req_id, queue)
        return DispatchResult(queue, None, cycles)

    def _locate(self, bs: ByteStream, field_index: int) -> tuple[int, bool, int]:
        """Scan TLV record headers until the scoped field; skip earlier values."""
        cycles = 0
        while bs.occupancy >= wire.TLV_OVERHEAD:
            rec, c = bs.read(wire.TLV_OVERHEAD)
            cycles += c
            length = int.from_bytes(rec[2:4], "big")
            if rec[0] == field_index:
                return length, True, cycles
            if length > bs.occupancy:
                break  # record runs past the ingested window; field not visible
            rem = length
            while rem:
                chunk = min(MAX_OP_BYTES, rem)
                _, c = bs.read(chunk)
                cycles += c
                rem -= chunk
        return 0, False, cycles

    def _walk(self, bs: ByteStream, scope: Scope, avail: int, field_len: int) -> tuple[int | None, int]:
        """Run the RAM/CAM state machine over the field bytes at the stream head."""
        cycles = 0
        state = self.tables.start[scope]
        pos = 0
        while True:
            cycles += RAM_FETCH_CYCLES
            entry = self.tables.ram[state]
            if entry.is_terminal:
                if entry.required_len is not None and field_len != entry.required_len:
                    return None, cycles
                cycles += EMIT_CYCLES
                return entry.terminal_queue, cycles
            need = entry.skip_len + entry.check_len
            if pos + need > avail:
                return None, cycles
            skip_rem = entry.skip_len
            while skip_rem + entry.check_len > MAX_OP_BYTES:
                chunk = min(skip_rem, MAX_OP_BYTES)
                _, c = bs.read(chunk)
                cycles += c
                skip_rem -= chunk
            window = bs.inspect(skip_rem + entry.check_len)
            nxt = self.tables.cam_lookup(scope, state, window[skip_rem:])
            cycles += CAM_CYCLES
            _, c = bs.read(skip_rem + entry.check_len)
            cycles += c
            pos += need
            if nxt is None:
                return None, cycles
            state = nxt

    @staticmethod
    def _flush(bs: ByteStream) -> int:
        remaining = bs.occupancy
        bs.reset()
        return -(-remaining // wire.SEG_BYTES)


def engine_match(tables: RuleTables, scope: Scope, data: bytes, engine: RsdEngine | None = None) -> int | None:
    """Dispatch one synthetic first packet holding ``data`` as the scoped field.

    Returns the engine's queue decision (None when dropped); the packet runs
    the full ByteStream/matcher path, so this is the compiled-machine side of
    oracle-equivalence checks.  Pass an engine to amortize setup across calls;
    it must have been built over ``tables``.
    """
    payload = bytes((scope[2], wire.KIND_STRING)) + len(data).to_bytes(2, "big") + data
    hdr = wire.QnpHeader(
        app_id=scope[0],
        req_type=scope[1],
        req_id=1,
        req_acked_id=0,
        req_len_in_bytes=len(payload),
        req_len_in_pkts=1,
        pkt_seq_num_in_req=0,
        pkt_flag=wire.FLAG_DATA,
        seg_cnt=wire.compute_seg_cnt(payload, len(payload)),
    )
    if engine is None:
        engine = RsdEngine(tables, RsdConfig(n_parallel=1))
    result = engine.dispatch(wire.QnpPacket(hdr, payload))
    return result.queue
