"""On-wire format: TLV records, the 22-byte QNP header, segmentation.

Frame layout, outermost first:

* 42 filler bytes standing in for Ethernet+IP+UDP (a real UDP backend
  replaces the filler with an actual socket; the byte budget is identical),
* the 22-byte QNP header (big-endian, 4 zero pad bytes) so that the full
  header block is 64 bytes / 512-bit aligned,
* the payload: concatenated TLV records, empty for ACK packets.

TLV record: field_index(1) kind(1) length(2, big-endian) value(length).
kind 0 is int32 (length always 4, signed big-endian), kind 1 is string.
Records never straddle packet boundaries; a request spans at most 4
1500-byte packets and every dispatch-field record lands in packet 0.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

from .idl import INT32, RequestSchema, canonicalize

ETH_IP_UDP_BYTES = 42
HEADER_BYTES = 22
HEADER_BLOCK = ETH_IP_UDP_BYTES + HEADER_BYTES  # 64 bytes = 512 bits
MTU = 1500
MAX_PAYLOAD = MTU - HEADER_BLOCK  # 1436
TLV_OVERHEAD = 4
MAX_FIELD_BYTES = MAX_PAYLOAD - TLV_OVERHEAD  # 1432
MAX_PKTS_PER_REQ = 4
SEG_BYTES = 64

FLAG_DATA = 0
FLAG_ACK = 1
KIND_INT32 = 0
KIND_STRING = 1

_FILLER = b"\x00" * ETH_IP_UDP_BYTES
_HDR = struct.Struct("!BBIIIBBBB")
_INT32 = struct.Struct("!i")

assert _HDR.size + 4 == HEADER_BYTES


class CodecError(ValueError):
    pass


class RequestTooLarge(CodecError):
    pass


@dataclass(frozen=True)
class QnpHeader:
    app_id: int
    req_type: int
    req_id: int
    req_acked_id: int
    req_len_in_bytes: int
    req_len_in_pkts: int
    pkt_seq_num_in_req: int
    pkt_flag: int
    seg_cnt: int

    def __post_init__(self):
        for name in ("app_id", "req_type", "req_len_in_pkts", "pkt_seq_num_in_req", "pkt_flag", "seg_cnt"):
            v = getattr(self, name)
            if not 0 <= v <= 0xFF:
                raise CodecError(f"{name}={v} does not fit in 8 bits")
        for name in ("req_id", "req_acked_id", "req_len_in_bytes"):
            v = getattr(self, name)
            if not 0 <= v <= 0xFFFFFFFF:
                raise CodecError(f"{name}={v} does not fit in 32 bits")
        if not 1 <= self.req_len_in_pkts <= MAX_PKTS_PER_REQ:
            raise CodecError(f"req_len_in_pkts={self.req_len_in_pkts} outside 1..{MAX_PKTS_PER_REQ}")
        if self.pkt_flag not in (FLAG_DATA, FLAG_ACK):
            raise CodecError(f"unknown pkt_flag {self.pkt_flag}")
        if self.pkt_flag == FLAG_DATA and self.pkt_seq_num_in_req >= self.req_len_in_pkts:
            raise CodecError("pkt_seq_num_in_req must be < req_len_in_pkts for DATA")

    @property
    def is_data(self) -> bool:
        return self.pkt_flag == FLAG_DATA


def encode_header(h: QnpHeader) -> bytes:
    return _HDR.pack(
        h.app_id, h.req_type, h.req_id, h.req_acked_id, h.req_len_in_bytes,
        h.req_len_in_pkts, h.pkt_seq_num_in_req, h.pkt_flag, h.seg_cnt,
    ) + b"\x00\x00\x00\x00"


def decode_header(data: bytes) -> QnpHeader:
    if len(data) < HEADER_BYTES:
        raise CodecError(f"short header: {len(data)} < {HEADER_BYTES} bytes")
    if data[_HDR.size:HEADER_BYTES] != b"\x00\x00\x00\x00":
        warnings.warn("nonzero QNP header padding", stacklevel=2)
    return QnpHeader(*_HDR.unpack_from(data))


@dataclass(frozen=True)
class QnpPacket:
    header: QnpHeader
    payload: bytes = b""


def encode_frame(pkt: QnpPacket) -> bytes:
    frame = _FILLER + encode_header(pkt.header) + pkt.payload
    if len(frame) > MTU:
        raise CodecError(f"frame of {len(frame)} bytes exceeds {MTU}-byte MTU")
    return frame


def decode_frame(data: bytes) -> QnpPacket:
    if len(data) < HEADER_BLOCK:
        raise CodecError(f"short frame: {len(data)} < {HEADER_BLOCK} bytes")
    return QnpPacket(decode_header(data[ETH_IP_UDP_BYTES:HEADER_BLOCK]), data[HEADER_BLOCK:])


@dataclass(frozen=True)
class Request:
    """A typed request value: one entry per schema field, in index order."""

    schema: RequestSchema
    values: tuple

    def __post_init__(self):
        if len(self.values) != len(self.schema.fields):
            raise CodecError(f"expected {len(self.schema.fields)} values, got {len(self.values)}")
        for f, v in zip(self.schema.fields, self.values):
            if f.kind == INT32:
                if not isinstance(v, int) or not -(2**31) <= v < 2**31:
                    raise CodecError(f"field {f.name!r} needs an int32 value, got {v!r}")
            else:
                if not isinstance(v, (bytes, bytearray)):
                    raise CodecError(f"field {f.name!r} needs a bytes value, got {type(v).__name__}")
                if len(v) > MAX_FIELD_BYTES:
                    raise CodecError(f"field {f.name!r} is {len(v)} bytes, max {MAX_FIELD_BYTES}")

    @classmethod
    def of(cls, schema: RequestSchema, **by_name) -> "Request":
        vals = []
        for f in schema.fields:
            if f.name not in by_name:
                raise CodecError(f"missing value for field {f.name!r}")
            vals.append(by_name.pop(f.name))
        if by_name:
            raise CodecError(f"unknown fields: {sorted(by_name)}")
        return cls(schema, tuple(vals))

    def value(self, index: int):
        return self.values[index]


def _encode_record(index: int, kind: str, value) -> bytes:
    if kind == INT32:
        return bytes((index, KIND_INT32, 0, 4)) + _INT32.pack(value)
    return bytes((index, KIND_STRING)) + len(value).to_bytes(2, "big") + bytes(value)


def encode_tlv(request: Request) -> bytes:
    """Serialize all fields as TLV records in canonical (dispatch-first) order."""
    schema = canonicalize(request.schema)
    return b"".join(
        _encode_record(i, schema.fields[i].kind, request.values[i]) for i in schema.order
    )


def iter_records(payload: bytes):
    """Yield (field_index, kind, value) TLV records; raises on truncation."""
    pos = 0
    while pos < len(payload):
        if pos + TLV_OVERHEAD > len(payload):
            raise CodecError(f"truncated TLV record header at offset {pos}")
        index, kind = payload[pos], payload[pos + 1]
        length = int.from_bytes(payload[pos + 2:pos + 4], "big")
        pos += TLV_OVERHEAD
        if pos + length > len(payload):
            raise CodecError(f"truncated TLV value for field {index} at offset {pos}")
        yield index, kind, payload[pos:pos + length]
        pos += length


def decode_tlv(payloads, schema: RequestSchema) -> Request:
    """Rebuild a Request from DATA payloads given in packet-sequence order."""
    values: dict[int, object] = {}
    for payload in payloads:
        for index, kind, raw in iter_records(payload):
            if index >= len(schema.fields):
                raise CodecError(f"unknown field index {index}")
            if index in values:
                raise CodecError(f"duplicate field index {index}")
            f = schema.fields[index]
            expect_kind = KIND_INT32 if f.kind == INT32 else KIND_STRING
            if kind != expect_kind:
                raise CodecError(f"field {f.name!r}: kind tag {kind}, expected {expect_kind}")
            if kind == KIND_INT32:
                if len(raw) != 4:
                    raise CodecError(f"int32 field {f.name!r} has length {len(raw)}, expected 4")
                values[index] = _INT32.unpack(raw)[0]
            else:
                values[index] = raw
    missing = [f.name for f in schema.fields if f.index not in values]
    if missing:
        raise CodecError(f"missing fields: {missing}")
    return Request(schema, tuple(values[i] for i in range(len(schema.fields))))


def compute_seg_cnt(first_packet_payload: bytes, dispatch_byte_end: int) -> int:
    """64-byte segments the matcher must ingest to cover the dispatch records."""
    if dispatch_byte_end > len(first_packet_payload):
        raise CodecError("dispatch_byte_end exceeds payload length")
    return max(1, -(-dispatch_byte_end // SEG_BYTES))


def segment_request(request: Request, req_id: int, acked: int = 0) -> list[QnpPacket]:
    """Split one request into DATA packets sharing ``req_id``.

    Records are packed greedily and never split; canonical ordering plus the
    one-packet bound on dispatch records guarantees packet 0 starts with every
    dispatch-field record.  ``acked`` is piggybacked on every packet.
    """
    if req_id == 0:
        raise CodecError("req_id 0 is reserved for 'no ACK piggybacked'")
    schema = canonicalize(request.schema)
    records = [
        (schema.fields[i].dispatch, _encode_record(i, schema.fields[i].kind, request.values[i]))
        for i in schema.order
    ]
    dispatch_end = sum(len(rec) for disp, rec in records if disp)
    if dispatch_end > MAX_PAYLOAD:
        raise RequestTooLarge(
            f"dispatch records need {dispatch_end} bytes, exceeding one {MAX_PAYLOAD}-byte packet"
        )
    payloads: list[bytes] = []
    cur = bytearray()
    for _, rec in records:
        if len(cur) + len(rec) > MAX_PAYLOAD:
            payloads.append(bytes(cur))
            cur = bytearray()
        cur += rec
    payloads.append(bytes(cur))
    if len(payloads) > MAX_PKTS_PER_REQ:
        raise RequestTooLarge(f"request needs {len(payloads)} packets, max {MAX_PKTS_PER_REQ}")
    total = sum(len(p) for p in payloads)
    seg_cnt = compute_seg_cnt(payloads[0], dispatch_end)
    return [
        QnpPacket(
            QnpHeader(
                app_id=schema.app_id,
                req_type=schema.req_type,
                req_id=req_id,
                req_acked_id=acked,
                req_len_in_bytes=total,
                req_len_in_pkts=len(payloads),
                pkt_seq_num_in_req=seq,
                pkt_flag=FLAG_DATA,
                seg_cnt=seg_cnt,
            ),
            payload,
        )
        for seq, payload in enumerate(payloads)
    ]


def make_ack(app_id: int, req_type: int, req_id: int) -> QnpPacket:
    return QnpPacket(
        QnpHeader(
            app_id=app_id,
            req_type=req_type,
            req_id=req_id,
            req_acked_id=req_id,
            req_len_in_bytes=0,
            req_len_in_pkts=1,
            pkt_seq_num_in_req=0,
            pkt_flag=FLAG_ACK,
            seg_cnt=0,
        )
    )
