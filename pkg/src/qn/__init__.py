"""Application-defined receive-side dispatch, modeled end to end in software:
IDL-described requests serialized as TLV, a request-oriented reliable
transport over datagrams, skip-and-check rules compiled to RAM/CAM tables,
a cycle-metered dispatch engine, and a deterministic simulation harness.
"""

from .idl import FieldDef, IdlError, RequestSchema, canonicalize, parse_idl
from .rsd import ByteStream, DispatchResult, DropReason, RsdConfig, RsdEngine, dispatch_cycles, shard
from .rules import (
    CamEntry,
    RamEntry,
    RuleTables,
    SkipAndCheckRule,
    Step,
    compile_rules,
    from_string_matcher,
    oracle_match,
    parse_rule_pattern,
)
from .transport import Backpressure, Endpoint, EndpointConfig
from .wire import (
    QnpHeader,
    QnpPacket,
    Request,
    compute_seg_cnt,
    decode_header,
    decode_tlv,
    encode_header,
    encode_tlv,
    segment_request,
)

__all__ = [name for name in dir() if not name.startswith("_")]
