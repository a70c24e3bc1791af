"""Request-format IDL: parsing, canonical field ordering, descriptor JSON.

A request format is a flat list of int32/string fields; fields tagged
``[dispatch]`` carry the bytes the receive side routes on.  Schemas are
interpreted at runtime (no code generation): the codec reads the descriptor.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace

INT32 = "int32"
STRING = "string"
_KINDS = (INT32, STRING)


class IdlError(ValueError):
    """Syntax or validation error, with source position when known."""

    def __init__(self, msg: str, line: int | None = None, col: int | None = None):
        self.line = line
        self.col = col
        if line is not None:
            msg = f"line {line}, col {col}: {msg}"
        super().__init__(msg)


@dataclass(frozen=True)
class FieldDef:
    index: int
    name: str
    kind: str
    dispatch: bool = False

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise IdlError(f"unsupported field type {self.kind!r}")
        if not 0 <= self.index <= 255:
            raise IdlError(f"field index {self.index} out of range 0..255")


@dataclass(frozen=True)
class RequestSchema:
    """A named request format plus its serialization order.

    ``fields`` is index-sorted and dense (0..n-1).  ``order`` lists field
    indices in serialization order; canonical schemas place every dispatch
    field before any non-dispatch field.
    """

    name: str
    app_id: int
    req_type: int
    fields: tuple[FieldDef, ...]
    order: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not 0 <= self.app_id <= 255 or not 0 <= self.req_type <= 255:
            raise IdlError("app_id and req_type must fit in 8 bits")
        indices = [f.index for f in self.fields]
        if sorted(indices) != list(range(len(indices))):
            raise IdlError(f"field indices must be dense 0..{len(indices) - 1}")
        if list(indices) != sorted(indices):
            object.__setattr__(self, "fields", tuple(sorted(self.fields, key=lambda f: f.index)))
        if not any(f.dispatch for f in self.fields):
            raise IdlError(f"request {self.name!r} has no dispatch field")
        if not self.order:
            object.__setattr__(self, "order", tuple(range(len(self.fields))))
        if sorted(self.order) != list(range(len(self.fields))):
            raise IdlError("order must be a permutation of the field indices")

    def field_at(self, index: int) -> FieldDef:
        return self.fields[index]

    @property
    def dispatch_indices(self) -> tuple[int, ...]:
        return tuple(f.index for f in self.fields if f.dispatch)

    @property
    def is_canonical(self) -> bool:
        seen_plain = False
        for idx in self.order:
            if self.fields[idx].dispatch:
                if seen_plain:
                    return False
            else:
                seen_plain = True
        return True


def canonicalize(schema: RequestSchema) -> RequestSchema:
    """Return a schema whose serialization order puts dispatch fields first.

    Relative order is preserved within the dispatch and non-dispatch groups;
    field indices are untouched.  Idempotent.
    """
    order = tuple(i for i in schema.order if schema.fields[i].dispatch) + tuple(
        i for i in schema.order if not schema.fields[i].dispatch
    )
    if order == schema.order:
        return schema
    return replace(schema, order=order)


_TOKEN_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*|\d+|//[^\n]*|\S")


def _tokenize(source: str):
    tokens = []
    for lineno, line in enumerate(source.splitlines(), start=1):
        for m in _TOKEN_RE.finditer(line):
            text = m.group(0)
            if text.startswith("//"):
                break
            tokens.append((text, lineno, m.start() + 1))
    return tokens


class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos][0] if self.pos < len(self.tokens) else None

    def next(self, expect: str | None = None):
        if self.pos >= len(self.tokens):
            last = self.tokens[-1] if self.tokens else ("", 1, 1)
            raise IdlError(f"unexpected end of input (expected {expect or 'more input'})", last[1], last[2])
        text, line, col = self.tokens[self.pos]
        self.pos += 1
        if expect is not None and text != expect:
            raise IdlError(f"expected {expect!r}, found {text!r}", line, col)
        return text, line, col

    def ident(self, what: str):
        text, line, col = self.next()
        if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", text):
            raise IdlError(f"expected {what}, found {text!r}", line, col)
        return text, line, col


def parse_idl(source: str, *, app_id: int = 0, req_type_start: int = 0) -> list[RequestSchema]:
    """Parse IDL text into validated schemas.

    Each ``request`` block becomes one schema; ``req_type`` is assigned
    sequentially from ``req_type_start`` in declaration order (the format
    itself does not carry ids).  Deterministic: same text, same schemas.
    """
    parser = _Parser(_tokenize(source))
    schemas: list[RequestSchema] = []
    while parser.peek() is not None:
        _, line, col = parser.next("request")
        name, _, _ = parser.ident("request name")
        parser.next("{")
        fields: list[FieldDef] = []
        order: list[int] = []
        seen: dict[int, str] = {}
        while parser.peek() != "}":
            kind, kline, kcol = parser.next()
            if kind == "request":
                raise IdlError("nested request definitions are not supported", kline, kcol)
            if kind not in _KINDS:
                raise IdlError(f"unsupported field type {kind!r}", kline, kcol)
            fname, _, _ = parser.ident("field name")
            parser.next("=")
            idx_text, iline, icol = parser.next()
            if not idx_text.isdigit():
                raise IdlError(f"expected field index, found {idx_text!r}", iline, icol)
            index = int(idx_text)
            dispatch = False
            if parser.peek() == "[":
                parser.next("[")
                parser.next("dispatch")
                parser.next("]")
                dispatch = True
            parser.next(";")
            if index in seen:
                raise IdlError(f"duplicate field index {index} (already used by {seen[index]!r})", iline, icol)
            seen[index] = fname
            fields.append(FieldDef(index, fname, kind, dispatch))
            order.append(index)
        parser.next("}")
        req_type = req_type_start + len(schemas)
        try:
            schemas.append(RequestSchema(name, app_id, req_type, tuple(fields), tuple(order)))
        except IdlError as exc:
            raise IdlError(str(exc), line, col) from None
    return schemas


def emit_idl_text(schema: RequestSchema) -> str:
    """Render a schema back to IDL text, fields in serialization order."""
    lines = [f"request {schema.name} {{"]
    for idx in schema.order:
        f = schema.fields[idx]
        suffix = " [dispatch]" if f.dispatch else ""
        lines.append(f"  {f.kind} {f.name} = {f.index}{suffix};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def schema_to_dict(schema: RequestSchema) -> dict:
    return {
        "name": schema.name,
        "app_id": schema.app_id,
        "req_type": schema.req_type,
        "fields": [
            {"index": f.index, "name": f.name, "kind": f.kind, "dispatch": f.dispatch}
            for f in schema.fields
        ],
        "order": list(schema.order),
    }


def schema_from_dict(data: dict) -> RequestSchema:
    fields = tuple(
        FieldDef(f["index"], f["name"], f["kind"], bool(f.get("dispatch", False)))
        for f in data["fields"]
    )
    return RequestSchema(
        data.get("name", "Request"),
        data["app_id"],
        data["req_type"],
        fields,
        tuple(data.get("order", ())),
    )


def dump_schemas(schemas: list[RequestSchema]) -> str:
    """Descriptor JSON: a single object for one schema, else an array."""
    payload = [schema_to_dict(s) for s in schemas]
    return json.dumps(payload[0] if len(payload) == 1 else payload, indent=2) + "\n"


def load_schemas(text: str) -> list[RequestSchema]:
    data = json.loads(text)
    if isinstance(data, dict):
        data = [data]
    return [schema_from_dict(d) for d in data]
