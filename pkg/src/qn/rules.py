"""Skip-and-check dispatch rules and their RAM/CAM state-machine compilation.

A rule is an alternating sequence of "skip k bytes" and "match this literal"
steps over one request field, ending in an RX queue index.  Compilation maps
skips to RAM entries (one per state, addressed by state number) and checks to
CAM entries keyed by (app_id, req_type, field_index, state, pattern); rules
sharing a pattern prefix share states, and the terminal is a RAM entry with
zero skip and check lengths carrying the output queue.

``oracle_match`` interprets rules directly over a byte string and is kept
independent of the compiler: it is the reference the compiled machine is
checked against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

RAM_CAPACITY = 512
CAM_CAPACITY = 512
MAX_STATES = 256
SCAN_CAPACITY = 8192  # ByteStream capacity bounds the scannable bytes per rule
DEFAULT_CAM_WIDTH = 8

Scope = tuple[int, int, int]  # (app_id, req_type, field_index)


class RuleError(ValueError):
    pass


class CompileError(RuleError):
    pass


@dataclass(frozen=True)
class Step:
    skip: int
    check: bytes


@dataclass(frozen=True)
class SkipAndCheckRule:
    app_id: int
    req_type: int
    field_index: int
    steps: tuple[Step, ...]
    queue: int
    exact_len: int | None = None  # TLV length guard, set by exact matchers

    def __post_init__(self):
        if not self.steps:
            raise RuleError("rule needs at least one step")
        scanned = 0
        for st in self.steps:
            if st.skip < 0:
                raise RuleError("skip counts must be non-negative")
            if not st.check:
                raise RuleError("check strings must be nonempty")
            scanned += st.skip + len(st.check)
        if scanned > SCAN_CAPACITY:
            raise RuleError(f"rule scans {scanned} bytes, capacity {SCAN_CAPACITY}")
        if not 0 <= self.queue <= 255:
            raise RuleError("queue index must fit in 8 bits")

    @property
    def scope(self) -> Scope:
        return (self.app_id, self.req_type, self.field_index)

    @property
    def shape(self) -> tuple[tuple[int, int], ...]:
        return tuple((st.skip, len(st.check)) for st in self.steps)


@dataclass(frozen=True)
class RamEntry:
    state: int
    field_index: int
    skip_len: int
    check_len: int
    terminal_queue: int | None = None
    required_len: int | None = None  # terminal-only exact-length guard

    @property
    def is_terminal(self) -> bool:
        return self.skip_len == 0 and self.check_len == 0


@dataclass(frozen=True)
class CamEntry:
    app_id: int
    req_type: int
    field_index: int
    state: int
    pattern: bytes
    next_state: int


@dataclass
class RuleTables:
    cam_width: int = DEFAULT_CAM_WIDTH
    ram: dict[int, RamEntry] = field(default_factory=dict)
    cam: list[CamEntry] = field(default_factory=list)
    start: dict[Scope, int] = field(default_factory=dict)
    defaults: dict[tuple[int, int], int] = field(default_factory=dict)
    _cam_index: dict[tuple[Scope, int], dict[bytes, int]] = field(default_factory=dict)
    _scope_by_pair: dict[tuple[int, int], Scope] = field(default_factory=dict)

    def scope_for(self, app_id: int, req_type: int) -> Scope | None:
        return self._scope_by_pair.get((app_id, req_type))

    def cam_lookup(self, scope: Scope, state: int, window: bytes) -> int | None:
        return self._cam_index.get((scope, state), {}).get(window)

    def default_queue(self, app_id: int, req_type: int) -> int | None:
        return self.defaults.get((app_id, req_type))


def parse_rule_pattern(pattern: str) -> tuple[Step, ...]:
    """Parse the dotted pattern syntax: runs of ``.`` skip, literals check.

    ``\\.`` matches a literal dot and ``\\\\`` a literal backslash.  Patterns
    must contain at least one literal and cannot end in a skip (a trailing
    skip has no state-machine encoding).
    """
    if not pattern:
        raise RuleError("empty pattern")
    steps: list[Step] = []
    skip = 0
    check = bytearray()
    i = 0
    while i < len(pattern):
        c = pattern[i]
        if c == ".":
            if check:
                steps.append(Step(skip, bytes(check)))
                skip, check = 0, bytearray()
            skip += 1
            i += 1
            continue
        if c == "\\":
            if i + 1 >= len(pattern) or pattern[i + 1] not in ".\\":
                raise RuleError(f"bad escape at offset {i}")
            c = pattern[i + 1]
            i += 1
        check += c.encode("latin-1")
        i += 1
    if check:
        steps.append(Step(skip, bytes(check)))
    elif not steps:
        raise RuleError("pattern of only skips matches nothing")
    else:
        raise RuleError("pattern must end with a literal, not a skip")
    return tuple(steps)


def from_string_matcher(kind: str, literal, value_len_hint: int | None = None):
    """Translate an exact/prefix string matcher into rule steps.

    Returns ``(steps, exact_len)``; exact matching needs the TLV length guard
    since skip-and-check alone cannot bound the value length.  Suffix and
    contains matchers have no fixed-offset encoding and are not supported.
    """
    if isinstance(literal, str):
        literal = literal.encode("latin-1")
    if not literal:
        raise RuleError("empty matcher literal")
    kind = kind.lower()
    if kind == "prefix":
        return (Step(0, bytes(literal)),), None
    if kind == "exact":
        return (Step(0, bytes(literal)),), len(literal)
    raise RuleError(f"unsupported matcher kind {kind!r}")


def oracle_match(rules, field_bytes: bytes, scope: Scope) -> int | None:
    """Reference matcher: interpret each rule in listed order, first hit wins.

    Independent of compile_rules by design; returns the queue index or None.
    """
    for rule in rules:
        if rule.scope != scope:
            continue
        if rule.exact_len is not None and len(field_bytes) != rule.exact_len:
            continue
        pos = 0
        for st in rule.steps:
            pos += st.skip
            end = pos + len(st.check)
            if end > len(field_bytes) or field_bytes[pos:end] != st.check:
                break
            pos = end
        else:
            return rule.queue
    return None


def _split_steps(steps, width: int) -> list[Step]:
    out: list[Step] = []
    for st in steps:
        out.append(Step(st.skip, st.check[:width]))
        for off in range(width, len(st.check), width):
            out.append(Step(0, st.check[off:off + width]))
    return out


def compile_rules(rules, cam_width: int = DEFAULT_CAM_WIDTH, defaults=None) -> RuleTables:
    """Compile a rule list into RAM/CAM tables.

    Preconditions: rules within one (app_id, req_type, field_index) scope share
    the same (skip, check-length) shape sequence, and one (app_id, req_type)
    pair uses a single dispatch field.  Checks longer than ``cam_width`` split
    into consecutive zero-skip steps.  Capacity overruns raise; nothing is
    silently truncated.
    """
    if not 1 <= cam_width <= 64:
        raise CompileError("cam_width must be within 1..64")
    tables = RuleTables(cam_width=cam_width)
    if defaults:
        tables.defaults.update(defaults)

    next_state = 0

    def alloc() -> int:
        nonlocal next_state
        if next_state >= MAX_STATES:
            raise CompileError(f"state count exceeds {MAX_STATES}")
        next_state += 1
        return next_state - 1

    by_scope: dict[Scope, list[SkipAndCheckRule]] = {}
    for rule in rules:
        by_scope.setdefault(rule.scope, []).append(rule)

    terminals: dict[tuple[Scope, int, int | None], int] = {}
    for scope, scope_rules in by_scope.items():
        pair = scope[:2]
        other = tables._scope_by_pair.get(pair)
        if other is not None and other != scope:
            raise CompileError(
                f"app {pair[0]} req_type {pair[1]} has rules on fields {other[2]} and {scope[2]}; "
                "one dispatch field per request type"
            )
        tables._scope_by_pair[pair] = scope
        shape = scope_rules[0].shape
        for r in scope_rules[1:]:
            if r.shape != shape:
                raise CompileError(
                    f"scope {scope}: rule shapes differ ({r.shape} vs {shape}); "
                    "split heterogeneous rules across request types"
                )
        for rule in scope_rules:
            exp = _split_steps(rule.steps, cam_width)
            if scope not in tables.start:
                s0 = alloc()
                tables.ram[s0] = RamEntry(s0, scope[2], exp[0].skip, len(exp[0].check))
                tables.start[scope] = s0
            state = tables.start[scope]
            for i, st in enumerate(exp):
                last = i == len(exp) - 1
                edges = tables._cam_index.setdefault((scope, state), {})
                nxt = edges.get(st.check)
                if nxt is not None:
                    if not last:
                        state = nxt
                        continue
                    t = tables.ram[nxt]
                    if t.required_len is not None and (t.terminal_queue, t.required_len) != (rule.queue, rule.exact_len):
                        raise CompileError(
                            f"scope {scope}: pattern path already ends in a length-guarded terminal; "
                            "a later rule on the same path would be unreachable only for some lengths"
                        )
                    break  # identical path: first-listed rule wins
                if last:
                    tkey = (scope, rule.queue, rule.exact_len)
                    nxt = terminals.get(tkey)
                    if nxt is None:
                        nxt = alloc()
                        tables.ram[nxt] = RamEntry(nxt, scope[2], 0, 0, rule.queue, rule.exact_len)
                        terminals[tkey] = nxt
                else:
                    nxt = alloc()
                    fol = exp[i + 1]
                    tables.ram[nxt] = RamEntry(nxt, scope[2], fol.skip, len(fol.check))
                edges[st.check] = nxt
                tables.cam.append(CamEntry(scope[0], scope[1], scope[2], state, st.check, nxt))
                state = nxt

    if len(tables.ram) > RAM_CAPACITY:
        raise CompileError(f"RAM needs {len(tables.ram)} entries, capacity {RAM_CAPACITY}")
    if len(tables.cam) > CAM_CAPACITY:
        raise CompileError(f"CAM needs {len(tables.cam)} entries, capacity {CAM_CAPACITY}")
    return tables


def _rule_from_dict(obj: dict) -> SkipAndCheckRule:
    scope_kw = dict(
        app_id=obj.get("app_id", 0),
        req_type=obj.get("req_type", 0),
        field_index=obj.get("field", obj.get("field_index", 0)),
        queue=obj["queue"],
    )
    exact_len = obj.get("exact_len")
    if "pattern" in obj:
        steps = parse_rule_pattern(obj["pattern"])
    elif "steps" in obj:
        steps = tuple(
            Step(
                s.get("skip", 0),
                bytes.fromhex(s["check_hex"]) if "check_hex" in s else s["check"].encode("latin-1"),
            )
            for s in obj["steps"]
        )
    elif "prefix" in obj:
        steps, exact_len = from_string_matcher("prefix", obj["prefix"])
    elif "exact" in obj:
        steps, exact_len = from_string_matcher("exact", obj["exact"])
    else:
        raise RuleError(f"rule needs a pattern, steps, prefix, or exact key: {obj}")
    return SkipAndCheckRule(steps=steps, exact_len=exact_len, **scope_kw)


def load_rules(text: str):
    """Parse rules JSON: a list of rule objects, or an object with ``rules``,
    optional ``defaults`` ([{app_id, req_type, queue}]) and ``cam_width``."""
    data = json.loads(text)
    if isinstance(data, list):
        data = {"rules": data}
    rules = [_rule_from_dict(o) for o in data.get("rules", [])]
    defaults = {
        (d.get("app_id", 0), d.get("req_type", 0)): d["queue"] for d in data.get("defaults", [])
    }
    return rules, defaults, data.get("cam_width", DEFAULT_CAM_WIDTH)


def dump_tables(tables: RuleTables) -> str:
    """Stable JSON dump of compiled tables, for inspection and golden tests."""
    return json.dumps(
        {
            "cam_width": tables.cam_width,
            "ram": [
                {
                    "state": e.state,
                    "field": e.field_index,
                    "skip": e.skip_len,
                    "check": e.check_len,
                    **({"queue": e.terminal_queue} if e.terminal_queue is not None else {}),
                    **({"required_len": e.required_len} if e.required_len is not None else {}),
                }
                for _, e in sorted(tables.ram.items())
            ],
            "cam": [
                {
                    "app_id": e.app_id,
                    "req_type": e.req_type,
                    "field": e.field_index,
                    "state": e.state,
                    "pattern_hex": e.pattern.hex(),
                    "next_state": e.next_state,
                }
                for e in tables.cam
            ],
            "start": [
                {"app_id": s[0], "req_type": s[1], "field": s[2], "state": st}
                for s, st in sorted(tables.start.items())
            ],
            "defaults": [
                {"app_id": k[0], "req_type": k[1], "queue": q}
                for k, q in sorted(tables.defaults.items())
            ],
        },
        indent=2,
    ) + "\n"
