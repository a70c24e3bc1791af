"""Workloads and the simulation runner: PingPong, a partitioned in-memory KV
service with a Zipfian closed-loop generator, an equivalent software
dispatcher used as the baseline, metrics collection and CSV reporting.

Throughput and latency are reported in simulated time; absolute hardware
figures are out of scope, relative trends and dispatch correctness are the
point.  The software baseline must agree with the engine on every queue
decision; KV runs also carry an ownership sentinel that fires if a request
ever reaches a thread that does not own its key's partition.
"""

from __future__ import annotations

import bisect
import csv
import os
import random
from collections import OrderedDict, deque
from dataclasses import dataclass, field

from . import wire
from .idl import parse_idl
from .netsim import Link, LinkModel, ReconfigGate, Simulator
from .rsd import DispatchResult, DropReason, RsdConfig, RsdEngine
from .rules import SkipAndCheckRule, Step, compile_rules, load_rules, oracle_match
from .transport import Endpoint
from .wire import HEADER_BLOCK, TLV_OVERHEAD, Request

PINGPONG_IDL = """
request Ping { string body = 0 [dispatch]; }
request Pong { string body = 0 [dispatch]; }
"""

KV_IDL = """
request Get { string key = 0 [dispatch]; }
request GetResp { string value = 0 [dispatch]; }
"""


@dataclass
class WorkloadSpec:
    app: str = "pingpong"
    n_requests: int = 10_000
    request_size: int = 128          # on-wire frame bytes per request (pingpong)
    n_app_threads: int = 1
    n_partitions: int = 24
    zipf_s: float = 0.9
    n_keys: int = 10_000
    key_size: int = 62
    value_size: int = 64
    n_steps: int = 1                 # skip-and-checks in generated pingpong rules
    concurrency: int = 8             # closed-loop generator slots
    seed: int = 1
    app_id: int = 0
    rules_json: str | None = None    # JSON text overriding the generated rules

    def __post_init__(self):
        if self.app not in ("pingpong", "kv"):
            raise ValueError(f"unknown app {self.app!r}")
        if self.app == "kv" and self.n_partitions % self.n_app_threads:
            raise ValueError(
                f"{self.n_partitions} partitions do not map evenly onto {self.n_app_threads} threads"
            )
        if self.app == "pingpong":
            if not 1 <= self.n_app_threads <= 26:  # threads keyed by a letter prefix
                raise ValueError("pingpong supports 1..26 app threads")
            body = self.request_size - HEADER_BLOCK - TLV_OVERHEAD
            if body < max(self.n_steps, 1):
                raise ValueError(f"request_size {self.request_size} too small for {self.n_steps} steps")


@dataclass
class SimConfig:
    seed: int = 0
    loss_p: float = 0.0
    dup_p: float = 0.0
    reorder_p: float = 0.0
    reorder_d: int = 8
    delay: int = 2_000               # one-way link delay, ns
    jitter: int = 0
    gates: list = field(default_factory=list)  # (app_id, start_ns, end_ns)
    tick_interval: int = 10_000_000
    n_parallel_rsd: int = 4
    max_events: int | None = 50_000_000

    def link_model(self, direction: int) -> LinkModel:
        return LinkModel(
            seed=self.seed * 2 + direction,
            loss_p=self.loss_p,
            dup_p=self.dup_p,
            reorder_p=self.reorder_p,
            reorder_d=self.reorder_d,
            delay=self.delay,
            jitter=self.jitter,
        )


CSV_FIELDS = [
    "app", "mode", "n_requests", "request_size", "n_app_threads", "n_partitions",
    "zipf_s", "n_steps", "concurrency", "wl_seed", "sim_seed", "loss_p", "dup_p",
    "reorder_p", "delay_ns", "completed", "sent", "failed", "retransmissions",
    "sim_ns", "throughput_rps", "p50_us", "p99_us", "dispatched", "stash_hits",
    "stash_hit_ratio", "dropped_no_match", "dropped_no_first", "dropped_reconfig",
    "total_cycles", "comparisons", "sentinel_hits",
]


@dataclass
class Metrics:
    app: str
    mode: str
    n_requests: int
    request_size: int
    n_app_threads: int
    n_partitions: int
    zipf_s: float
    n_steps: int
    concurrency: int
    wl_seed: int
    sim_seed: int
    loss_p: float
    dup_p: float
    reorder_p: float
    delay_ns: int
    completed: int
    sent: int
    failed: int
    retransmissions: int
    sim_ns: int
    throughput_rps: float
    p50_us: float
    p99_us: float
    dispatched: int
    stash_hits: int
    stash_hit_ratio: float
    dropped_no_match: int
    dropped_no_first: int
    dropped_reconfig: int
    total_cycles: int
    comparisons: int
    sentinel_hits: int
    latencies: list = field(default_factory=list, repr=False)
    decisions: dict | None = field(default=None, repr=False)
    endpoint_metrics: dict = field(default_factory=dict, repr=False)
    link_counters: dict = field(default_factory=dict, repr=False)


def percentile(samples: list, q: float) -> float:
    if not samples:
        return 0.0
    ordered = sorted(samples)
    return float(ordered[min(len(ordered) - 1, int(q * (len(ordered) - 1) + 0.5))])


def emit_report(metrics, path: str):
    """Append one CSV row per Metrics; writes the header on a fresh file."""
    rows = metrics if isinstance(metrics, (list, tuple)) else [metrics]
    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(CSV_FIELDS)
        for m in rows:
            writer.writerow([getattr(m, name) for name in CSV_FIELDS])


class ZipfSampler:
    """Bounded Zipfian over 0..n-1 with exponent s (s=0 degenerates to uniform)."""

    def __init__(self, n: int, s: float, rng: random.Random):
        self._rng = rng
        cum = []
        total = 0.0
        for k in range(1, n + 1):
            total += k ** -s
            cum.append(total)
        self._cum = cum
        self._total = total

    def sample(self) -> int:
        return bisect.bisect_left(self._cum, self._rng.random() * self._total)


class SoftwareDispatcher:
    """Straw-man per-request dispatcher: the reference matcher in a loop.

    Stands in for the host-side dispatcher stage of the software baseline;
    a request-id cache mirrors the role of the hardware stash for non-first
    packets.  ``comparisons`` counts rule steps examined, the baseline's unit
    of per-request work.
    """

    def __init__(self, rules, defaults=None, cache_size: int = 4096):
        self.rules = list(rules)
        self.defaults = dict(defaults or {})
        self._scope_by_pair: dict[tuple[int, int], tuple[int, int, int]] = {}
        for r in self.rules:
            pair = (r.app_id, r.req_type)
            if self._scope_by_pair.setdefault(pair, r.scope) != r.scope:
                raise ValueError(f"rules for {pair} target multiple fields")
        self._cache: OrderedDict[int, int] = OrderedDict()
        self._cache_size = cache_size
        self.metrics = {
            "dispatched": 0,
            "stash_hits": 0,
            "dropped_no_match": 0,
            "dropped_no_first": 0,
            "dropped_reconfig": 0,
            "total_cycles": 0,
            "comparisons": 0,
        }

    def note_reconfig_drop(self):
        self.metrics["dropped_reconfig"] += 1

    def dispatch(self, pkt: wire.QnpPacket) -> DispatchResult:
        hdr = pkt.header
        if hdr.pkt_seq_num_in_req > 0:
            queue = self._cache.get(hdr.req_id)
            if queue is None:
                self.metrics["dropped_no_first"] += 1
                return DispatchResult(None, DropReason.NO_FIRST_PACKET, 0)
            self.metrics["dispatched"] += 1
            self.metrics["stash_hits"] += 1
            return DispatchResult(queue, None, 0, stash_hit=True)
        queue = None
        scope = self._scope_by_pair.get((hdr.app_id, hdr.req_type))
        if scope is not None:
            data = self._extract(pkt.payload, scope[2])
            if data is not None:
                queue = self._match(data, scope)
        if queue is None:
            queue = self.defaults.get((hdr.app_id, hdr.req_type))
        if queue is None:
            self.metrics["dropped_no_match"] += 1
            return DispatchResult(None, DropReason.NO_MATCH, 0)
        self._cache[hdr.req_id] = queue
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        self.metrics["dispatched"] += 1
        return DispatchResult(queue, None, 0)

    def _match(self, data: bytes, scope) -> int | None:
        for rule in self.rules:
            if rule.scope != scope:
                continue
            self.metrics["comparisons"] += len(rule.steps)
            if oracle_match((rule,), data, scope) is not None:
                return rule.queue
        return None

    @staticmethod
    def _extract(payload: bytes, field_index: int) -> bytes | None:
        try:
            for index, _kind, raw in wire.iter_records(payload):
                if index == field_index:
                    return raw
        except wire.CodecError:
            return None
        return None


class _RecordingDispatcher:
    """Capture the first-packet queue decision per request id."""

    def __init__(self, inner):
        self.inner = inner
        self.decisions: dict[int, int] = {}

    def dispatch(self, pkt):
        result = self.inner.dispatch(pkt)
        if pkt.header.pkt_seq_num_in_req == 0 and result.queue is not None:
            self.decisions[pkt.header.req_id] = result.queue
        return result

    def note_reconfig_drop(self):
        self.inner.note_reconfig_drop()

    @property
    def metrics(self):
        return self.inner.metrics


def _make_dispatcher(mode, rules, defaults, sim_cfg):
    if mode == "software":
        return SoftwareDispatcher(rules, defaults)
    tables = compile_rules(rules, defaults=defaults)
    return RsdEngine(tables, RsdConfig(n_parallel=sim_cfg.n_parallel_rsd))


def _gate_from(cfg: SimConfig) -> ReconfigGate | None:
    if not cfg.gates:
        return None
    gate = ReconfigGate()
    for app_id, start, end in cfg.gates:
        gate.add(app_id, start, end)
    return gate


def _wire_pair(sim: Simulator, cfg: SimConfig, client: Endpoint, server: Endpoint):
    c2s = Link(sim, cfg.link_model(0), lambda f: server.on_frame(f, sim.now))
    s2c = Link(sim, cfg.link_model(1), lambda f: client.on_frame(f, sim.now))
    client.send_frame = c2s.send
    server.send_frame = s2c.send
    return c2s, s2c


def _tick_loop(sim: Simulator, cfg: SimConfig, endpoints, done):
    def tick():
        for ep in endpoints:
            ep.tick(sim.now)
        if not done():
            sim.schedule(cfg.tick_interval, tick)

    sim.schedule(cfg.tick_interval, tick)


class _ClosedLoopGen:
    """Fixed-window closed loop: one outstanding request per slot."""

    def __init__(self, sim, client, n_requests, concurrency, build_request):
        self.sim = sim
        self.client = client
        self.remaining = n_requests
        self.n_requests = n_requests
        self.build_request = build_request
        self.concurrency = concurrency
        self.issued = 0
        self.completed = 0
        self.failed = 0
        self.latencies: list[int] = []
        self._pending: deque[int] = deque()
        client.on_request = self._on_response
        client.on_delivery_failure = self._on_failure

    def start(self):
        for _ in range(min(self.concurrency, self.remaining)):
            self._issue()

    def _issue(self):
        if self.remaining <= 0:
            return
        self.remaining -= 1
        request = self.build_request(self.issued)
        self.issued += 1
        self._pending.append(self.sim.now)
        self.client.send_req(request, self.sim.now)

    def _on_response(self, queue, request, now):
        if self._pending:
            self.latencies.append(now - self._pending.popleft())
        self.completed += 1
        self._issue()

    def _on_failure(self, req_id):
        self.failed += 1
        if self._pending:
            self._pending.popleft()
        self._issue()

    @property
    def done(self) -> bool:
        return self.completed + self.failed >= self.n_requests


def _collect(spec, cfg, mode, gen, sim, client, server, dispatcher, links, sentinel=0):
    eng = dispatcher.metrics
    sim_ns = max(sim.now, 1)
    return Metrics(
        app=spec.app,
        mode=mode,
        n_requests=spec.n_requests,
        request_size=spec.request_size,
        n_app_threads=spec.n_app_threads,
        n_partitions=spec.n_partitions,
        zipf_s=spec.zipf_s,
        n_steps=spec.n_steps,
        concurrency=spec.concurrency,
        wl_seed=spec.seed,
        sim_seed=cfg.seed,
        loss_p=cfg.loss_p,
        dup_p=cfg.dup_p,
        reorder_p=cfg.reorder_p,
        delay_ns=cfg.delay,
        completed=gen.completed,
        sent=gen.issued,
        failed=gen.failed,
        retransmissions=client.metrics["retransmissions"] + server.metrics["retransmissions"],
        sim_ns=sim.now,
        throughput_rps=gen.completed * 1e9 / sim_ns,
        p50_us=percentile(gen.latencies, 0.50) / 1e3,
        p99_us=percentile(gen.latencies, 0.99) / 1e3,
        dispatched=eng["dispatched"],
        stash_hits=eng["stash_hits"],
        stash_hit_ratio=eng["stash_hits"] / max(eng["dispatched"], 1),
        dropped_no_match=eng["dropped_no_match"],
        dropped_no_first=eng["dropped_no_first"],
        dropped_reconfig=eng["dropped_reconfig"],
        total_cycles=eng["total_cycles"],
        comparisons=eng.get("comparisons", 0),
        sentinel_hits=sentinel,
        latencies=gen.latencies,
        endpoint_metrics={"client": dict(client.metrics), "server": dict(server.metrics)},
        link_counters={"c2s": dict(links[0].counters), "s2c": dict(links[1].counters)},
    )


def pingpong_rules(spec: WorkloadSpec):
    """One uniform-shape rule per app thread, keyed by the body's first byte."""
    rules = []
    for t in range(spec.n_app_threads):
        steps = (Step(0, bytes([ord("A") + t])),) + tuple(Step(0, b"Q") for _ in range(spec.n_steps - 1))
        rules.append(SkipAndCheckRule(spec.app_id, 0, 0, steps, queue=t))
    return rules


def pingpong_body(spec: WorkloadSpec, thread: int) -> bytes:
    body_len = spec.request_size - HEADER_BLOCK - TLV_OVERHEAD
    body = bytes([ord("A") + thread]) + b"Q" * (spec.n_steps - 1)
    return body + b"." * (body_len - len(body))


def run_pingpong(spec: WorkloadSpec, cfg: SimConfig, mode: str = "engine",
                 record_decisions: bool = False) -> Metrics:
    """Closed-loop echo: the server returns a response of equal size, the ACK
    for the request riding on it."""
    req_schema, resp_schema = parse_idl(PINGPONG_IDL, app_id=spec.app_id)
    if spec.rules_json is not None:
        rules, defaults, _ = load_rules(spec.rules_json)
    else:
        rules, defaults = pingpong_rules(spec), {}
    sim = Simulator()
    server_disp = _make_dispatcher(mode, rules, defaults, cfg)
    if record_decisions:
        server_disp = _RecordingDispatcher(server_disp)
    client_disp = _make_dispatcher(mode, [], {(spec.app_id, resp_schema.req_type): 0}, cfg)
    client = Endpoint("client", dispatcher=client_disp, schemas=[req_schema, resp_schema])
    server = Endpoint("server", dispatcher=server_disp, schemas=[req_schema, resp_schema],
                      gate=_gate_from(cfg))
    links = _wire_pair(sim, cfg, client, server)

    def handle(queue, request, now):
        server.send_req(Request.of(resp_schema, body=request.values[0]), now)

    server.on_request = handle

    rng = random.Random(spec.seed)
    targets = [rng.randrange(spec.n_app_threads) for _ in range(spec.n_requests)]
    gen = _ClosedLoopGen(
        sim, client, spec.n_requests, spec.concurrency,
        lambda i: Request.of(req_schema, body=pingpong_body(spec, targets[i])),
    )
    _tick_loop(sim, cfg, [client, server], lambda: gen.done)
    gen.start()
    sim.run(stop=lambda: gen.done, max_events=cfg.max_events)
    metrics = _collect(spec, cfg, mode, gen, sim, client, server, server_disp, links)
    if record_decisions:
        metrics.decisions = server_disp.decisions
    return metrics


def kv_partition_rules(spec: WorkloadSpec):
    """Prefix rules mapping each partition's 3-byte key prefix to its owner."""
    per_thread = spec.n_partitions // spec.n_app_threads
    return [
        SkipAndCheckRule(spec.app_id, 0, 0, (Step(0, f"P{p:02d}".encode()),), queue=p // per_thread)
        for p in range(spec.n_partitions)
    ]


def kv_key(spec: WorkloadSpec, partition: int, rank: int) -> bytes:
    return f"P{partition:02d}".encode() + str(rank).zfill(spec.key_size - 3).encode()


def run_kv(spec: WorkloadSpec, cfg: SimConfig, mode: str = "engine",
           record_decisions: bool = False) -> Metrics:
    """Partitioned GET workload: uniform partition pick, Zipfian key within it."""
    get_schema, resp_schema = parse_idl(KV_IDL, app_id=spec.app_id)
    if spec.rules_json is not None:
        rules, defaults, _ = load_rules(spec.rules_json)
    else:
        rules, defaults = kv_partition_rules(spec), {}
    per_thread = spec.n_partitions // spec.n_app_threads
    keys_per_part = spec.n_keys // spec.n_partitions

    shards: dict[int, dict[bytes, bytes]] = {t: {} for t in range(spec.n_app_threads)}
    for p in range(spec.n_partitions):
        for r in range(keys_per_part):
            key = kv_key(spec, p, r)
            shards[p // per_thread][key] = (key * (spec.value_size // len(key) + 1))[: spec.value_size]

    sim = Simulator()
    server_disp = _make_dispatcher(mode, rules, defaults, cfg)
    if record_decisions:
        server_disp = _RecordingDispatcher(server_disp)
    client_disp = _make_dispatcher(mode, [], {(spec.app_id, resp_schema.req_type): 0}, cfg)
    client = Endpoint("client", dispatcher=client_disp, schemas=[get_schema, resp_schema])
    server = Endpoint("server", dispatcher=server_disp, schemas=[get_schema, resp_schema],
                      gate=_gate_from(cfg))
    links = _wire_pair(sim, cfg, client, server)

    sentinel = [0]

    def handle(queue, request, now):
        key = bytes(request.values[0])
        value = shards.get(queue, {}).get(key)
        if value is None or int(key[1:3]) // per_thread != queue:
            sentinel[0] += 1
            value = b""
        server.send_req(Request.of(resp_schema, value=value), now)

    server.on_request = handle

    rng = random.Random(spec.seed)
    zipf = ZipfSampler(keys_per_part, spec.zipf_s, rng)
    draws = [(rng.randrange(spec.n_partitions), zipf.sample()) for _ in range(spec.n_requests)]
    gen = _ClosedLoopGen(
        sim, client, spec.n_requests, spec.concurrency,
        lambda i: Request.of(get_schema, key=kv_key(spec, draws[i][0], draws[i][1])),
    )
    _tick_loop(sim, cfg, [client, server], lambda: gen.done)
    gen.start()
    sim.run(stop=lambda: gen.done, max_events=cfg.max_events)
    metrics = _collect(spec, cfg, mode, gen, sim, client, server, server_disp, links, sentinel[0])
    if record_decisions:
        metrics.decisions = server_disp.decisions
    return metrics


def run_workload(spec: WorkloadSpec, cfg: SimConfig, mode: str = "engine",
                 record_decisions: bool = False) -> Metrics:
    runner = run_kv if spec.app == "kv" else run_pingpong
    return runner(spec, cfg, mode, record_decisions)


def run_software_baseline(spec: WorkloadSpec, cfg: SimConfig,
                          record_decisions: bool = False) -> Metrics:
    """Same workload, dispatch decided by the reference matcher on the host."""
    return run_workload(spec, cfg, "software", record_decisions)


def _random_rule_set(rng: random.Random, alphabet: bytes = b"ABCD"):
    """Draw a compilable rule set: 1-3 scopes, uniform shapes, shared-prefix-prone
    checks over a small alphabet so compiled machines actually share states."""
    rules = []
    pairs = rng.sample([(a, t) for a in range(3) for t in range(3)], rng.randint(1, 3))
    for app_id, req_type in pairs:
        field_index = rng.randint(0, 2)
        shape = [(rng.randint(0, 4), rng.randint(1, 10)) for _ in range(rng.randint(1, 4))]
        for _ in range(rng.randint(1, 5)):
            steps = tuple(
                Step(skip, bytes(rng.choice(alphabet) for _ in range(ln))) for skip, ln in shape
            )
            exact_len = None
            if rng.random() < 0.15:
                scan = sum(skip + ln for skip, ln in shape)
                exact_len = rng.randint(scan, scan + 4)
            rules.append(
                SkipAndCheckRule(app_id, req_type, field_index, steps, rng.randint(0, 7), exact_len)
            )
    return rules


def _random_input(rng: random.Random, rules, scope, alphabet: bytes = b"ABCDE") -> bytes:
    """Bias inputs toward near-matches of a random rule in scope."""
    in_scope = [r for r in rules if r.scope == scope]
    rule = rng.choice(in_scope)
    data = bytearray()
    for st in rule.steps:
        data += bytes(rng.choice(alphabet) for _ in range(st.skip))
        data += st.check
    for _ in range(rng.randint(0, 3)):  # mutate a few positions
        if data:
            data[rng.randrange(len(data))] = rng.choice(alphabet)
    tail = rng.randint(-4, 6)
    if tail >= 0:
        data += bytes(rng.choice(alphabet) for _ in range(tail))
    else:
        data = data[:tail]
    return bytes(data)


def fuzz_match(seed: int, iters: int, inputs_per_set: int = 20) -> dict:
    """Compare the compiled engine against the reference matcher.

    Each iteration is one (rule-set, input) pair; rule sets are redrawn every
    ``inputs_per_set`` pairs.  Returns counts plus the first disagreement, if
    any (which the caller should treat as a hard failure).
    """
    from .rules import CompileError  # local: avoids polluting the module surface
    from .rsd import engine_match

    rng = random.Random(seed)
    stats = {"pairs": 0, "disagreements": 0, "matched": 0, "skipped_sets": 0, "first_failure": None}
    rules, tables, engine, scopes = [], None, None, []
    remaining = 0
    while stats["pairs"] < iters:
        if remaining == 0:
            rules = _random_rule_set(rng)
            try:
                tables = compile_rules(rules)
            except CompileError:
                stats["skipped_sets"] += 1
                continue
            engine = RsdEngine(tables, RsdConfig(n_parallel=1))
            scopes = sorted({r.scope for r in rules})
            remaining = inputs_per_set
        scope = rng.choice(scopes)
        data = _random_input(rng, rules, scope)
        remaining -= 1
        stats["pairs"] += 1
        expect = oracle_match(rules, data, scope)
        got = engine_match(tables, scope, data, engine)
        if expect == got:
            if expect is not None:
                stats["matched"] += 1
        else:
            stats["disagreements"] += 1
            if stats["first_failure"] is None:
                stats["first_failure"] = {
                    "scope": scope,
                    "input": data.hex(),
                    "oracle": expect,
                    "engine": got,
                    "rules": [(r.shape, [s.check.hex() for s in r.steps], r.queue, r.exact_len) for r in rules if r.scope == scope],
                }
    return stats


def run_multiapp_gate(cfg: SimConfig, *, n_apps: int = 2, send_period: int = 200_000,
                      send_duration: int = 150_000_000, request_size: int = 128,
                      horizon: int = 5_000_000_000) -> dict:
    """Open-loop PingPong per app at equal offered load, with optional gate
    windows from ``cfg.gates``; returns per-app completion timestamps."""
    sim = Simulator()
    by_app = {a: parse_idl(PINGPONG_IDL, app_id=a) for a in range(n_apps)}
    schemas = [s for pair in by_app.values() for s in pair]
    rules = [SkipAndCheckRule(a, 0, 0, (Step(0, b"A"),), queue=a) for a in range(n_apps)]
    defaults = {(a, 1): a for a in range(n_apps)}
    tables = compile_rules(rules)
    engine = RsdEngine(tables, RsdConfig(n_parallel=cfg.n_parallel_rsd))
    gate = _gate_from(cfg)
    client_disp = _make_dispatcher("engine", [], defaults, cfg)
    client = Endpoint("client", dispatcher=client_disp, schemas=schemas)
    server = Endpoint("server", dispatcher=engine, schemas=schemas, gate=gate)
    links = _wire_pair(sim, cfg, client, server)

    body = b"A" + b"." * (request_size - HEADER_BLOCK - TLV_OVERHEAD - 1)

    def handle(queue, request, now):
        server.send_req(Request.of(by_app[queue][1], body=request.values[0]), now)

    server.on_request = handle

    completions: dict[int, list[int]] = {a: [] for a in range(n_apps)}
    client.on_request = lambda queue, request, now: completions[queue].append(now)

    sends_per_app = send_duration // send_period
    for a in range(n_apps):
        for k in range(sends_per_app):
            sim.schedule_at(
                k * send_period,
                lambda a=a: client.send_req(Request.of(by_app[a][0], body=body), sim.now),
            )

    def done():
        if sim.now > horizon:
            return True
        return all(len(completions[a]) >= sends_per_app for a in range(n_apps))

    _tick_loop(sim, cfg, [client, server], done)
    sim.run(stop=done, max_events=cfg.max_events)
    return {
        "completions": completions,
        "sends_per_app": sends_per_app,
        "engine": dict(engine.metrics),
        "client": dict(client.metrics),
        "server": dict(server.metrics),
        "links": [dict(l.counters) for l in links],
        "sim_ns": sim.now,
    }
