"""Command-line entry points: IDL/rule compilation, simulation runs, fuzzing.

Simulation configs are JSON or TOML with two sections (both optional, all
keys have defaults): ``{"workload": {...WorkloadSpec fields...}, "sim":
{...SimConfig fields..., "gates": [[app_id, start_ns, end_ns], ...]},
"mode": "engine"}``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import bench, idl, rules


def _load_config(path: str) -> dict:
    text = Path(path).read_text()
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


def _dataclass_from(cls, data: dict, what: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise SystemExit(f"unknown {what} keys: {sorted(unknown)} (known: {sorted(known)})")
    return cls(**data)


def _cmd_compile_idl(args) -> int:
    source = Path(args.file).read_text()
    try:
        schemas = idl.parse_idl(source, app_id=args.app_id, req_type_start=args.req_type)
    except idl.IdlError as exc:
        print(f"{args.file}: {exc}", file=sys.stderr)
        return 1
    schemas = [idl.canonicalize(s) for s in schemas]
    text = idl.dump_schemas(schemas)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_compile_rules(args) -> int:
    try:
        rule_list, defaults, width = rules.load_rules(Path(args.file).read_text())
        tables = rules.compile_rules(rule_list, args.cam_width or width, defaults)
    except (rules.RuleError, json.JSONDecodeError) as exc:
        print(f"{args.file}: {exc}", file=sys.stderr)
        return 1
    text = rules.dump_tables(tables)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    print(
        f"compiled {len(rule_list)} rules: {len(tables.ram)} RAM entries, "
        f"{len(tables.cam)} CAM entries",
        file=sys.stderr,
    )
    return 0


def _cmd_sim(args) -> int:
    cfg = _load_config(args.config) if args.config else {}
    spec = _dataclass_from(bench.WorkloadSpec, cfg.get("workload", {}), "workload")
    sim_data = dict(cfg.get("sim", {}))
    sim_data["gates"] = [tuple(g) for g in sim_data.get("gates", [])]
    sim_cfg = _dataclass_from(bench.SimConfig, sim_data, "sim")
    mode = args.mode or cfg.get("mode", "engine")
    metrics = bench.run_workload(spec, sim_cfg, mode)
    if args.csv:
        bench.emit_report(metrics, args.csv)
    print(
        f"{spec.app}/{mode}: {metrics.completed}/{metrics.sent} completed, "
        f"{metrics.throughput_rps:,.0f} req/s (simulated), "
        f"p50 {metrics.p50_us:.1f} us, p99 {metrics.p99_us:.1f} us, "
        f"retransmissions {metrics.retransmissions}, "
        f"drops nm={metrics.dropped_no_match} nf={metrics.dropped_no_first} "
        f"rc={metrics.dropped_reconfig}, cycles {metrics.total_cycles}"
    )
    if metrics.sentinel_hits:
        print(f"ownership sentinel fired {metrics.sentinel_hits} times", file=sys.stderr)
        return 1
    return 0


def _parse_hostport(text: str):
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def _udp_world(spec: bench.WorkloadSpec):
    from .idl import parse_idl
    from .rsd import RsdConfig, RsdEngine
    from .rules import compile_rules
    from .transport import Endpoint

    req_schema, resp_schema = parse_idl(bench.PINGPONG_IDL, app_id=spec.app_id)
    server_tables = compile_rules(bench.pingpong_rules(spec))
    client_tables = compile_rules([], defaults={(spec.app_id, resp_schema.req_type): 0})

    def make(name, tables):
        return Endpoint(name, dispatcher=RsdEngine(tables, RsdConfig()),
                        schemas=[req_schema, resp_schema])

    return req_schema, resp_schema, make("server", server_tables), make("client", client_tables)


def _cmd_udp_pong(args) -> int:
    from .udp import UdpNode, pingpong_server

    spec = bench.WorkloadSpec(n_app_threads=args.threads, n_steps=args.steps)
    _, resp_schema, server, _ = _udp_world(spec)
    node = UdpNode(server, bind=_parse_hostport(args.bind))
    pingpong_server(node, resp_schema)
    print(f"echo server on {node.address[0]}:{node.address[1]} (ctrl-c to stop)")
    try:
        while True:
            node.poll(timeout=0.2)
    except KeyboardInterrupt:
        pass
    finally:
        node.close()
    print(f"served {server.metrics['completed_requests']} requests")
    return 0


def _cmd_udp_ping(args) -> int:
    import time

    from .udp import UdpNode
    from .wire import Request

    spec = bench.WorkloadSpec(request_size=args.size, n_steps=args.steps)
    req_schema, _, _, client = _udp_world(spec)
    node = UdpNode(client, peer=_parse_hostport(args.connect))
    state = {"completed": 0, "t0": 0}
    rtts = []

    def issue():
        state["t0"] = time.monotonic_ns()
        client.send_req(Request.of(req_schema, body=bench.pingpong_body(spec, 0)), state["t0"])

    def on_response(queue, request, now):
        rtts.append(time.monotonic_ns() - state["t0"])
        state["completed"] += 1
        if state["completed"] < args.count:
            issue()

    client.on_request = on_response
    deadline = time.monotonic() + args.timeout
    issue()
    while state["completed"] < args.count and time.monotonic() < deadline:
        node.poll(timeout=0.05)
    node.close()
    done = state["completed"]
    print(f"{done}/{args.count} responses", end="")
    if rtts:
        print(f", median rtt {sorted(rtts)[len(rtts) // 2] / 1e3:.0f} us", end="")
    print()
    return 0 if done == args.count else 1


def _cmd_fuzz(args) -> int:
    stats = bench.fuzz_match(args.seed, args.iters)
    print(
        f"fuzz-match: {stats['pairs']} pairs, {stats['matched']} matched, "
        f"{stats['disagreements']} disagreements, {stats['skipped_sets']} uncompilable sets skipped"
    )
    if stats["disagreements"]:
        print(json.dumps(stats["first_failure"], indent=2), file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="qn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile-idl", help="compile an IDL file to a schema descriptor")
    p.add_argument("file")
    p.add_argument("--app-id", type=int, default=0)
    p.add_argument("--req-type", type=int, default=0, help="req_type of the first request block")
    p.add_argument("-o", "--output")
    p.set_defaults(fn=_cmd_compile_idl)

    p = sub.add_parser("compile-rules", help="compile rules JSON to RAM/CAM tables")
    p.add_argument("file")
    p.add_argument("-W", "--cam-width", type=int, default=None)
    p.add_argument("-o", "--output")
    p.set_defaults(fn=_cmd_compile_rules)

    p = sub.add_parser("sim", help="run a workload under the deterministic simulator")
    p.add_argument("--config", help="JSON or TOML config file")
    p.add_argument("--csv", help="append a metrics row to this CSV")
    p.add_argument("--mode", choices=["engine", "software"])
    p.set_defaults(fn=_cmd_sim)

    p = sub.add_parser("fuzz-match", help="engine vs reference-matcher equivalence fuzzer")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iters", type=int, default=10_000)
    p.set_defaults(fn=_cmd_fuzz)

    p = sub.add_parser("udp-pong", help="echo server over real UDP (manual runs)")
    p.add_argument("--bind", default="127.0.0.1:9000", help="host:port to listen on")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--steps", type=int, default=1)
    p.set_defaults(fn=_cmd_udp_pong)

    p = sub.add_parser("udp-ping", help="closed-loop client over real UDP")
    p.add_argument("--connect", required=True, help="server host:port")
    p.add_argument("-n", "--count", type=int, default=100)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--timeout", type=float, default=30.0)
    p.set_defaults(fn=_cmd_udp_ping)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
