"""Command-line entry point: service runners, policy administration, frame
synthesis, and the benchmark.

One binary, subcommand per role::

    flowgate pasp --config pasp.conf
    flowgate aasp --config aasp.conf
    flowgate pdp  --config pdp.conf
    flowgate dep  --config dep.conf
    flowgate policy create --pasp 127.0.0.1:7301 --file trip.policy
    flowgate policy list   --pasp 127.0.0.1:7301
    flowgate frame build --eth 02:..:01,01:0c:cd:01:00:01 --goose 5 --pad 60
    flowgate bench run --active --peer 127.0.0.1:7121 --n 5000 --out results/
    flowgate bench run --passive --bind 127.0.0.1:17210 --echo-to 127.0.0.1:7221
    flowgate bench topo --config topo.conf
    flowgate bench report --in results/
"""

from __future__ import annotations

import argparse
import signal
import sys
import threading
import time
from typing import Optional

from .errors import FlowgateError
from .frames import (
    ETHERTYPE_GOOSE,
    ETHERTYPE_IPV4,
    ETHERTYPE_SV,
    ETHERTYPE_VLAN,
    ethernet_frame,
    ipv4_packet,
    tcp_segment,
    udp_datagram,
    vlan_tag,
    _fixed_pdu,
)
from .policy_text import format_policy, parse_policy
from .services.config import parse_address, parse_config_file
from .wire.auth import (
    AuthScheme,
    Ed25519Authenticator,
    HmacSha512Authenticator,
    InboundGate,
    NoopAuthenticator,
    SCHEME_NAMES,
    seal,
)
from .wire.messages import (
    CrudOp,
    CrudStatus,
    PolicyCrudRequest,
    PolicyCrudResponse,
    PolicyExchangeComplete,
    PolicyExchangeRequest,
    ProtocolEnvelope,
)
from .wire.transport import oneshot


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FlowgateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowgate")
    sub = parser.add_subparsers(dest="command", required=True)

    for role in ("pasp", "aasp", "pdp", "dep"):
        p = sub.add_parser(role, help=f"run the {role} service")
        p.add_argument("--config", required=True)
        p.set_defaults(func=lambda args, role=role: _run_service(role, args))

    policy = sub.add_parser("policy", help="administer policies")
    policy_sub = policy.add_subparsers(dest="op", required=True)
    for op in ("create", "read", "update", "delete", "list"):
        p = policy_sub.add_parser(op)
        p.add_argument("--pasp", required=True, help="HOST:PORT of the administration point")
        p.add_argument("--pasp-id", default="pasp", help="peer id for sealing (default: pasp)")
        p.add_argument("--identity", default="operator")
        p.add_argument("--scheme", default="noop", choices=sorted(SCHEME_NAMES))
        p.add_argument("--secret", help="hex shared secret (hmac-sha512)")
        p.add_argument("--private-key", help="hex signing key (ed25519)")
        p.add_argument("--peer-pubkey", help="hex verify key of the administration point")
        if op in ("create", "update"):
            p.add_argument("--file", required=True, help="policy file")
        if op in ("read", "delete"):
            p.add_argument("--id", required=True, help="policy id")
        p.set_defaults(func=_run_policy)

    frame = sub.add_parser("frame", help="synthesize frames for fixtures")
    frame_sub = frame.add_subparsers(dest="op", required=True)
    build = frame_sub.add_parser("build")
    build.add_argument("--eth", required=True, metavar="SRC,DST")
    build.add_argument("--ethertype", type=lambda v: int(v, 0))
    build.add_argument("--vlan", metavar="VID[,PCP]")
    build.add_argument("--goose", type=lambda v: int(v, 0), metavar="APPID")
    build.add_argument("--sv", type=lambda v: int(v, 0), metavar="APPID")
    build.add_argument("--ipv4", metavar="SRC,DST")
    build.add_argument("--udp", metavar="SPORT,DPORT")
    build.add_argument("--tcp", metavar="SPORT,DPORT")
    build.add_argument("--flags", type=lambda v: int(v, 0), default=0x18)
    build.add_argument("--payload", default="", help="hex payload")
    build.add_argument("--pad", type=int, default=0, help="pad frame to this length")
    build.add_argument("--pcap-out", help="append the frame to a pcap file")
    build.set_defaults(func=_run_frame_build)

    bench = sub.add_parser("bench", help="round-trip latency benchmark")
    bench_sub = bench.add_subparsers(dest="op", required=True)

    run = bench_sub.add_parser("run")
    mode = run.add_mutually_exclusive_group(required=True)
    mode.add_argument("--active", action="store_true")
    mode.add_argument("--passive", action="store_true")
    run.add_argument("--peer", help="active: HOST:PORT to send frames to")
    run.add_argument("--bind", help="local HOST:PORT of this endpoint")
    run.add_argument("--echo-to", help="passive: HOST:PORT echoes are sent to (default: sender)")
    run.add_argument("--n", type=int, default=5000)
    run.add_argument("--warmup", type=int, default=0)
    run.add_argument("--timeout", type=int, default=1000, help="per-packet timeout (ms)")
    run.add_argument("--out", help="directory for samples.csv and report.json")
    run.add_argument("--scheme-label", default="unknown", help="scheme column in the report")
    run.add_argument("--direct", action="store_true", help="bypass enforcement (baseline)")
    run.set_defaults(func=_run_bench)

    topo = bench_sub.add_parser("topo")
    topo.add_argument("--config", required=True)
    topo.set_defaults(func=_run_topo)

    report = bench_sub.add_parser("report")
    report.add_argument("--in", dest="indir", required=True)
    report.set_defaults(func=_run_report)

    return parser


# -- services --------------------------------------------------------------


def _run_service(role: str, args) -> int:
    from .services import AaspService, DepService, PaspService, PdpService

    import logging

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    cfg = parse_config_file(args.config)
    service_cls = {"pasp": PaspService, "aasp": AaspService, "pdp": PdpService, "dep": DepService}[role]
    service = service_cls(cfg)
    service.start()
    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        while not stop.is_set():
            time.sleep(0.2)
    finally:
        service.stop()
    return 0


# -- policy administration ---------------------------------------------------


def _client_auth(args):
    scheme = SCHEME_NAMES[args.scheme]
    if scheme is AuthScheme.NOOP:
        return NoopAuthenticator()
    if scheme is AuthScheme.HMAC_SHA512:
        if not args.secret:
            raise FlowgateError("--secret is required for hmac-sha512")
        return HmacSha512Authenticator({args.pasp_id: bytes.fromhex(args.secret)})
    if not args.private_key:
        raise FlowgateError("--private-key is required for ed25519")
    peers = {}
    if args.peer_pubkey:
        peers[args.pasp_id] = bytes.fromhex(args.peer_pubkey)
    return Ed25519Authenticator(bytes.fromhex(args.private_key), peers)


def _run_policy(args) -> int:
    auth = _client_auth(args)
    gate = InboundGate(auth)
    addr = parse_address(args.pasp)
    now = int(time.time() * 1000)

    if args.op == "list":
        body = PolicyExchangeRequest()
    else:
        op = {"create": CrudOp.CREATE, "read": CrudOp.READ,
              "update": CrudOp.UPDATE, "delete": CrudOp.DELETE}[args.op]
        if op in (CrudOp.CREATE, CrudOp.UPDATE):
            with open(args.file, encoding="utf-8") as fp:
                policy = parse_policy(fp.read())
            body = PolicyCrudRequest(op, policy.id, policy)
        else:
            body = PolicyCrudRequest(op, args.id)

    env = ProtocolEnvelope(args.identity, int(time.time() * 1e6) % 2**62, now, body)
    reply = oneshot(addr, seal(env, auth, args.pasp_id), await_reply=True)
    gate.open(reply, int(time.time() * 1000))

    if isinstance(reply.body, PolicyExchangeComplete):
        print(f"revision {reply.body.revision}, {len(reply.body.policies)} policies")
        for p in sorted(reply.body.policies, key=lambda p: p.id):
            print(f"  {p.id}  {p.action.value}")
        return 0
    if isinstance(reply.body, PolicyCrudResponse):
        print(f"status: {reply.body.status.name}")
        for violation in reply.body.violations:
            print(f"  violation: {violation}")
        if reply.body.policy is not None and args.op == "read":
            print(format_policy(reply.body.policy), end="")
        return 0 if reply.body.status is CrudStatus.OK else 1
    print(f"unexpected reply {reply.msg_type.name}", file=sys.stderr)
    return 1


# -- frame synthesis ------------------------------------------------------------


def _run_frame_build(args) -> int:
    src, dst = args.eth.split(",")
    payload = bytes.fromhex(args.payload) if args.payload else b""

    if args.goose is not None:
        inner = _fixed_pdu(args.goose, payload)
        ethertype = ETHERTYPE_GOOSE
    elif args.sv is not None:
        inner = _fixed_pdu(args.sv, payload)
        ethertype = ETHERTYPE_SV
    elif args.ipv4 is not None:
        ip_src, ip_dst = args.ipv4.split(",")
        if args.udp:
            sport, dport = (int(p, 0) for p in args.udp.split(","))
            transport = udp_datagram(sport, dport, payload)
            proto = 17
        elif args.tcp:
            sport, dport = (int(p, 0) for p in args.tcp.split(","))
            transport = tcp_segment(sport, dport, args.flags, payload)
            proto = 6
        else:
            transport, proto = payload, 0xFD
        inner = ipv4_packet(ip_src, ip_dst, proto, transport)
        ethertype = ETHERTYPE_IPV4
    else:
        inner = payload
        ethertype = args.ethertype if args.ethertype is not None else 0x1234

    if args.vlan:
        parts = args.vlan.split(",")
        vid = int(parts[0], 0)
        pcp = int(parts[1], 0) if len(parts) > 1 else 0
        inner = vlan_tag(vid, pcp, ethertype, inner)
        ethertype = ETHERTYPE_VLAN

    frame = ethernet_frame(src, dst, ethertype, inner)
    if args.pad > len(frame):
        frame += b"\x00" * (args.pad - len(frame))

    if args.pcap_out:
        from .pcapio import write_pcap

        with open(args.pcap_out, "wb") as fp:
            write_pcap(fp, [frame])
    print(frame.hex())
    return 0


# -- benchmark --------------------------------------------------------------------


def _run_bench(args) -> int:
    import socket

    from .bench.echo import DEFAULT_ACTIVE, DEFAULT_PASSIVE, PassiveEndpoint, run_benchmark
    from .bench.metrics import compute_metrics, emit_report, format_report_table

    if args.passive:
        sock = None
        if args.bind:
            sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            sock.bind(parse_address(args.bind))
        echo_to = parse_address(args.echo_to) if args.echo_to else None
        passive = PassiveEndpoint(echo_to=echo_to, sock=sock).start()
        print(f"passive endpoint on {passive.address}, echoing to {echo_to or 'sender'}")
        try:
            while True:
                time.sleep(1)
        except KeyboardInterrupt:
            pass
        finally:
            passive.stop()
            print(f"received {passive.received} frames")
        return 0

    if not args.peer:
        raise FlowgateError("--active requires --peer")
    sock = None
    if args.bind:
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.bind(parse_address(args.bind))
    result = run_benchmark(
        parse_address(args.peer), n=args.n, timeout_ms=args.timeout,
        warmup=args.warmup, sock=sock,
        local=DEFAULT_ACTIVE, peer=DEFAULT_PASSIVE,
    )
    if not result.samples:
        print(f"no samples ({result.timeouts} timeouts)")
        return 1
    report = compute_metrics(result.samples, result.elapsed_s,
                             scheme=args.scheme_label, timeouts=result.timeouts)
    print(format_report_table(report))
    if args.out:
        paths = emit_report(report, result.samples, args.out)
        print(f"wrote {paths['csv']} and {paths['json']}")
    return 0


def _run_topo(args) -> int:
    import logging

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    from .bench.topology import TopologyConfig, run_topology
    from .services.config import load_policy_files, parse_config_file

    cfg = parse_config_file(args.config)
    topo_cfg = TopologyConfig(
        scheme=cfg.scheme,
        policies=load_policy_files(cfg),
        catalog=cfg.catalog,
        values=cfg.values,
        bypass_rules=cfg.bypass_rules,
    )
    topo = run_topology(topo_cfg)
    print("topology up:")
    for name, healthy in topo.health().items():
        print(f"  {name}: {'healthy' if healthy else 'DOWN'}")
    print(f"  active capture:  {topo.active_capture}")
    print(f"  passive capture: {topo.passive_capture}")
    print(f"  pasp control:    {topo.pasp_address}")
    try:
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        pass
    finally:
        topo.shutdown()
    return 0


def _run_report(args) -> int:
    import os

    from .bench.metrics import format_report_table, load_report

    report = load_report(os.path.join(args.indir, "report.json"))
    print(format_report_table(report))
    return 0


if __name__ == "__main__":
    sys.exit(main())
