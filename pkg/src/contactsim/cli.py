"""Command line entry point.

    contactsim run            launch a full simulation and print the run report
    contactsim replay-oracle  rebuild expected store state from a broker log
    contactsim export-frames  write snapshot frames from a running API
    contactsim measure        traffic figures for a finished run directory
    contactsim broker | store | api | consumer | node   run a single component
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from datetime import datetime

from . import broker as broker_mod
from . import store as store_mod
from .framing import parse_address
from .model import RunParameters, Timeline
from .transport import DEFAULT_PORT as UDP_PORT, TransportConfig


def _params(args) -> RunParameters:
    base = RunParameters.from_file(args.params).to_dict() if args.params else RunParameters().to_dict()
    for name in base:
        value = getattr(args, name, None)
        if value is not None:
            base[name] = value
    return RunParameters.from_dict(base)


def _add_param_flags(p: argparse.ArgumentParser):
    p.add_argument("--params", help="parameters JSON file (field_width, field_height, ...)")
    p.add_argument("--field-width", dest="field_width", type=int)
    p.add_argument("--field-height", dest="field_height", type=int)
    p.add_argument("--scale-factor", dest="scale_factor", type=int)
    p.add_argument("--zombie-lifetime", dest="zombie_lifetime", type=int)
    p.add_argument("--infection-radius", dest="infection_radius", type=float)
    p.add_argument("--infection-cooldown", dest="infection_cooldown", type=int)


def _add_transport_flags(p: argparse.ArgumentParser):
    p.add_argument("--transport", choices=("inmemory", "udp"), default=None)
    p.add_argument("--broadcast-port", type=int, default=UDP_PORT)
    p.add_argument("--broadcast-address", default="<broadcast>")
    p.add_argument("--hearing-radius", type=float, default=None, help="cells; default unlimited")
    p.add_argument("--loss", type=float, default=0.0, help="loss probability (inmemory only)")


def _transport(args, default_mode: str) -> TransportConfig:
    return TransportConfig(args.transport or default_mode, args.broadcast_port, args.hearing_radius, args.loss,
                           args.broadcast_address)


def cmd_run(args) -> int:
    from .harness.runner import run
    from .harness.spec import FaultEvent, RunSpec

    if args.spec:
        with open(args.spec, encoding="utf-8") as fh:
            spec = RunSpec.from_dict(json.load(fh))
    else:
        spec = RunSpec(
            params=_params(args),
            node_count=args.nodes,
            infected_count=args.infected,
            duration=args.duration,
            seed=args.seed,
            transport=_transport(args, "inmemory"),
            faults=tuple(FaultEvent.parse(f) for f in args.fault),
            mode=args.mode,
            tick_interval=args.tick_interval,
            topic=args.topic,
        )
    report = run(spec, args.out)
    text = json.dumps(report, indent=2, sort_keys=True)
    if not args.quiet:
        print(text)
    for check in report["assertions"]:
        print(f"{'PASS' if check['passed'] else 'FAIL'} {check['name']} {check['detail']}", file=sys.stderr)
    return 0 if report["passed"] else 1


def cmd_replay_oracle(args) -> int:
    from .harness.oracle import replay_oracle

    state = replay_oracle(args.log)
    print(json.dumps({
        "documents": [state.documents[k] for k in sorted(state.documents)],
        "snapshot_stats": state.snapshot_stats(),
        "snapshots": len(state.snapshots),
        "pending": state.pending,
        "malformed": state.malformed,
    }, indent=2))
    return 0


def cmd_export_frames(args) -> int:
    from .harness.frames import ApiUnreachable, export_frames

    try:
        paths = export_frames(args.api, args.out, args.scale_factor)
    except ApiUnreachable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {len(paths) - 1} frames to {args.out}")
    return 0


def cmd_measure(args) -> int:
    from .harness.traffic import format_comparison, measure_traffic

    metrics = measure_traffic(args.run_dir)
    if args.json:
        print(json.dumps(metrics.to_dict(), indent=2))
    else:
        print(format_comparison(metrics))
    return 0


def _serve(server) -> int:
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    server.start()
    host, port = server.address
    print(f"listening on {host}:{port}", flush=True)
    try:
        stop.wait()
    except KeyboardInterrupt:
        pass
    server.stop()
    return 0


def cmd_broker(args) -> int:
    return _serve(broker_mod.BrokerServer(args.data_dir, args.host, args.port))


def cmd_store(args) -> int:
    return _serve(store_mod.StoreServer(args.data_dir, args.host, args.port))


def cmd_api(args) -> int:
    from .api import ApiServer

    host, port = parse_address(args.store, store_mod.DEFAULT_PORT)
    return _serve(ApiServer(store_mod.StoreClient(host, port, timeout=2.0), args.host, args.port))


def cmd_consumer(args) -> int:
    from .consumer import run_consumer

    run_consumer(parse_address(args.broker, broker_mod.DEFAULT_PORT),
                 parse_address(args.store, store_mod.DEFAULT_PORT), args.topic, args.group)
    return 0


def cmd_node(args) -> int:
    from .agent import make_agent
    from .transport import InMemoryNetwork, UdpTransport

    params = _params(args)
    host, port = parse_address(args.broker, broker_mod.DEFAULT_PORT)
    agent = make_agent(params, broker_mod.BrokerClient(host, port, timeout=2.0), Timeline(datetime.now()),
                       node_id=args.id, start_infected=args.infected, tick_interval=args.tick_interval,
                       topic=args.topic)
    config = _transport(args, "udp")
    if config.mode == "udp":
        factory = lambda a: UdpTransport(config)  # noqa: E731
    else:
        network = InMemoryNetwork(config)
        factory = lambda a: network.register_peer(a.id, a.current_position)  # noqa: E731
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    logging.getLogger(__name__).info("node %s starting%s", agent.id, " infected" if args.infected else "")
    try:
        agent.run(stop=stop, transport_factory=factory)
    except KeyboardInterrupt:
        pass
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contactsim", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a simulation")
    _add_param_flags(p)
    _add_transport_flags(p)
    p.add_argument("--spec", help="RunSpec JSON file; overrides the flags below")
    p.add_argument("--nodes", type=int, default=20)
    p.add_argument("--infected", type=int, default=1)
    p.add_argument("--duration", type=int, default=120)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("deterministic", "realtime"), default="deterministic")
    p.add_argument("--tick-interval", type=float, default=1.0, help="wall seconds per tick (realtime)")
    p.add_argument("--fault", action="append", default=[],
                   help="ACTION:TARGET@SECONDS, e.g. kill:broker@10, restore:broker@20, kill:node:3@5, spawn:node@8")
    p.add_argument("--topic", default=broker_mod.DEFAULT_TOPIC)
    p.add_argument("--out", default="run-out")
    p.add_argument("-q", "--quiet", action="store_true", help="do not print the report JSON")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("replay-oracle", help="replay a broker log into expected store state")
    p.add_argument("log")
    p.set_defaults(func=cmd_replay_oracle)

    p = sub.add_parser("export-frames", help="write snapshot frames from the API")
    p.add_argument("--api", default="127.0.0.1:8080")
    p.add_argument("--out", default="frames")
    p.add_argument("--scale-factor", type=int, default=RunParameters().scale_factor)
    p.set_defaults(func=cmd_export_frames)

    p = sub.add_parser("measure", help="traffic figures for a run directory")
    p.add_argument("run_dir")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("broker", help="serve the broker")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=broker_mod.DEFAULT_PORT)
    p.add_argument("--data-dir", default="broker-data")
    p.set_defaults(func=cmd_broker)

    p = sub.add_parser("store", help="serve the document store")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=store_mod.DEFAULT_PORT)
    p.add_argument("--data-dir", default="store-data")
    p.set_defaults(func=cmd_store)

    p = sub.add_parser("api", help="serve the HTTP API")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--store", default=f"127.0.0.1:{store_mod.DEFAULT_PORT}")
    p.set_defaults(func=cmd_api)

    p = sub.add_parser("consumer", help="run the DB consumer")
    p.add_argument("--broker", default=f"127.0.0.1:{broker_mod.DEFAULT_PORT}")
    p.add_argument("--store", default=f"127.0.0.1:{store_mod.DEFAULT_PORT}")
    p.add_argument("--topic", default=broker_mod.DEFAULT_TOPIC)
    p.add_argument("--group", default=broker_mod.DEFAULT_GROUP)
    p.set_defaults(func=cmd_consumer)

    p = sub.add_parser("node", help="run one node agent")
    _add_param_flags(p)
    _add_transport_flags(p)
    p.add_argument("--id", help="node uuid (default: generated)")
    p.add_argument("--infected", action="store_true", help="start infected")
    p.add_argument("--broker", default=f"127.0.0.1:{broker_mod.DEFAULT_PORT}")
    p.add_argument("--topic", default=broker_mod.DEFAULT_TOPIC)
    p.add_argument("--tick-interval", type=float, default=1.0)
    p.set_defaults(func=cmd_node)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
