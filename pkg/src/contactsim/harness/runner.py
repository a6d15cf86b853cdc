"""Launch a whole system, inject faults on schedule, then check the contracts.

``Deterministic`` runs every component in-process on a simulated clock with a
fixed agent order, so equal specs give byte-identical broker logs.
``Realtime`` runs the TCP broker and store, the HTTP API, a consumer thread
and threaded agents on the wall clock.
"""

from __future__ import annotations

import json
import logging
import random
import shutil
import threading
import time
import urllib.error
import urllib.request
from collections import Counter, defaultdict
from datetime import datetime
from pathlib import Path
from typing import Optional

from ..agent import AgentConfig, NodeAgent, WallClock
from ..api import UNAVAILABLE, ApiServer
from ..broker import Broker, BrokerClient, BrokerServer
from ..consumer import DbConsumer
from ..framing import ServiceUnavailable
from ..model import DecodeError, Timeline, compute_stats, decode_report, new_node_id
from ..store import DocumentStore, StoreClient, StoreServer
from ..transport import InMemoryNetwork, UdpTransport
from .oracle import compare_with_store, read_frames, replay_oracle
from .spec import FaultEvent, RunSpec
from .traffic import TrafficMetrics

log = logging.getLogger(__name__)

EPOCH = datetime(2020, 12, 2, 16, 19, 0)
COMPONENT_WORDS = ("store", "database", "mongo", "broker", "kafka", "consumer", "journal", "backend", "api")


class Killable:
    """Proxy for an in-process component that can crash and come back.

    While down, every call raises ``ServiceUnavailable`` except ``probe``,
    which answers False. Restoring rebuilds the component from its data
    directory, exactly like a restarted process would.
    """

    def __init__(self, name: str, factory):
        self._name = name
        self._factory = factory
        self._obj = factory()

    @property
    def up(self) -> bool:
        return self._obj is not None

    def kill(self):
        obj, self._obj = self._obj, None
        if obj is not None:
            obj.close()

    def restore(self):
        if self._obj is None:
            self._obj = self._factory()

    def __getattr__(self, name):
        obj = self.__dict__.get("_obj")
        if obj is None:
            if name == "probe":
                return lambda: False
            raise ServiceUnavailable(f"{self.__dict__.get('_name')} is down")
        return getattr(obj, name)


def http_get(url: str, timeout: float = 5.0) -> tuple[Optional[int], object]:
    """``(status, parsed body)``; status None when the connection is refused."""
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        raw = exc.read()
        try:
            return exc.code, json.loads(raw)
        except ValueError:
            return exc.code, raw.decode("utf-8", "replace")
    except (urllib.error.URLError, ConnectionError, OSError):
        return None, None


class _Run:
    def __init__(self, spec: RunSpec, out_dir):
        self.spec = spec
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        for sub in ("broker", "store"):
            shutil.rmtree(self.out / sub, ignore_errors=True)
        self.broker_dir = self.out / "broker"
        self.store_dir = self.out / "store"
        self.rng = random.Random(spec.seed)
        self.agents: list[NodeAgent] = []  # creation order; initial nodes ascending by id
        self.killed: dict[str, list] = {}  # node id -> residual contacts lost with it
        self.stopped_residual: dict[str, list] = {}
        self.spawned: list[tuple[str, float]] = []  # (node id, spawn time) for mid-run additions
        self.windows: dict[str, list[list]] = defaultdict(list)  # target -> [[kill_t, restore_t|None]]
        self.retention: list[dict] = []
        self.observations: list[dict] = []
        self.fault_log: list[dict] = []
        self.consumer: Optional[DbConsumer] = None
        self.network = None
        if spec.transport.mode == "inmemory":
            self.network = InMemoryNetwork(spec.transport, seed=self.rng.getrandbits(64))

    # --------------------------------------------------------------- agents

    def _initial_configs(self) -> list[AgentConfig]:
        ids = sorted(new_node_id(self.rng) for _ in range(self.spec.node_count))
        infected = set(self.rng.sample(ids, self.spec.infected_count))
        return [AgentConfig(i, i in infected, self.spec.params, self.spec.tick_interval, self.rng.getrandbits(64))
                for i in ids]

    def _spawn_config(self, ref: Optional[str]) -> AgentConfig:
        node_id = ref if ref and len(ref) == 36 else new_node_id(self.rng)
        return AgentConfig(node_id, False, self.spec.params, self.spec.tick_interval, self.rng.getrandbits(64))

    def _attach_transport(self, agent: NodeAgent):
        if self.network is not None:
            agent.transport = self.network.register_peer(agent.id, agent.current_position)
        else:
            agent.transport = UdpTransport(self.spec.transport)
        return agent.transport

    def node(self, ref: str) -> NodeAgent:
        if ref.isdigit():
            return self.agents[int(ref)]
        for a in self.agents:
            if a.id == ref:
                return a
        raise KeyError(f"no node {ref!r}")

    # --------------------------------------------------------------- bookkeeping

    def _open_window(self, ev: FaultEvent, t: float):
        self.windows[ev.target].append([t, None])

    def _close_window(self, ev: FaultEvent, t: float):
        self.windows[ev.target][-1][1] = t

    def observe_api(self, t: float, url: Optional[str]):
        if url is None:
            return
        status, body = http_get(f"{url}/data")
        hstatus, hbody = http_get(f"{url}/health")
        self.observations.append({
            "t": t,
            "api_up": self.api_up(),
            "store_up": self.store_up(),
            "data_status": status,
            "data_body": body if status != 200 else {"stats": body["stats"], "node_count": len(body["nodes"]),
                                                     "consistent": compute_stats(body["nodes"]).to_dict() == body["stats"]},
            "health_status": hstatus,
            "health_body": hbody,
        })

    # --------------------------------------------------------------- report

    def finish(self, broker_log: Path, documents, snapshots, retained: Optional[int], pending: int) -> dict:
        sizes = Counter()
        for a in self.agents:
            sizes.update(a.metrics.broadcast_bytes)
        with open(self.out / "traffic.json", "w", encoding="utf-8") as fh:
            json.dump({"topic": self.spec.topic,
                       "broadcast_sizes": {str(k): v for k, v in sorted(sizes.items())}}, fh, indent=1)
        reports = []
        if broker_log.exists():
            for payload in read_frames(broker_log):
                try:
                    reports.append(decode_report(payload))
                except DecodeError:
                    pass
        metrics = TrafficMetrics.from_sizes(sizes.elements(), [len(p) for p in read_frames(broker_log)]
                                            if broker_log.exists() else [])
        checks = evaluate(self, broker_log, reports, documents, snapshots, retained, pending)
        report = {
            "spec": self.spec.to_dict(),
            "nodes": [a.id for a in self.agents],
            "final_stats": compute_stats(documents).to_dict() if documents is not None else None,
            "broker_records": len(reports),
            "store_documents": None if documents is None else len(documents),
            "snapshots": None if snapshots is None else len(snapshots),
            "retained": retained,
            "consumer_pending": pending,
            "faults": self.fault_log,
            "retention": self.retention,
            "metrics": metrics.to_dict(),
            "assertions": checks,
            "passed": all(c["passed"] for c in checks),
            "paths": {
                "broker_log": str(broker_log.relative_to(self.out)),
                "store_journal": str((self.store_dir / "journal.log").relative_to(self.out)),
                "traffic": "traffic.json",
            },
        }
        with open(self.out / "run_report.json", "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
        return report


# =================================================================== deterministic


class DeterministicRun(_Run):
    def __init__(self, spec: RunSpec, out_dir):
        super().__init__(spec, out_dir)
        self.timeline = Timeline(EPOCH)
        self.broker = Killable("broker", lambda: Broker(self.broker_dir))
        self.store = Killable("store", lambda: DocumentStore(self.store_dir))
        self.consumer = DbConsumer(self.broker, self.store, spec.topic)
        self.api: Optional[ApiServer] = None
        self._api_port = 0

    def api_up(self):
        return self.api is not None

    def store_up(self):
        return self.store.up

    def _add_agent(self, config: AgentConfig, now: float) -> NodeAgent:
        agent = NodeAgent(config, self.broker, self.timeline, self.spec.topic)
        agent.spawn(now)
        self._attach_transport(agent)
        self.agents.append(agent)
        return agent

    def apply(self, ev: FaultEvent, t: float):
        self.fault_log.append({"t": t, **ev.to_dict()})
        if ev.action == "spawn":
            agent = self._add_agent(self._spawn_config(ev.node_ref), t)
            self.spawned.append((agent.id, t))
            return
        if ev.is_node:
            agent = self.node(ev.node_ref)
            if ev.action == "kill":
                self.killed[agent.id] = agent.residual_contacts()
                agent.kill()
            else:
                agent.terminated = False
                agent.dying = False
                agent.spawn(t)
                self._attach_transport(agent)
            return
        if ev.action == "kill":
            self._open_window(ev, t)
            if ev.target == "broker":
                self.broker.kill()
            elif ev.target == "store":
                self.store.kill()
            elif ev.target == "api":
                self.api.kill()
                self.api = None
            elif ev.target == "consumer":
                self.retention.append({"kill_t": t, "retained_at_kill": self.broker.retained_count(self.spec.topic),
                                       "length_at_kill": self.broker.log_length(self.spec.topic)})
                self.consumer = None
        else:
            self._close_window(ev, t)
            if ev.target == "broker":
                self.broker.restore()
            elif ev.target == "store":
                self.store.restore()
            elif ev.target == "api":
                self._start_api()
            elif ev.target == "consumer":
                r = self.retention[-1]
                r.update({"restore_t": t, "retained_at_restore": self.broker.retained_count(self.spec.topic),
                          "length_at_restore": self.broker.log_length(self.spec.topic)})
                self.consumer = DbConsumer(self.broker, self.store, self.spec.topic)

    def _start_api(self):
        self.api = ApiServer(self.store, port=self._api_port).start()
        self._api_port = self.api.address[1]

    @property
    def api_url(self) -> Optional[str]:
        return None if not self.spec.wants_api else f"http://127.0.0.1:{self._api_port}"

    def execute(self) -> dict:
        spec = self.spec
        if spec.wants_api:
            self._start_api()
        faults = defaultdict(list)
        for ev in spec.faults:
            faults[ev.at].append(ev)
        for config in self._initial_configs():
            self._add_agent(config, 0.0)
        listen_timeout = 0.05 if self.network is None else 0.0
        try:
            for t in range(spec.duration + 1):
                now = float(t)
                for ev in faults.get(t, ()):
                    self.apply(ev, now)
                live = sorted((a for a in self.agents if not a.terminated), key=lambda a: a.id)
                for a in live:
                    a.phase_listen(now, listen_timeout)
                for a in live:
                    a.phase_health(now)
                for a in live:
                    a.phase_move(now)
                for a in live:
                    a.phase_broadcast(now)
                for a in live:
                    a.phase_publish(now)
                for a in live:
                    if a.dying:
                        a.finish()
                if self.consumer is not None:
                    self.consumer.drain()
                if any(w[-1][1] is None for k, w in self.windows.items() if k in ("api", "store")) \
                        or any(ev.target in ("api", "store") and ev.action == "restore" for ev in faults.get(t, ())):
                    self.observe_api(now, self.api_url)
        finally:
            for a in self.agents:
                if not a.terminated:
                    self.stopped_residual[a.id] = a.residual_contacts()
                    a.kill()
        if self.consumer is not None:
            self.consumer.drain()
        broker_log = self.broker_dir / f"{spec.topic}.log"
        documents = snapshots = retained = None
        if self.store.up:
            documents = self.store.get_all()
            snapshots = self.store.get_snapshots(0, 10 ** 9)
        if self.broker.up:
            retained = self.broker.retained_count(spec.topic)
        pending = self.consumer.pending_count if self.consumer is not None else 0
        try:
            return self.finish(broker_log, documents, snapshots, retained, pending)
        finally:
            if self.api is not None:
                self.api.kill()
            self.broker.kill()
            self.store.kill()


# =================================================================== realtime


class RealtimeRun(_Run):
    def __init__(self, spec: RunSpec, out_dir):
        super().__init__(spec, out_dir)
        self.timeline = Timeline(datetime.now())
        self.clock = WallClock(spec.tick_interval)
        self.broker_server = BrokerServer(self.broker_dir, port=0).start()
        self.broker_addr = self.broker_server.address
        self.store_server = StoreServer(self.store_dir, port=0).start()
        self.store_addr = self.store_server.address
        self.api: Optional[ApiServer] = None
        self._api_port = 0
        self._threads: dict[str, tuple[threading.Thread, threading.Event]] = {}
        self._consumer_thread = None
        self._admin = BrokerClient(*self.broker_addr)

    def api_up(self):
        return self.api is not None

    def store_up(self):
        return self.store_server is not None

    @property
    def api_url(self) -> Optional[str]:
        return None if not self.spec.wants_api else f"http://127.0.0.1:{self._api_port}"

    def _start_api(self):
        self.api = ApiServer(StoreClient(*self.store_addr, timeout=2.0), port=self._api_port).start()
        self._api_port = self.api.address[1]

    def _start_consumer(self):
        stop = threading.Event()
        self.consumer = DbConsumer(BrokerClient(*self.broker_addr), StoreClient(*self.store_addr), self.spec.topic,
                                   retry_delay=min(0.5, self.spec.tick_interval))
        thread = threading.Thread(target=self.consumer.run, args=(stop,), kwargs={"idle_delay": 0.02},
                                  name="consumer", daemon=True)
        thread.start()
        self._consumer_thread = (thread, stop, self.consumer)

    def _stop_consumer(self):
        thread, stop, _ = self._consumer_thread
        stop.set()
        thread.join(timeout=5)
        self._consumer_thread = None
        self.consumer = None

    def _start_agent(self, config: AgentConfig) -> NodeAgent:
        agent = NodeAgent(config, BrokerClient(*self.broker_addr, timeout=2.0), self.timeline, self.spec.topic)
        agent.spawn(self.clock.now())
        self._attach_transport(agent)
        self.agents.append(agent)
        stop = threading.Event()
        thread = threading.Thread(target=agent.run, args=(self.clock, stop), name=f"node-{agent.id[:8]}",
                                  daemon=True)
        thread.start()
        self._threads[agent.id] = (thread, stop)
        return agent

    def apply(self, ev: FaultEvent, t: float):
        self.fault_log.append({"t": round(t, 3), **ev.to_dict()})
        if ev.action == "spawn":
            agent = self._start_agent(self._spawn_config(ev.node_ref))
            self.spawned.append((agent.id, agent.state.spawned_at))
            return
        if ev.is_node:
            agent = self.node(ev.node_ref)
            if ev.action == "kill":
                thread, stop = self._threads[agent.id]
                stop.set()
                thread.join(timeout=5)
                self.killed[agent.id] = agent.residual_contacts()
            else:
                raise ValueError("restoring a killed node is only supported in deterministic mode")
            return
        if ev.action == "kill":
            if ev.target == "broker":
                self.broker_server.kill()
            elif ev.target == "store":
                self.store_server.kill()
                self.store_server = None
            elif ev.target == "api":
                self.api.kill()
                self.api = None
            elif ev.target == "consumer":
                self._stop_consumer()
                self.retention.append({"kill_t": t, **self._retention_probe("kill")})
            # the outage starts once the component is actually gone
            self._open_window(ev, self.clock.now())
        else:
            self._close_window(ev, t)
            if ev.target == "broker":
                self.broker_server = BrokerServer(self.broker_dir, port=self.broker_addr[1]).start()
            elif ev.target == "store":
                self.store_server = StoreServer(self.store_dir, port=self.store_addr[1]).start()
            elif ev.target == "api":
                self._start_api()
            elif ev.target == "consumer":
                self.retention[-1].update({"restore_t": t, **self._retention_probe("restore")})
                self._start_consumer()

    def _retention_probe(self, when: str) -> dict:
        # nodes keep publishing; only a reading with a stable log length is consistent
        try:
            while True:
                before = self._admin.log_length(self.spec.topic)
                retained = self._admin.retained_count(self.spec.topic)
                if self._admin.log_length(self.spec.topic) == before:
                    return {f"retained_at_{when}": retained, f"length_at_{when}": before}
        except ConnectionError:
            return {}

    def _sleep_until(self, t: float):
        delay = self.clock.wall_time_of(t) - time.monotonic()
        if delay > 0:
            time.sleep(delay)

    def execute(self) -> dict:
        spec = self.spec
        if spec.wants_api:
            self._start_api()
        self._start_consumer()
        for config in self._initial_configs():
            self._start_agent(config)
        try:
            t = 0.0
            for ev in sorted(spec.faults, key=lambda e: e.at):
                while t + 1 < ev.at:
                    t += 1
                    self._sleep_until(t)
                    if any(w[-1][1] is None for k, w in self.windows.items() if k in ("api", "store")):
                        self.observe_api(t, self.api_url)
                self._sleep_until(ev.at)
                t = ev.at
                self.apply(ev, self.clock.now())
                if ev.target in ("api", "store"):
                    self.observe_api(ev.at, self.api_url)
            self._sleep_until(spec.duration + 0.5)
        finally:
            for node_id, (thread, stop) in self._threads.items():
                stop.set()
            for agent in self.agents:
                thread, _ = self._threads[agent.id]
                thread.join(timeout=5)
                if agent.id not in self.killed and not agent.final_published:
                    self.stopped_residual[agent.id] = agent.residual_contacts()
        self._wait_for_consumer()
        documents = snapshots = retained = None
        pending = self.consumer.pending_count if self.consumer is not None else 0
        if self._consumer_thread is not None:
            self._stop_consumer()
        if self.store_server is not None:
            documents = self.store_server.store.get_all()
            snapshots = self.store_server.store.get_snapshots(0, 10 ** 9)
        try:
            retained = self._admin.retained_count(spec.topic)
        except ConnectionError:
            pass
        for server in (self.api, self.broker_server, self.store_server):
            if server is not None:
                server.kill()
        self._admin.close()
        return self.finish(self.broker_dir / f"{spec.topic}.log", documents, snapshots, retained, pending)

    def _wait_for_consumer(self, timeout: float = 15.0):
        if self.consumer is None:
            return
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            try:
                if self._admin.retained_count(self.spec.topic) == self.consumer.pending_count \
                        and self.consumer._sealed is None and self.consumer._commit_due is None:
                    return
            except ConnectionError:
                return
            time.sleep(0.05)


def run(spec: RunSpec, out_dir) -> dict:
    cls = DeterministicRun if spec.mode == "deterministic" else RealtimeRun
    return cls(spec, out_dir).execute()


# =================================================================== contract checks


def _check(name: str, passed: bool, detail: str = "") -> dict:
    return {"name": name, "passed": bool(passed), "detail": detail}


def evaluate(run: _Run, broker_log: Path, reports, documents, snapshots, retained, pending) -> list[dict]:
    spec = run.spec
    tl = run.timeline
    by_node = defaultdict(list)
    for r in reports:
        by_node[r.uuid].append(r)
    checks = []

    # A realtime publish can be appended and fsynced while the connection dies before the
    # reply; the node then counts the tick as failed. Only those reports may duplicate contacts.
    ambiguous = {}
    for a in run.agents:
        failed = set(a.failed_ticks)
        ambiguous[a.id] = [r for r in by_node[a.id] if r.timestamp in failed]
    tolerate = spec.mode == "realtime"

    # contact conservation: heard = published + still buffered (or lost with a killed node)
    bad = []
    for a in run.agents:
        heard = Counter(a.heard_log)
        published = Counter(c for r in by_node[a.id] for c in r.contacts)
        residual = Counter(run.killed.get(a.id, [])) + Counter(run.stopped_residual.get(a.id, []))
        accounted = published + residual
        duplicated = Counter(c for r in ambiguous[a.id] for c in r.contacts) if tolerate else Counter()
        if heard - accounted or accounted - heard - duplicated:
            bad.append(a.id)
    n_amb = sum(len(v) for v in ambiguous.values())
    checks.append(_check("contact_conservation", not bad, f"mismatch for {bad}" if bad else
                         f"{sum(len(a.heard_log) for a in run.agents)} contacts accounted for"
                         + (f", {n_amb} ambiguous publish(es)" if n_amb else "")))

    # movement-loss contract
    bad = []
    for a in run.agents:
        for r in by_node[a.id]:
            if a.tick_positions.get(r.timestamp) != r.position or (r in ambiguous[a.id] and not tolerate):
                bad.append((a.id, r.timestamp))
    checks.append(_check("movement_loss", not bad, f"{len(bad)} bad reports" if bad else
                         "every report carries its own tick's position"))

    # exactly one final message, and it is the node's last
    bad = []
    for a in run.agents:
        rs = by_node[a.id]
        finals = [i for i, r in enumerate(rs) if not r.alive]
        expected = 1 if a.final_published else 0
        if len(finals) != expected or (finals and finals[0] != len(rs) - 1):
            bad.append(a.id)
    checks.append(_check("single_final_message", not bad, f"violations: {bad}" if bad else ""))

    oracle_problems = None
    if documents is not None and broker_log.exists():
        oracle = replay_oracle(broker_log)
        oracle_problems = compare_with_store(oracle, documents, snapshots)
        checks.append(_check("oracle_equivalence", not oracle_problems, "; ".join(oracle_problems[:5])))
    else:
        checks.append(_check("oracle_equivalence", False, "store down at end of run"))

    for target, windows in sorted(run.windows.items()):
        for start, end in windows:
            end_t = spec.duration + 1 if end is None else end
            if target == "broker":
                inside = [r for r in reports if start < tl.seconds(r.timestamp) < end_t]
                checks.append(_check(f"broker_outage_positions[{start:g},{end_t:g})", not inside,
                                     f"{len(inside)} reports timestamped inside the outage"))
            elif target == "store":
                ok = oracle_problems == [] and retained is not None and retained == pending
                checks.append(_check(f"store_outage_zero_loss[{start:g},{end_t:g})", ok,
                                     f"retained={retained} pending={pending} problems={oracle_problems}"))
    for r in run.retention:
        if "retained_at_restore" not in r:
            checks.append(_check("consumer_retention", False, f"consumer never restored or broker down: {r}"))
            continue
        published = r["length_at_restore"] - r["length_at_kill"]
        ok = r["retained_at_restore"] - r["retained_at_kill"] == published and published >= 0
        checks.append(_check(f"consumer_retention[{r['kill_t']:g},{r['restore_t']:g})", ok,
                             f"retained {r['retained_at_kill']}->{r['retained_at_restore']}, "
                             f"{published} published during downtime"))

    if run.killed:
        bad = []
        lifetime = spec.params.zombie_lifetime
        for a in run.agents:
            final_in_log = any(not r.alive for r in by_node[a.id])
            doc = next((d for d in documents or [] if d["uuid"] == a.id), None)
            if a.id in run.killed:
                if final_in_log or (doc is not None and not doc["alive"]):
                    bad.append(a.id)
            elif a.state.spawned_at + lifetime <= spec.duration and a.id not in run.killed:
                if doc is None or doc["alive"]:
                    bad.append(a.id)
        checks.append(_check("node_kill_isolated", not bad, f"violations: {bad}" if bad else
                             f"{len(run.killed)} killed node(s) left without a final message"))

    for node_id, t0 in run.spawned:
        # contacts recorded during a broker outage surface with the first report after it
        due = t0
        for start, end in run.windows.get("broker", []):
            if start <= due and (end is None or due < end):
                due = spec.duration + 1 if end is None else end
                if spec.mode == "realtime":
                    # the broker monitor may take two probe periods to see the restore
                    due += 2
        own = [r for r in by_node[node_id] if r.contacts and tl.seconds(r.timestamp) <= due + 2]
        others = [r for r in reports if r.uuid != node_id and tl.seconds(r.timestamp) <= due + 2
                  and any(c.uuid == node_id for c in r.contacts)]
        lifetime = spec.params.zombie_lifetime
        peers_alive = any(a.id != node_id and a.id not in run.killed
                          and a.state.spawned_at <= t0 < a.state.spawned_at + lifetime - 1
                          for a in run.agents)
        ok = bool(own) and (bool(others) or not peers_alive)
        checks.append(_check(f"node_add_contacts[{node_id[:8]}@{t0:g}]", ok,
                             f"{len(own)} own reports with contacts, {len(others)} peer reports naming it"))

    if run.observations:
        bad = []
        for o in run.observations:
            if not o["api_up"]:
                if o["data_status"] is not None:
                    bad.append((o["t"], "api down but answered"))
            elif not o["store_up"]:
                body = json.dumps(o["data_body"]).lower()
                if o["data_status"] != 503 or o["data_body"] != UNAVAILABLE \
                        or any(w in body for w in COMPONENT_WORDS):
                    bad.append((o["t"], o["data_status"], o["data_body"]))
                if o["health_status"] != 200:
                    bad.append((o["t"], "health", o["health_status"]))
            else:
                if o["data_status"] != 200 or not o["data_body"]["consistent"]:
                    bad.append((o["t"], "expected 200", o["data_status"]))
        checks.append(_check("api_failure_opacity", not bad,
                             f"{len(run.observations)} probes; bad: {bad[:3]}" if bad
                             else f"{len(run.observations)} probes as expected"))
    return checks
