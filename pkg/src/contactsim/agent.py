"""The autonomous node.

Every tick a node closes out what it heard, updates its health, moves unless
infected, broadcasts its state and publishes a report to the broker. Contacts
survive broker outages in the node; positions from failed ticks do not.

Two drivers share the same phase methods: ``run`` uses four threads (control,
broadcast, listen, broker monitor) on a wall clock, while the harness calls
the phases directly on a simulated clock for reproducible runs.
"""

from __future__ import annotations

import logging
import queue
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from .broker import DEFAULT_TOPIC
from .model import (
    BroadcastMessage,
    ContactRecord,
    DecodeError,
    HealthPhase,
    Infected,
    Position,
    ReportMessage,
    RunParameters,
    Safe,
    Timeline,
    decode_broadcast,
    encode_broadcast,
    encode_report,
    in_infection_range,
    is_stationary,
    new_node_id,
    step_position,
    update_health,
)
from .transport import TransportClosed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AgentConfig:
    id: str
    start_infected: bool = False
    params: RunParameters = field(default_factory=RunParameters)
    tick_interval: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.tick_interval <= 0:
            raise ValueError("tick_interval must be positive")


@dataclass
class NodeState:
    id: str
    position: Position
    phase: HealthPhase
    spawned_at: float
    alive: bool = True
    # peer uuid -> (heard timestamp text, message); insertion order = recording order
    last_heard: dict = field(default_factory=dict)
    pending: list = field(default_factory=list)
    carried: list = field(default_factory=list)

    @property
    def infected(self) -> bool:
        return isinstance(self.phase, Infected)


@dataclass
class AgentMetrics:
    malformed: int = 0
    heard: int = 0
    reports_published: int = 0
    publish_failures: int = 0
    broadcasts: int = 0
    broadcast_bytes: list = field(default_factory=list)
    report_bytes: list = field(default_factory=list)


class WallClock:
    """Run-relative seconds on the wall clock, with one tick per ``tick_interval``."""

    def __init__(self, tick_interval: float = 1.0, start: Optional[float] = None):
        self.tick_interval = tick_interval
        self.start = time.monotonic() if start is None else start

    def now(self) -> float:
        return (time.monotonic() - self.start) / self.tick_interval

    def wall_time_of(self, t: float) -> float:
        return self.start + t * self.tick_interval


class NodeAgent:
    def __init__(self, config: AgentConfig, broker, timeline: Timeline, topic: str = DEFAULT_TOPIC):
        self.config = config
        self.params = config.params
        self.broker = broker
        self.timeline = timeline
        self.topic = topic
        self.rng = random.Random(config.rng_seed)
        self.transport = None
        self.state: Optional[NodeState] = None
        self.metrics = AgentMetrics()
        self.broker_available = True
        self.dying = False
        self.terminated = False
        self._lock = threading.Lock()
        # verification records
        self.heard_log: list[ContactRecord] = []
        self.tick_positions: dict[str, Position] = {}  # report timestamp -> position that tick
        self.failed_ticks: list[str] = []
        self.final_published = 0

    @property
    def id(self) -> str:
        return self.config.id

    def spawn(self, now: float) -> NodeState:
        p = self.params
        position = Position(self.rng.randrange(p.field_width), self.rng.randrange(p.field_height))
        phase = Infected(now) if self.config.start_infected else Safe()
        self.state = NodeState(self.id, position, phase, now)
        return self.state

    def current_position(self) -> Position:
        return self.state.position

    # ------------------------------------------------------------------ listening

    def handle_datagram(self, payload: bytes, sender, now: float):
        try:
            msg = decode_broadcast(payload, self.params)
        except DecodeError as exc:
            self.metrics.malformed += 1
            log.debug("%s: dropped malformed datagram from %s: %s", self.id[:8], sender, exc)
            return
        if msg.uuid == self.id:
            return
        log.info("%s heard %s from %s:%s", self.id[:8], msg.uuid[:8],
                 getattr(sender, "address", "?"), getattr(sender, "port", "?"))
        self.on_heard(msg, now)

    def on_heard(self, msg: BroadcastMessage, now: float) -> NodeState:
        """Fold one heard broadcast into the state.

        A later message from the same peer within the tick replaces the
        earlier one. An infected sender within the infection radius (judged on
        the position it reported) exposes this node.
        """
        if msg.uuid == self.id:
            raise ValueError("a node cannot hear itself")
        with self._lock:
            st = self.state
            st.last_heard.pop(msg.uuid, None)
            st.last_heard[msg.uuid] = (self.timeline.text(now), msg)
            self.metrics.heard += 1
            if msg.infected and in_infection_range(st.position, msg.position, self.params.infection_radius):
                # expire first so an elapsed immunity cannot shield this exposure
                phase = update_health(st.phase, now, False, self.params)
                st.phase = update_health(phase, now, True, self.params)
            return st

    def close_tick(self):
        """Turn this tick's surviving last-heard entries into pending contacts."""
        with self._lock:
            st = self.state
            entries = sorted(st.last_heard.items(), key=lambda kv: kv[1][0])
            for peer, (heard_at, _msg) in entries:
                record = ContactRecord(peer, heard_at)
                st.pending.append(record)
                self.heard_log.append(record)
            st.last_heard.clear()

    def drain(self, now: float, timeout: float = 0.0):
        """Receive everything queued on the transport (deterministic driver)."""
        wait = timeout
        while True:
            item = self.transport.receive(wait)
            if item is None:
                return
            wait = timeout and min(timeout, 0.05)
            self.handle_datagram(item[0], item[1], now)

    # ------------------------------------------------------------------ per-tick phases

    def phase_listen(self, now: float, timeout: float = 0.0):
        self.drain(now, timeout)
        self.close_tick()

    def phase_health(self, now: float):
        with self._lock:
            st = self.state
            st.phase = update_health(st.phase, now, False, self.params)
            if now - st.spawned_at >= self.params.zombie_lifetime:
                self.dying = True

    def phase_move(self, now: float):
        with self._lock:
            st = self.state
            if self.dying or is_stationary(st.phase):
                return
            st.position = step_position(st.position, self.params, self.rng)

    def current_message(self, now: float) -> BroadcastMessage:
        with self._lock:
            st = self.state
            return BroadcastMessage(st.id, st.position, st.infected, self.timeline.text(now), not self.dying)

    def phase_broadcast(self, now: float):
        self.send_broadcast(self.current_message(now))

    def send_broadcast(self, msg: BroadcastMessage):
        payload = encode_broadcast(msg)
        try:
            self.transport.broadcast(payload)
        except TransportClosed:
            raise
        except OSError as exc:
            log.warning("%s: broadcast failed: %s", self.id[:8], exc)
            return
        self.metrics.broadcasts += 1
        self.metrics.broadcast_bytes.append(len(payload))

    def next_report(self, now: float) -> ReportMessage:
        with self._lock:
            st = self.state
            contacts = tuple(st.carried) + tuple(st.pending)
            return ReportMessage(st.id, st.position, st.infected, self.timeline.text(now), not self.dying, contacts)

    def phase_publish(self, now: float, probe: bool = True) -> bool:
        if probe:
            self.broker_available = self.broker.probe()
        report = self.next_report(now)
        self.tick_positions[report.timestamp] = report.position
        ok = False
        if self.broker_available:
            payload = encode_report(report)
            try:
                self.broker.publish(self.topic, payload)
                ok = True
            except ConnectionError as exc:
                log.info("%s: broker unavailable (%s); buffering contacts", self.id[:8], exc)
                self.broker_available = False
            else:
                self.metrics.report_bytes.append(len(payload))
        with self._lock:
            st = self.state
            if ok:
                st.carried = []
                self.metrics.reports_published += 1
                if not report.alive:
                    self.final_published += 1
            else:
                # keep contacts, drop the position
                st.carried = list(report.contacts)
                self.metrics.publish_failures += 1
                self.failed_ticks.append(report.timestamp)
            st.pending = []
        return ok

    def finish(self):
        """After the final message: leave the network."""
        with self._lock:
            self.state.alive = False
            self.terminated = True
        if self.transport is not None:
            self.transport.close()

    def kill(self):
        """Abrupt shutdown: no final message, buffers lost."""
        self.terminated = True
        if self.transport is not None:
            try:
                self.transport.close()
            except OSError:
                pass

    def residual_contacts(self) -> list[ContactRecord]:
        """Recorded contacts not yet delivered to the broker."""
        with self._lock:
            return list(self.state.carried) + list(self.state.pending)

    def tick(self, now: float, listen_timeout: float = 0.0) -> bool:
        """One full tick in phase order. Returns False once the node has died."""
        self.phase_listen(now, listen_timeout)
        self.phase_health(now)
        self.phase_move(now)
        self.phase_broadcast(now)
        self.phase_publish(now)
        if self.dying:
            self.finish()
            return False
        return True

    # ------------------------------------------------------------------ threaded driver

    def run(self, clock: Optional[WallClock] = None, stop: Optional[threading.Event] = None,
            transport_factory: Optional[Callable[["NodeAgent"], object]] = None):
        """Realtime lifecycle on four threads. Returns when the node dies or ``stop`` is set."""
        clock = clock or WallClock(self.config.tick_interval)
        stop = stop or threading.Event()
        if self.state is None:
            self.spawn(clock.now())
        if self.transport is None:
            self.transport = transport_factory(self)
        outbox: queue.Queue = queue.Queue()
        done = threading.Event()

        def broadcaster():
            while not done.is_set():
                try:
                    msg = outbox.get(timeout=0.1)
                except queue.Empty:
                    continue
                try:
                    self.send_broadcast(msg)
                except TransportClosed:
                    return
                if not msg.alive:
                    return

        def listener():
            while not done.is_set():
                try:
                    item = self.transport.receive(0.1)
                except TransportClosed:
                    return
                if item is not None:
                    self.handle_datagram(item[0], item[1], clock.now())

        def monitor():
            while not done.is_set():
                self.broker_available = self.broker.probe()
                done.wait(self.config.tick_interval)

        threads = [threading.Thread(target=f, name=f"{self.id[:8]}-{f.__name__}", daemon=True)
                   for f in (broadcaster, listener, monitor)]
        for t in threads:
            t.start()
        start_tick = self.state.spawned_at
        k = 0
        try:
            while not stop.is_set():
                target = clock.wall_time_of(start_tick + k)
                delay = target - time.monotonic()
                if delay > 0 and stop.wait(delay):
                    break
                now = clock.now()
                self.close_tick()
                self.phase_health(now)
                self.phase_move(now)
                outbox.put(self.current_message(now))
                self.phase_publish(now, probe=False)
                if self.dying:
                    threads[0].join(timeout=2)
                    break
                k += 1
        finally:
            done.set()
            if self.dying:
                self.finish()
            else:
                self.kill()
            for t in threads:
                t.join(timeout=2)


def make_agent(params: RunParameters, broker, timeline: Timeline, node_id: Optional[str] = None,
               start_infected: bool = False, tick_interval: float = 1.0, rng_seed: Optional[int] = None,
               topic: str = DEFAULT_TOPIC) -> NodeAgent:
    if rng_seed is None:
        rng_seed = random.SystemRandom().getrandbits(64)
    config = AgentConfig(node_id or new_node_id(), start_infected, params, tick_interval, rng_seed)
    return NodeAgent(config, broker, timeline, topic)
