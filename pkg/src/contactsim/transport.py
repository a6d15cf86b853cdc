"""Proximity broadcast delivery.

Two interchangeable transports with the same ``broadcast`` / ``receive`` /
``close`` surface: real UDP broadcast, and an in-memory network with
reachability by distance and seeded loss.
"""

from __future__ import annotations

import collections
import ipaddress
import logging
import random
import socket
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

from .model import Position

log = logging.getLogger(__name__)

DEFAULT_PORT = 4711
MAX_PAYLOAD = 60_000
UNLIMITED = None


class TransportClosed(Exception):
    pass


class PayloadTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class TransportConfig:
    mode: str = "inmemory"  # "udp" | "inmemory"
    broadcast_port: int = DEFAULT_PORT
    hearing_radius: Optional[float] = UNLIMITED
    loss_probability: float = 0.0
    broadcast_address: str = "<broadcast>"

    def __post_init__(self):
        if self.mode not in ("udp", "inmemory"):
            raise ValueError(f"unknown transport mode {self.mode!r}")
        if not 1024 <= self.broadcast_port <= 65535:
            raise ValueError("broadcast_port must be in [1024, 65535]")
        if not 0.0 <= self.loss_probability <= 1.0:
            raise ValueError("loss_probability must be in [0, 1]")
        if self.hearing_radius is not None and self.hearing_radius < 0:
            raise ValueError("hearing_radius must be non-negative")
        if self.mode == "udp" and self.loss_probability:
            raise ValueError("loss_probability applies to the in-memory transport only")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "broadcast_port": self.broadcast_port,
            "hearing_radius": self.hearing_radius,
            "loss_probability": self.loss_probability,
            "broadcast_address": self.broadcast_address,
        }


@dataclass(frozen=True)
class Endpoint:
    address: str
    port: int

    def __post_init__(self):
        ipaddress.ip_address(self.address)
        if not 0 <= self.port <= 65535:
            raise ValueError(f"bad port {self.port}")

    def __str__(self):
        return f"{self.address}:{self.port}"


def _check_size(payload: bytes):
    if len(payload) > MAX_PAYLOAD:
        raise PayloadTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")


# --------------------------------------------------------------------------
# in-memory


class InMemoryNetwork:
    """A single-host broadcast medium.

    Peers register with a callback returning their current position; each
    broadcast is offered to every other registered peer whose position at send
    time is within ``hearing_radius`` of the sender, minus seeded random loss.
    """

    def __init__(self, config: TransportConfig | None = None, seed: int = 0):
        self.config = config or TransportConfig()
        self._rng = random.Random(seed)
        self._lock = threading.Lock()
        self._peers: dict[str, _Peer] = {}
        self._next_index = 1
        self.delivered = 0
        self.dropped = 0

    def register_peer(self, node_id: str, position_source: Callable[[], Position]) -> "InMemoryTransport":
        with self._lock:
            if node_id in self._peers:
                raise ValueError(f"peer {node_id} already registered")
            index = self._next_index
            self._next_index += 1
            # one private address per peer, like containers on a bridge network
            endpoint = Endpoint(str(ipaddress.ip_address("10.0.0.0") + index), 40000 + index % 20000)
            peer = _Peer(node_id, position_source, endpoint)
            self._peers[node_id] = peer
        return InMemoryTransport(self, peer)

    def unregister_peer(self, node_id: str):
        with self._lock:
            peer = self._peers.pop(node_id, None)
        if peer is not None:
            with peer.cond:
                peer.closed = True
                peer.cond.notify_all()

    def peers(self) -> list[str]:
        with self._lock:
            return list(self._peers)

    def _deliver(self, sender: "_Peer", payload: bytes):
        radius = self.config.hearing_radius
        with self._lock:
            origin = sender.position_source()
            targets = []
            for peer in self._peers.values():
                if peer is sender:
                    continue
                if radius is not None:
                    p = peer.position_source()
                    dx, dy = p.x - origin.x, p.y - origin.y
                    if dx * dx + dy * dy > radius * radius:
                        continue
                if self.config.loss_probability and self._rng.random() < self.config.loss_probability:
                    self.dropped += 1
                    continue
                targets.append(peer)
            self.delivered += len(targets)
        for peer in targets:
            with peer.cond:
                peer.inbox.append((payload, sender.endpoint))
                peer.cond.notify()


class _Peer:
    def __init__(self, node_id, position_source, endpoint):
        self.node_id = node_id
        self.position_source = position_source
        self.endpoint = endpoint
        self.inbox: collections.deque = collections.deque()
        self.cond = threading.Condition()
        self.closed = False


class InMemoryTransport:
    def __init__(self, network: InMemoryNetwork, peer: _Peer):
        self.network = network
        self._peer = peer
        self.bytes_sent = 0
        self.datagrams_sent = 0

    @property
    def endpoint(self) -> Endpoint:
        return self._peer.endpoint

    def broadcast(self, payload: bytes):
        _check_size(payload)
        if self._peer.closed:
            raise TransportClosed("transport closed")
        self.network._deliver(self._peer, payload)
        self.bytes_sent += len(payload)
        self.datagrams_sent += 1

    def receive(self, timeout: float = 0.0):
        peer = self._peer
        with peer.cond:
            if not peer.inbox and not peer.closed and timeout > 0:
                peer.cond.wait_for(lambda: peer.inbox or peer.closed, timeout)
            if peer.inbox:
                return peer.inbox.popleft()
            if peer.closed:
                raise TransportClosed("transport closed")
            return None

    def close(self):
        self.network.unregister_peer(self._peer.node_id)


# --------------------------------------------------------------------------
# UDP


class UdpTransport:
    """Broadcast datagrams on ``broadcast_port``; send from an ephemeral port.

    Several agents may share a host, so the listen socket uses SO_REUSEPORT and
    our own datagrams are dropped by comparing the source port with the send
    socket's port.
    """

    def __init__(self, config: TransportConfig | None = None):
        self.config = config or TransportConfig(mode="udp")
        self._send = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._send.setsockopt(socket.SOL_SOCKET, socket.SO_BROADCAST, 1)
        self._send.bind(("", 0))
        self._send_port = self._send.getsockname()[1]
        self._listen = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._listen.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        if hasattr(socket, "SO_REUSEPORT"):
            self._listen.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEPORT, 1)
        self._listen.setsockopt(socket.SOL_SOCKET, socket.SO_BROADCAST, 1)
        self._listen.bind(("", self.config.broadcast_port))
        self._local = _local_addresses()
        self._closed = False
        self.bytes_sent = 0
        self.datagrams_sent = 0

    @property
    def source_port(self) -> int:
        return self._send_port

    def broadcast(self, payload: bytes):
        _check_size(payload)
        if self._closed:
            raise TransportClosed("transport closed")
        self._send.sendto(payload, (self.config.broadcast_address, self.config.broadcast_port))
        self.bytes_sent += len(payload)
        self.datagrams_sent += 1

    def _is_self(self, addr) -> bool:
        return addr[1] == self._send_port and (addr[0] in self._local or addr[0].startswith("127."))

    def receive(self, timeout: float = 0.0):
        deadline = time.monotonic() + timeout
        while True:
            if self._closed:
                raise TransportClosed("transport closed")
            remaining = max(deadline - time.monotonic(), 0.0)
            self._listen.settimeout(remaining if remaining > 0 else 1e-6)
            try:
                data, addr = self._listen.recvfrom(65535)
            except (socket.timeout, BlockingIOError):
                return None
            except OSError as exc:
                if self._closed:
                    raise TransportClosed("transport closed") from None
                raise TransportClosed(str(exc)) from exc
            if self._is_self(addr):
                continue
            return data, Endpoint(addr[0], addr[1])

    def close(self):
        self._closed = True
        self._send.close()
        self._listen.close()


def _local_addresses() -> set[str]:
    addrs = {"0.0.0.0", "127.0.0.1"}
    try:
        for info in socket.getaddrinfo(socket.gethostname(), None, socket.AF_INET):
            addrs.add(info[4][0])
    except OSError:
        pass
    # the address the kernel would route outward from
    probe = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        probe.connect(("192.0.2.1", 9))
        addrs.add(probe.getsockname()[0])
    except OSError:
        pass
    finally:
        probe.close()
    return addrs
