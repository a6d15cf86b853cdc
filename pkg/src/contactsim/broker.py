"""Durable publish-subscribe broker.

Each topic is an append-only file of ``[4-byte big-endian length][payload]``
records; a record's offset is its position in the file. Committed offsets per
consumer group live in a JSON sidecar replaced atomically. Every append is
fsynced before its offset is handed back.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import re
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

from .framing import FramedClient, FramedServer, RequestRejected

log = logging.getLogger(__name__)

DEFAULT_TOPIC = "coronaz"
DEFAULT_GROUP = "db-consumer"
DEFAULT_PORT = 9092

RECORD_HEADER = struct.Struct(">I")

PUBLISH, POLL, COMMIT, COUNT, PROBE = 1, 2, 3, 4, 5

_TOPIC_RE = re.compile(r"^[A-Za-z0-9._-]{1,200}$")


class CorruptLogError(ValueError):
    def __init__(self, path, byte_offset: int, reason: str):
        super().__init__(f"{path}: corrupt record at byte {byte_offset}: {reason}")
        self.byte_offset = byte_offset


@dataclass(frozen=True)
class BrokerRecord:
    offset: int
    payload: bytes
    appended_at: Optional[float] = None  # wall time; unknown for records replayed from disk


def iter_log_file(path, strict: bool = True) -> Iterator[tuple[int, bytes]]:
    """Yield ``(byte_position, payload)`` for each record in a topic log file.

    A torn trailing record raises ``CorruptLogError`` when ``strict``; otherwise
    iteration just stops there (what a restarting broker does).
    """
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0
    while pos < len(data):
        if pos + RECORD_HEADER.size > len(data):
            if strict:
                raise CorruptLogError(path, pos, "truncated length header")
            return
        (length,) = RECORD_HEADER.unpack_from(data, pos)
        end = pos + RECORD_HEADER.size + length
        if end > len(data):
            if strict:
                raise CorruptLogError(path, pos, f"record claims {length} bytes, file ends first")
            return
        yield pos, data[pos + RECORD_HEADER.size:end]
        pos = end


class TopicLog:
    def __init__(self, path: Path):
        self.path = path
        self.records: list[BrokerRecord] = []
        self._lock = threading.Lock()
        size = 0
        if path.exists():
            for pos, payload in iter_log_file(path, strict=False):
                self.records.append(BrokerRecord(len(self.records), payload))
                size = pos + RECORD_HEADER.size + len(payload)
            if size != path.stat().st_size:
                log.warning("%s: dropping torn tail at byte %d", path, size)
                with open(path, "r+b") as fh:
                    fh.truncate(size)
                    os.fsync(fh.fileno())
        self._fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)
        self._size = size

    def append(self, payload: bytes) -> int:
        frame = RECORD_HEADER.pack(len(payload)) + payload
        with self._lock:
            if self._fd < 0:
                raise ConnectionError(f"{self.path.name}: log closed")
            try:
                written = os.write(self._fd, frame)
                if written != len(frame):
                    raise OSError(f"short write ({written} of {len(frame)} bytes)")
                os.fsync(self._fd)
            except OSError:
                # leave the log exactly as it was
                try:
                    os.ftruncate(self._fd, self._size)
                    os.fsync(self._fd)
                except OSError:
                    log.exception("%s: could not roll back failed append", self.path)
                raise
            self._size += len(frame)
            offset = len(self.records)
            self.records.append(BrokerRecord(offset, payload, time.time()))
            return offset

    def read(self, start: int, max_records: int) -> list[BrokerRecord]:
        with self._lock:
            return self.records[start:start + max_records]

    def __len__(self):
        return len(self.records)

    def close(self):
        with self._lock:
            if self._fd >= 0:
                os.close(self._fd)
                self._fd = -1


class Broker:
    """The in-process broker core; ``BrokerServer`` puts it on the network."""

    def __init__(self, data_dir):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self._topics: dict[str, TopicLog] = {}
        self._offsets: dict[str, dict[str, int]] = {}
        self._lock = threading.RLock()
        self._closed = False
        for path in sorted(self.data_dir.glob("*.log")):
            self._topics[path.stem] = TopicLog(path)
        for path in sorted(self.data_dir.glob("*.offsets.json")):
            topic = path.name[: -len(".offsets.json")]
            with open(path, encoding="utf-8") as fh:
                self._offsets[topic] = {g: int(o) for g, o in json.load(fh).items()}

    def _topic(self, name: str, create: bool) -> Optional[TopicLog]:
        if self._closed:
            raise ConnectionError("broker closed")
        if not _TOPIC_RE.match(name):
            raise RequestRejected(f"invalid topic name {name!r}")
        with self._lock:
            topic = self._topics.get(name)
            if topic is None and create:
                topic = self._topics[name] = TopicLog(self.log_path(name))
            return topic

    def log_path(self, topic: str) -> Path:
        return self.data_dir / f"{topic}.log"

    def publish(self, topic: str, payload: bytes) -> int:
        return self._topic(topic, create=True).append(bytes(payload))

    def poll(self, topic: str, group_id: str, max_records: int, from_offset: Optional[int] = None) -> list[BrokerRecord]:
        """Records from the group's committed offset (or ``from_offset``); never advances the commit."""
        if max_records < 0:
            raise RequestRejected("max_records must be non-negative")
        log_ = self._topic(topic, create=False)
        if log_ is None:
            return []
        start = self.committed(topic, group_id) if from_offset is None else from_offset
        if start < 0:
            raise RequestRejected("from_offset must be non-negative")
        return log_.read(start, max_records)

    def committed(self, topic: str, group_id: str) -> int:
        with self._lock:
            return self._offsets.get(topic, {}).get(group_id, 0)

    def commit(self, topic: str, group_id: str, offset: int):
        if offset < 0:
            raise RequestRejected("offset must be non-negative")
        log_ = self._topic(topic, create=False)
        length = 0 if log_ is None else len(log_)
        if offset > length:
            raise RequestRejected(f"offset {offset} beyond log end {length}")
        with self._lock:
            groups = dict(self._offsets.get(topic, {}))
            if offset <= groups.get(group_id, 0):
                return
            groups[group_id] = offset
            _write_json_atomic(self.data_dir / f"{topic}.offsets.json", groups)
            self._offsets[topic] = groups

    def retained_count(self, topic: str, group_id: str = DEFAULT_GROUP) -> int:
        log_ = self._topic(topic, create=False)
        if log_ is None:
            return 0
        return len(log_) - self.committed(topic, group_id)

    def log_length(self, topic: str) -> int:
        log_ = self._topic(topic, create=False)
        return 0 if log_ is None else len(log_)

    def probe(self) -> bool:
        return True

    def close(self):
        with self._lock:
            self._closed = True
            for topic in self._topics.values():
                topic.close()
            self._topics.clear()


def _write_json_atomic(path: Path, obj):
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    dir_fd = os.open(path.parent, os.O_RDONLY)
    try:
        os.fsync(dir_fd)
    finally:
        os.close(dir_fd)


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"), validate=True)


class BrokerServer(FramedServer):
    def __init__(self, data_dir, host: str = "127.0.0.1", port: int = DEFAULT_PORT):
        self.broker = Broker(data_dir)
        b = self.broker
        handlers = {
            PUBLISH: lambda body: {"offset": b.publish(body["topic"], _unb64(body["payload"]))},
            POLL: lambda body: {"records": [
                {"offset": r.offset, "payload": _b64(r.payload), "appended_at": r.appended_at}
                for r in b.poll(body["topic"], body["group"], int(body["max_records"]), body.get("from_offset"))
            ]},
            COMMIT: lambda body: b.commit(body["topic"], body["group"], int(body["offset"])),
            COUNT: lambda body: {"retained": b.retained_count(body["topic"], body.get("group", DEFAULT_GROUP)),
                                 "length": b.log_length(body["topic"])},
            PROBE: lambda body: {"ok": True},
        }
        super().__init__(handlers, host, port, name="broker")

    def kill(self):
        super().kill()
        self.broker.close()

    stop = kill


class BrokerClient:
    """Network client with the same method surface as ``Broker``."""

    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT, timeout: float = 5.0):
        self._conn = FramedClient(host, port, timeout)
        self.bytes_published = 0

    def publish(self, topic: str, payload: bytes) -> int:
        reply = self._conn.request(PUBLISH, {"topic": topic, "payload": _b64(payload)})
        self.bytes_published += len(payload)
        return reply["offset"]

    def poll(self, topic: str, group_id: str, max_records: int, from_offset: Optional[int] = None) -> list[BrokerRecord]:
        body = {"topic": topic, "group": group_id, "max_records": max_records}
        if from_offset is not None:
            body["from_offset"] = from_offset
        reply = self._conn.request(POLL, body)
        return [BrokerRecord(r["offset"], _unb64(r["payload"]), r["appended_at"]) for r in reply["records"]]

    def commit(self, topic: str, group_id: str, offset: int):
        self._conn.request(COMMIT, {"topic": topic, "group": group_id, "offset": offset})

    def retained_count(self, topic: str, group_id: str = DEFAULT_GROUP) -> int:
        return self._conn.request(COUNT, {"topic": topic, "group": group_id})["retained"]

    def log_length(self, topic: str) -> int:
        return self._conn.request(COUNT, {"topic": topic})["length"]

    def probe(self) -> bool:
        try:
            self._conn.request(PROBE, {})
        except ConnectionError:
            return False
        return True

    def close(self):
        self._conn.close()
