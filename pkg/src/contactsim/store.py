"""Embedded document store.

Latest-state documents keyed by node uuid plus an append-only list of
snapshots, persisted as one journal of length-prefixed JSON entries that is
replayed in full on startup.
"""

from __future__ import annotations

import copy
import json
import logging
import os
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .framing import FramedClient, FramedServer, RequestRejected
from .model import ReportMessage, compute_stats

log = logging.getLogger(__name__)

DEFAULT_PORT = 27018
JOURNAL_NAME = "journal.log"

UPSERT, GET_ALL, APPEND_SNAP, GET_SNAPS, PROBE = 1, 2, 3, 4, 5

_ENTRY_HEADER = struct.Struct(">I")

DOC_FIELDS = ("uuid", "position", "infected", "timestamp", "alive", "contacts", "last_updated")


def document_from_report(report: ReportMessage, last_updated: str) -> dict:
    """NodeDocument for ``report`` as a plain dict in canonical field order."""
    return {
        "uuid": report.uuid,
        "position": [report.position.x, report.position.y],
        "infected": report.infected,
        "timestamp": report.timestamp,
        "alive": report.alive,
        "contacts": [{"uuid": c.uuid, "timestamp": c.timestamp} for c in report.contacts],
        "last_updated": last_updated,
    }


def _check_document(doc: Any) -> dict:
    if not isinstance(doc, dict):
        raise RequestRejected("document must be an object")
    missing = [f for f in DOC_FIELDS if f not in doc]
    if missing:
        raise RequestRejected(f"document missing {', '.join(missing)}")
    if not isinstance(doc["uuid"], str):
        raise RequestRejected("document uuid must be a string")
    return {f: doc[f] for f in DOC_FIELDS}


@dataclass
class Snapshot:
    sequence: int
    taken_at: str
    documents: list[dict]
    through_offset: Optional[int] = None  # broker offset the snapshot covers, for idempotent replays

    def to_dict(self, with_stats: bool = False) -> dict:
        d = {"sequence": self.sequence, "taken_at": self.taken_at}
        if with_stats:
            d["stats"] = compute_stats(self.documents).to_dict()
        d["through_offset"] = self.through_offset
        d["documents"] = self.documents
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Snapshot":
        return cls(d["sequence"], d["taken_at"], d["documents"], d.get("through_offset"))


@dataclass
class _State:
    documents: dict[str, dict] = field(default_factory=dict)
    snapshots: list[Snapshot] = field(default_factory=list)


class DocumentStore:
    """Single writer, many readers. Reads return copies, never shared dicts."""

    def __init__(self, data_dir):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.journal_path = self.data_dir / JOURNAL_NAME
        self._state = _State()
        self._lock = threading.Lock()
        self._replay()
        self._fh = open(self.journal_path, "ab")
        self._closed = False

    def _replay(self):
        if not self.journal_path.exists():
            return
        data = self.journal_path.read_bytes()
        pos = 0
        while pos + _ENTRY_HEADER.size <= len(data):
            (length,) = _ENTRY_HEADER.unpack_from(data, pos)
            end = pos + _ENTRY_HEADER.size + length
            if end > len(data):
                break
            try:
                entry = json.loads(data[pos + _ENTRY_HEADER.size:end])
            except ValueError:
                break
            self._apply(entry)
            pos = end
        if pos != len(data):
            log.warning("%s: discarding torn journal tail at byte %d", self.journal_path, pos)
            with open(self.journal_path, "r+b") as fh:
                fh.truncate(pos)
                os.fsync(fh.fileno())

    def _apply(self, entry: dict):
        if entry["op"] == "upsert":
            doc = entry["doc"]
            self._state.documents[doc["uuid"]] = doc
        elif entry["op"] == "snapshot":
            self._state.snapshots.append(Snapshot.from_dict(entry["snapshot"]))
        else:
            raise ValueError(f"unknown journal op {entry['op']!r}")

    def _write(self, entry: dict):
        if self._closed:
            raise ConnectionError("store closed")
        data = json.dumps(entry, separators=(",", ":")).encode("utf-8")
        self._fh.write(_ENTRY_HEADER.pack(len(data)) + data)
        self._fh.flush()
        os.fsync(self._fh.fileno())
        self._apply(entry)

    def upsert(self, doc: dict):
        doc = _check_document(doc)
        with self._lock:
            if self._state.documents.get(doc["uuid"]) == doc:
                return
            self._write({"op": "upsert", "doc": doc})

    def get_all(self) -> list[dict]:
        with self._lock:
            if self._closed:
                raise ConnectionError("store closed")
            return copy.deepcopy(list(self._state.documents.values()))

    def append_snapshot(self, taken_at: str, documents: list[dict], through_offset: Optional[int] = None) -> Snapshot:
        """Append a snapshot; the store assigns the sequence number.

        When ``through_offset`` is not beyond the last snapshot's, the call is
        a replay of an already applied batch and the existing snapshot is
        returned instead.
        """
        with self._lock:
            snaps = self._state.snapshots
            if through_offset is not None and snaps and snaps[-1].through_offset is not None \
                    and through_offset <= snaps[-1].through_offset:
                for s in reversed(snaps):
                    if s.through_offset == through_offset:
                        return copy.deepcopy(s)
                return copy.deepcopy(snaps[-1])
            snap = Snapshot(len(snaps), taken_at, [_check_document(d) for d in documents], through_offset)
            self._write({"op": "snapshot", "snapshot": snap.to_dict()})
            return copy.deepcopy(snap)

    def get_snapshots(self, start: int, limit: int) -> list[Snapshot]:
        if start < 0 or limit < 0:
            raise RequestRejected("start and limit must be non-negative")
        with self._lock:
            if self._closed:
                raise ConnectionError("store closed")
            return copy.deepcopy(self._state.snapshots[start:start + limit])

    def snapshot_count(self) -> int:
        with self._lock:
            return len(self._state.snapshots)

    def probe(self) -> bool:
        return not self._closed

    def close(self):
        with self._lock:
            self._closed = True
            self._fh.close()


class StoreServer(FramedServer):
    def __init__(self, data_dir, host: str = "127.0.0.1", port: int = DEFAULT_PORT):
        self.store = DocumentStore(data_dir)
        st = self.store
        handlers = {
            UPSERT: lambda body: st.upsert(body["doc"]),
            GET_ALL: lambda body: {"documents": st.get_all()},
            APPEND_SNAP: lambda body: st.append_snapshot(body["taken_at"], body["documents"],
                                                         body.get("through_offset")).to_dict(),
            GET_SNAPS: lambda body: {"snapshots": [s.to_dict() for s in st.get_snapshots(int(body["start"]),
                                                                                      int(body["limit"]))]},
            PROBE: lambda body: {"ok": True},
        }
        super().__init__(handlers, host, port, name="store")

    def kill(self):
        super().kill()
        self.store.close()

    stop = kill


class StoreClient:
    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT, timeout: float = 5.0):
        self._conn = FramedClient(host, port, timeout)

    def upsert(self, doc: dict):
        self._conn.request(UPSERT, {"doc": doc})

    def get_all(self) -> list[dict]:
        return self._conn.request(GET_ALL, {})["documents"]

    def append_snapshot(self, taken_at: str, documents: list[dict], through_offset: Optional[int] = None) -> Snapshot:
        reply = self._conn.request(APPEND_SNAP, {"taken_at": taken_at, "documents": documents,
                                                 "through_offset": through_offset})
        return Snapshot.from_dict(reply)

    def get_snapshots(self, start: int, limit: int) -> list[Snapshot]:
        reply = self._conn.request(GET_SNAPS, {"start": start, "limit": limit})
        return [Snapshot.from_dict(s) for s in reply["snapshots"]]

    def probe(self) -> bool:
        try:
            self._conn.request(PROBE, {})
        except ConnectionError:
            return False
        return True

    def close(self):
        self._conn.close()
