"""Single-pass replay of a broker log into the state the store should hold.

Deliberately written without the consumer or store classes so it can check
them: one loop, one dict, the batching rule spelled out inline.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

from ..broker import CorruptLogError
from ..model import compute_stats

_LEN = struct.Struct(">I")
BATCH = 10


@dataclass
class OracleState:
    documents: dict[str, dict] = field(default_factory=dict)
    snapshots: list[dict] = field(default_factory=list)  # {"sequence","taken_at","documents"}
    pending: int = 0  # reports read but not yet in a sealed batch
    malformed: int = 0

    def snapshot_stats(self) -> list[dict]:
        return [compute_stats(s["documents"]).to_dict() for s in self.snapshots]


def read_frames(path) -> list[bytes]:
    data = open(path, "rb").read()
    out, pos = [], 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise CorruptLogError(path, pos, "truncated length header")
        (n,) = _LEN.unpack_from(data, pos)
        if pos + 4 + n > len(data):
            raise CorruptLogError(path, pos, f"record claims {n} bytes, file ends first")
        out.append(data[pos + 4:pos + 4 + n])
        pos += 4 + n
    return out


def _as_report(payload: bytes):
    try:
        obj = json.loads(payload.decode("utf-8"))
        keys = ("uuid", "position", "infected", "timestamp", "alive", "contacts")
        if not isinstance(obj, dict) or any(k not in obj for k in keys):
            return None
        if not isinstance(obj["alive"], bool) or not isinstance(obj["infected"], bool):
            return None
        return obj
    except (UnicodeDecodeError, ValueError):
        return None


def replay_oracle(broker_log_path) -> OracleState:
    state = OracleState()
    batch: list[dict] = []
    for payload in read_frames(broker_log_path):
        report = _as_report(payload)
        if report is None:
            state.malformed += 1
            continue
        batch.append(report)
        if len(batch) == BATCH or not report["alive"]:
            taken_at = batch[-1]["timestamp"]
            for r in batch:
                state.documents[r["uuid"]] = {
                    "uuid": r["uuid"],
                    "position": list(r["position"]),
                    "infected": r["infected"],
                    "timestamp": r["timestamp"],
                    "alive": r["alive"],
                    "contacts": [{"uuid": c["uuid"], "timestamp": c["timestamp"]} for c in r["contacts"]],
                    "last_updated": taken_at,
                }
            state.snapshots.append({
                "sequence": len(state.snapshots),
                "taken_at": taken_at,
                "documents": [dict(state.documents[k]) for k in sorted(state.documents)],
            })
            batch = []
    state.pending = len(batch)
    return state


def compare_with_store(oracle: OracleState, documents: list[dict], snapshots: list) -> list[str]:
    """Differences between the oracle and a live store; empty means equivalent."""
    problems = []
    live = {d["uuid"]: d for d in documents}
    for key in sorted(set(live) | set(oracle.documents)):
        if key not in live:
            problems.append(f"document {key} missing from store")
        elif key not in oracle.documents:
            problems.append(f"document {key} in store but not in broker log replay")
        elif live[key] != oracle.documents[key]:
            fields = [f for f in oracle.documents[key] if live[key].get(f) != oracle.documents[key][f]]
            problems.append(f"document {key} differs in {', '.join(fields)}")
    live_stats = [compute_stats(s.documents if hasattr(s, "documents") else s["documents"]).to_dict()
                  for s in snapshots]
    if live_stats != oracle.snapshot_stats():
        problems.append(f"snapshot stats differ: store has {len(live_stats)} snapshots, "
                        f"oracle {len(oracle.snapshots)}")
    return problems
