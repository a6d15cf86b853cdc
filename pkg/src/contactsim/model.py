"""Domain logic shared by every component.

Health state machine, grid geometry, statistics, timestamps and the canonical
JSON wire format for broadcasts and reports. Everything here is pure.
"""

from __future__ import annotations

import json
import math
import re
import uuid as _uuid
from dataclasses import dataclass, fields
from datetime import datetime, timedelta
from typing import Any, Iterable, Mapping, Union

__all__ = [
    "RunParameters",
    "Position",
    "Safe",
    "Infected",
    "Immune",
    "HealthPhase",
    "BroadcastMessage",
    "ContactRecord",
    "ReportMessage",
    "Stats",
    "Timeline",
    "DecodeError",
    "new_node_id",
    "step_position",
    "in_infection_range",
    "update_health",
    "is_stationary",
    "compute_stats",
    "encode_broadcast",
    "decode_broadcast",
    "encode_report",
    "decode_report",
    "canonical_json",
]

TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S.%f"
_TIMESTAMP_RE = re.compile(r"^\d{4}-\d{2}-\d{2} \d{2}:\d{2}:\d{2}\.\d{6}$")
_UUID_RE = re.compile(r"^[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}$")

# cardinal moves, indexed by the draw
DIRECTIONS = ((1, 0), (-1, 0), (0, 1), (0, -1))


class DecodeError(ValueError):
    """Raised when a payload is not a valid message; ``field`` names the culprit."""

    def __init__(self, field_name: str, reason: str):
        super().__init__(f"{field_name}: {reason}")
        self.field = field_name
        self.reason = reason


@dataclass(frozen=True)
class RunParameters:
    field_width: int = 100
    field_height: int = 100
    scale_factor: int = 5
    zombie_lifetime: int = 120
    infection_radius: float = 2
    infection_cooldown: int = 15

    def __post_init__(self):
        for name in ("field_width", "field_height", "scale_factor", "zombie_lifetime", "infection_cooldown"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        r = self.infection_radius
        if isinstance(r, bool) or not isinstance(r, (int, float)) or r < 0 or math.isnan(r):
            raise ValueError(f"infection_radius must be a non-negative number, got {r!r}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunParameters":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown parameter(s): {', '.join(sorted(unknown))}")
        return cls(**dict(data))

    @classmethod
    def from_file(cls, path) -> "RunParameters":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True, order=True)
class Position:
    x: int
    y: int

    def within(self, params: RunParameters) -> bool:
        return 0 <= self.x < params.field_width and 0 <= self.y < params.field_height

    def to_list(self) -> list[int]:
        return [self.x, self.y]


@dataclass(frozen=True)
class Safe:
    pass


@dataclass(frozen=True)
class Infected:
    infected_at: float


@dataclass(frozen=True)
class Immune:
    immune_until: float


HealthPhase = Union[Safe, Infected, Immune]


class Timeline:
    """Maps run-relative seconds onto wall-clock strings.

    Internally a timestamp is whole microseconds since ``epoch``; the textual
    form is ``YYYY-MM-DD HH:MM:SS.ffffff``.
    """

    def __init__(self, epoch: datetime):
        self.epoch = epoch.replace(tzinfo=None)

    def text(self, seconds: float) -> str:
        micros = round(seconds * 1_000_000)
        return (self.epoch + timedelta(microseconds=micros)).strftime(TIMESTAMP_FORMAT)

    def seconds(self, text: str) -> float:
        return self.micros(text) / 1_000_000

    def micros(self, text: str) -> int:
        delta = parse_timestamp(text) - self.epoch
        return (delta.days * 86_400 + delta.seconds) * 1_000_000 + delta.microseconds


def parse_timestamp(text: str) -> datetime:
    if not isinstance(text, str) or not _TIMESTAMP_RE.match(text):
        raise ValueError(f"bad timestamp {text!r}")
    return datetime.strptime(text, TIMESTAMP_FORMAT)


def new_node_id(rng=None) -> str:
    """A fresh NodeId. With ``rng`` the id is reproducible, otherwise uuid1 (host + time)."""
    if rng is None:
        return str(_uuid.uuid1())
    return str(_uuid.UUID(int=rng.getrandbits(128), version=4))


@dataclass(frozen=True)
class BroadcastMessage:
    uuid: str
    position: Position
    infected: bool
    timestamp: str
    alive: bool = True


@dataclass(frozen=True)
class ContactRecord:
    uuid: str
    timestamp: str


@dataclass(frozen=True)
class ReportMessage:
    uuid: str
    position: Position
    infected: bool
    timestamp: str
    alive: bool = True
    contacts: tuple[ContactRecord, ...] = ()

    @classmethod
    def from_broadcast(cls, msg: BroadcastMessage, contacts: Iterable[ContactRecord] = ()) -> "ReportMessage":
        return cls(msg.uuid, msg.position, msg.infected, msg.timestamp, msg.alive, tuple(contacts))

    def broadcast(self) -> BroadcastMessage:
        return BroadcastMessage(self.uuid, self.position, self.infected, self.timestamp, self.alive)


@dataclass(frozen=True)
class Stats:
    total_nodes: int = 0
    zombies: int = 0
    deaths: int = 0
    dead_zombies: int = 0

    def to_dict(self) -> dict:
        return {
            "total_nodes": self.total_nodes,
            "zombies": self.zombies,
            "deaths": self.deaths,
            "dead_zombies": self.dead_zombies,
        }


# --------------------------------------------------------------------------
# behaviour


def step_position(p: Position, params: RunParameters, rng) -> Position:
    """One cardinal step, re-drawing the direction until it stays on the field.

    The draw is ``rng.randrange(4)`` indexing ``DIRECTIONS``. A 1x1 field has
    no legal move, so ``p`` comes back unchanged.
    """
    if params.field_width == 1 and params.field_height == 1:
        return p
    while True:
        dx, dy = DIRECTIONS[rng.randrange(4)]
        q = Position(p.x + dx, p.y + dy)
        if q.within(params):
            return q


def in_infection_range(a: Position, b: Position, radius: float) -> bool:
    dx = a.x - b.x
    dy = a.y - b.y
    # integer compare avoids sqrt rounding at the boundary
    return dx * dx + dy * dy <= radius * radius


def update_health(phase: HealthPhase, now: float, infected_contact_in_range: bool,
                  params: RunParameters) -> HealthPhase:
    """Apply at most one transition of Safe -> Infected -> Immune -> Safe."""
    if isinstance(phase, Safe):
        return Infected(now) if infected_contact_in_range else phase
    if isinstance(phase, Infected):
        if now - phase.infected_at >= params.infection_cooldown:
            return Immune(now + params.infection_cooldown)
        return phase
    if isinstance(phase, Immune):
        return Safe() if now >= phase.immune_until else phase
    raise TypeError(f"not a health phase: {phase!r}")


def is_stationary(phase: HealthPhase) -> bool:
    return isinstance(phase, Infected)


def _doc_flag(doc, name):
    return doc[name] if isinstance(doc, Mapping) else getattr(doc, name)


def compute_stats(docs: Iterable) -> Stats:
    """Counts over the latest document per node (mappings or objects with the fields)."""
    total = zombies = deaths = dead_zombies = 0
    for doc in docs:
        infected = bool(_doc_flag(doc, "infected"))
        dead = not _doc_flag(doc, "alive")
        total += 1
        zombies += infected
        deaths += dead
        dead_zombies += infected and dead
    return Stats(total, zombies, deaths, dead_zombies)


# --------------------------------------------------------------------------
# wire format


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def broadcast_dict(m: BroadcastMessage | ReportMessage) -> dict:
    return {
        "uuid": m.uuid,
        "position": [m.position.x, m.position.y],
        "infected": m.infected,
        "timestamp": m.timestamp,
        "alive": m.alive,
    }


def report_dict(r: ReportMessage) -> dict:
    d = broadcast_dict(r)
    d["contacts"] = [{"uuid": c.uuid, "timestamp": c.timestamp} for c in r.contacts]
    return d


def encode_broadcast(m: BroadcastMessage) -> bytes:
    return canonical_json(broadcast_dict(m))


def encode_report(r: ReportMessage) -> bytes:
    return canonical_json(report_dict(r))


def _load(data: bytes | str) -> dict:
    if isinstance(data, (bytes, bytearray)):
        try:
            data = bytes(data).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError("payload", f"not UTF-8 ({exc.reason})") from None
    try:
        obj = json.loads(data)
    except json.JSONDecodeError as exc:
        raise DecodeError("payload", f"malformed JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise DecodeError("payload", "not a JSON object")
    return obj


def _require(obj: Mapping, key: str):
    if key not in obj:
        raise DecodeError(key, "missing")
    return obj[key]


def _uuid_field(obj: Mapping, key: str = "uuid", label: str | None = None) -> str:
    value = _require(obj, key)
    if not isinstance(value, str) or not _UUID_RE.match(value):
        raise DecodeError(label or key, "not a canonical UUID string")
    return value


def _timestamp_field(obj: Mapping, key: str = "timestamp", label: str | None = None) -> str:
    value = _require(obj, key)
    if not isinstance(value, str) or not _TIMESTAMP_RE.match(value):
        raise DecodeError(label or key, "not a YYYY-MM-DD HH:MM:SS.ffffff string")
    try:
        parse_timestamp(value)
    except ValueError:
        raise DecodeError(label or key, "not a valid date") from None
    return value


def _bool_field(obj: Mapping, key: str) -> bool:
    value = _require(obj, key)
    if not isinstance(value, bool):
        raise DecodeError(key, "not a boolean")
    return value


def _position_field(obj: Mapping, params: RunParameters | None) -> Position:
    value = _require(obj, "position")
    if (not isinstance(value, list) or len(value) != 2
            or any(isinstance(v, bool) or not isinstance(v, int) for v in value)):
        raise DecodeError("position", "not a two-element integer array")
    p = Position(value[0], value[1])
    if p.x < 0 or p.y < 0 or (params is not None and not p.within(params)):
        raise DecodeError("position", "out of range")
    return p


def _broadcast_fields(obj: Mapping, params: RunParameters | None) -> tuple:
    return (
        _uuid_field(obj),
        _position_field(obj, params),
        _bool_field(obj, "infected"),
        _timestamp_field(obj),
        _bool_field(obj, "alive"),
    )


def decode_broadcast(data: bytes | str, params: RunParameters | None = None) -> BroadcastMessage:
    """Parse a broadcast; ``params`` adds the field-bounds check on the position."""
    return BroadcastMessage(*_broadcast_fields(_load(data), params))


def decode_report(data: bytes | str, params: RunParameters | None = None) -> ReportMessage:
    obj = _load(data)
    head = _broadcast_fields(obj, params)
    raw = _require(obj, "contacts")
    if not isinstance(raw, list):
        raise DecodeError("contacts", "not an array")
    contacts = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict):
            raise DecodeError(f"contacts[{i}]", "not an object")
        contacts.append(ContactRecord(
            _uuid_field(item, label=f"contacts[{i}].uuid"),
            _timestamp_field(item, label=f"contacts[{i}].timestamp"),
        ))
    return ReportMessage(*head, tuple(contacts))
