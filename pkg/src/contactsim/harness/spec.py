from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from ..model import RunParameters
from ..transport import TransportConfig

COMPONENTS = ("broker", "consumer", "store", "api")
ACTIONS = ("kill", "restore", "spawn")


@dataclass(frozen=True)
class FaultEvent:
    """``target`` is a component name, ``node:<index-or-uuid>``, or ``node`` for spawn."""

    at: int
    target: str
    action: str

    def __post_init__(self):
        if self.at < 0:
            raise ValueError("fault time must be non-negative")
        if self.action not in ACTIONS:
            raise ValueError(f"unknown fault action {self.action!r}")
        if self.action == "spawn":
            if not (self.target == "node" or self.target.startswith("node:")):
                raise ValueError("only nodes can be spawned")
        elif self.target not in COMPONENTS and not self.target.startswith("node:"):
            raise ValueError(f"unknown fault target {self.target!r}")

    @property
    def is_node(self) -> bool:
        return self.target == "node" or self.target.startswith("node:")

    @property
    def node_ref(self) -> Optional[str]:
        return self.target.split(":", 1)[1] if self.target.startswith("node:") else None

    @classmethod
    def parse(cls, text: str) -> "FaultEvent":
        """``"kill:broker@10"`` / ``"restore:node:3@20"`` / ``"spawn:node@5"``."""
        head, _, at = text.rpartition("@")
        action, _, target = head.partition(":")
        if not head or not target:
            raise ValueError(f"bad fault {text!r}; expected ACTION:TARGET@SECONDS")
        return cls(int(at), target, action)

    def to_dict(self) -> dict:
        return {"at": self.at, "target": self.target, "action": self.action}


def validate_schedule(faults: list[FaultEvent]):
    down: set[str] = set()
    for ev in sorted(faults, key=lambda e: e.at):
        if ev.action == "kill":
            if ev.target in down:
                raise ValueError(f"{ev.target} killed twice without restore")
            down.add(ev.target)
        elif ev.action == "restore":
            if ev.target not in down:
                raise ValueError(f"restore of {ev.target} at {ev.at} without an earlier kill")
            down.discard(ev.target)


@dataclass(frozen=True)
class RunSpec:
    params: RunParameters = field(default_factory=RunParameters)
    node_count: int = 20
    infected_count: int = 1
    duration: int = 120
    seed: int = 0
    transport: TransportConfig = field(default_factory=TransportConfig)
    faults: tuple[FaultEvent, ...] = ()
    mode: str = "deterministic"  # or "realtime"
    tick_interval: float = 1.0  # wall seconds per simulated second, realtime only
    topic: str = "coronaz"
    serve_api: Optional[bool] = None  # default: only when a fault touches the api or store

    def __post_init__(self):
        if self.node_count < 0 or self.infected_count < 0:
            raise ValueError("counts must be non-negative")
        if self.infected_count > self.node_count:
            raise ValueError("infected_count exceeds node_count")
        if self.duration < 0:
            raise ValueError("duration must be non-negative")
        if self.mode not in ("deterministic", "realtime"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.tick_interval <= 0:
            raise ValueError("tick_interval must be positive")
        object.__setattr__(self, "faults", tuple(self.faults))
        validate_schedule(list(self.faults))

    @property
    def wants_api(self) -> bool:
        if self.serve_api is not None:
            return self.serve_api
        return any(f.target in ("api", "store") for f in self.faults)

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "node_count": self.node_count,
            "infected_count": self.infected_count,
            "duration": self.duration,
            "seed": self.seed,
            "transport": self.transport.to_dict(),
            "faults": [f.to_dict() for f in self.faults],
            "mode": self.mode,
            "tick_interval": self.tick_interval,
            "topic": self.topic,
            "serve_api": self.serve_api,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunSpec":
        d = dict(d)
        if "params" in d:
            d["params"] = RunParameters.from_dict(d["params"])
        if "transport" in d:
            d["transport"] = TransportConfig(**d["transport"])
        if "faults" in d:
            d["faults"] = tuple(FaultEvent(**f) if isinstance(f, dict) else FaultEvent.parse(f) for f in d["faults"])
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)
