"""Contact-tracing simulation: node agents, a durable broker, a DB consumer,
a document store, an HTTP API and a fault-injection harness."""

from .model import (
    BroadcastMessage,
    ContactRecord,
    Immune,
    Infected,
    Position,
    ReportMessage,
    RunParameters,
    Safe,
    Stats,
    compute_stats,
    decode_broadcast,
    decode_report,
    encode_broadcast,
    encode_report,
    in_infection_range,
    is_stationary,
    step_position,
    update_health,
)

__version__ = "0.1.0"

__all__ = [
    "BroadcastMessage",
    "ContactRecord",
    "Immune",
    "Infected",
    "Position",
    "ReportMessage",
    "RunParameters",
    "Safe",
    "Stats",
    "compute_stats",
    "decode_broadcast",
    "decode_report",
    "encode_broadcast",
    "encode_report",
    "in_infection_range",
    "is_stationary",
    "step_position",
    "update_health",
]
