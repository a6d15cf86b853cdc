"""Byte accounting for a finished run, next to the published reference figures."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .oracle import read_frames

HEADER_OVERHEAD = 41  # 189 B framed - 148 B payload

REFERENCE = {
    "broadcast_payload": 148,
    "broadcast_framed": 189,
    "worst_case_report": 2490,
    "total_20_nodes_120_s": 6.43e6,
}
EXTRAPOLATE_NODES = 20
EXTRAPOLATE_SECONDS = 120


@dataclass
class TrafficMetrics:
    broadcast_payload_bytes: Counter = field(default_factory=Counter)
    report_payload_bytes: Counter = field(default_factory=Counter)
    total_bytes_sent: int = 0
    per_node_per_second_bytes: float = 0.0
    header_overhead_bytes: int = HEADER_OVERHEAD

    @classmethod
    def from_sizes(cls, broadcast_sizes, report_sizes) -> "TrafficMetrics":
        b = Counter(broadcast_sizes)
        r = Counter(report_sizes)
        total = sum((s + HEADER_OVERHEAD) * n for s, n in b.items())
        total += sum((s + HEADER_OVERHEAD) * n for s, n in r.items())
        # every live node broadcasts once per second, so broadcasts count node-seconds
        node_seconds = sum(b.values())
        per = total / node_seconds if node_seconds else 0.0
        return cls(b, r, total, per)

    def extrapolated_total(self, nodes: int = EXTRAPOLATE_NODES, seconds: int = EXTRAPOLATE_SECONDS) -> float:
        return nodes * seconds * self.per_node_per_second_bytes

    def comparison(self) -> list[dict]:
        b, r = self.broadcast_payload_bytes, self.report_payload_bytes
        rows = []
        if b:
            typical = b.most_common(1)[0][0]
            rows.append(_row("broadcast payload (B)", typical, REFERENCE["broadcast_payload"]))
            rows.append(_row("broadcast with headers (B)", typical + HEADER_OVERHEAD, REFERENCE["broadcast_framed"]))
        if r:
            rows.append(_row("worst-case report payload (B)", max(r), REFERENCE["worst_case_report"]))
        rows.append(_row(f"{EXTRAPOLATE_NODES} nodes x {EXTRAPOLATE_SECONDS} s total (B)",
                         round(self.extrapolated_total()), REFERENCE["total_20_nodes_120_s"]))
        return rows

    def to_dict(self) -> dict:
        return {
            "broadcast_payload_bytes": {str(k): v for k, v in sorted(self.broadcast_payload_bytes.items())},
            "report_payload_bytes": {str(k): v for k, v in sorted(self.report_payload_bytes.items())},
            "total_bytes_sent": self.total_bytes_sent,
            "per_node_per_second_bytes": round(self.per_node_per_second_bytes, 3),
            "header_overhead_bytes": self.header_overhead_bytes,
            "comparison": self.comparison(),
        }


def _row(name: str, measured, reference) -> dict:
    return {"metric": name, "measured": measured, "reference": reference,
            "ratio": round(measured / reference, 4) if reference else None}


def measure_traffic(run_dir) -> TrafficMetrics:
    """Report sizes come from the broker log, broadcast sizes from ``traffic.json``."""
    run_dir = Path(run_dir)
    with open(run_dir / "traffic.json", encoding="utf-8") as fh:
        recorded = json.load(fh)
    topic = recorded.get("topic", "coronaz")
    log_path = run_dir / "broker" / f"{topic}.log"
    reports = [len(p) for p in read_frames(log_path)] if log_path.exists() else []
    broadcasts = Counter({int(k): v for k, v in recorded["broadcast_sizes"].items()})
    return TrafficMetrics.from_sizes(broadcasts.elements(), reports)


def format_comparison(metrics: TrafficMetrics) -> str:
    lines = [f"{'metric':<36}{'measured':>12}{'reference':>12}{'ratio':>8}"]
    for row in metrics.comparison():
        lines.append(f"{row['metric']:<36}{row['measured']:>12}{row['reference']:>12g}{row['ratio']:>8.3f}")
    return "\n".join(lines)
