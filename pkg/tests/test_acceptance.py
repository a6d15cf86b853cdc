"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` (the lines appear in the terminal
summary) or ``python tests/test_acceptance.py``.
"""

import hashlib
import os
import random
import signal
import sys
import threading
import time
from collections import defaultdict
from pathlib import Path

import pytest

from contactsim.broker import Broker, BrokerClient
from contactsim.consumer import DbConsumer
from contactsim.framing import ServiceUnavailable
from contactsim.harness.oracle import compare_with_store, read_frames, replay_oracle
from contactsim.harness.runner import EPOCH, run
from contactsim.harness.spec import FaultEvent, RunSpec
from contactsim.harness.traffic import REFERENCE, format_comparison
from contactsim.model import (
    ContactRecord,
    Position,
    ReportMessage,
    RunParameters,
    Timeline,
    compute_stats,
    decode_report,
    encode_report,
    in_infection_range,
)
from contactsim.store import DocumentStore

from conftest import spawn_service

pytestmark = pytest.mark.acceptance

RESULTS: list[str] = []
TL = Timeline(EPOCH)


def record(criterion: str, ok: bool, detail: str) -> bool:
    RESULTS.append(f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")
    return ok


def faults(*texts):
    return tuple(FaultEvent.parse(t) for t in texts)


def log_reports(run_dir) -> dict:
    by_node = defaultdict(list)
    for payload in read_frames(Path(run_dir) / "broker" / "coronaz.log"):
        r = decode_report(payload)
        by_node[r.uuid].append(r)
    return by_node


# ----------------------------------------------------------------------------- 1


def test_1_epidemic_cycle(tmp_path):
    started = time.monotonic()
    params = RunParameters(field_width=2, field_height=2, infection_radius=2, infection_cooldown=15,
                           zombie_lifetime=120)
    report = run(RunSpec(params=params, node_count=2, infected_count=1, duration=40, seed=1), tmp_path)
    by_node = log_reports(tmp_path)
    (zombie,) = [u for u, rs in by_node.items() if rs[0].infected]
    (human,) = [u for u in by_node if u != zombie]
    z, h = by_node[zombie], by_node[human]
    at = lambda rs, t: next(r for r in rs if TL.seconds(r.timestamp) == t)  # noqa: E731
    problems = []

    # first contact of the safe node with the infected one, judged on reported positions
    first = next(r for r in h if any(c.uuid == zombie for c in r.contacts))
    t_first = TL.seconds(first.timestamp)
    z_prev = at(z, t_first - 1)
    if not (z_prev.infected and in_infection_range(at(h, t_first - 1).position, z_prev.position, 2)):
        problems.append("first contact was not an in-range infected one")
    if any(r.infected for r in h if TL.seconds(r.timestamp) < t_first) or not first.infected:
        problems.append(f"safe node not infected exactly at first contact t={t_first:g}")

    # 15 identical positions while infected, then a move with infected=false
    if not all(r.infected for r in z[:15]) or len({r.position for r in z[:15]}) != 1:
        problems.append("infected node not stationary for its first 15 reports")
    if z[15].infected or z[15].position == z[14].position:
        problems.append(f"report 16 infected={z[15].infected} moved={z[15].position != z[14].position}")

    # immune window [15, 30): exposed to the infected peer at least once, never reinfected
    immune = [r for r in z if 15 <= TL.seconds(r.timestamp) < 30]
    exposures = [r for r in immune if any(
        at(h, TL.seconds(r.timestamp) - 1).infected
        and in_infection_range(at(z, TL.seconds(r.timestamp) - 1).position,
                               at(h, TL.seconds(r.timestamp) - 1).position, 2)
        for c in r.contacts if c.uuid == human)]
    if any(r.infected for r in immune):
        problems.append("reinfected during immunity")
    if not exposures:
        problems.append("no exposure during immunity, property not exercised")
    elapsed = time.monotonic() - started
    if elapsed >= 5:
        problems.append(f"runtime {elapsed:.1f}s")
    ok = not problems and report["passed"]
    record("1 epidemic cycle", ok, f"first contact t={t_first:g}, {len(exposures)} immune-window exposures, "
                                   f"{elapsed:.2f}s" + (f"; {problems}" if problems else ""))
    assert ok, problems or report["assertions"]


# ----------------------------------------------------------------------------- 2


def test_2_batch_aggregation(tmp_path):
    broker = Broker(tmp_path / "broker")
    store = DocumentStore(tmp_path / "store")
    ids = [f"00000000-0000-4000-8000-{i:012d}" for i in range(5)]
    for i in range(25):
        ts = TL.text(i)
        alive = i != 12  # report 13
        broker.publish("coronaz", encode_report(ReportMessage(
            ids[i % 5], Position(i, 0), False, ts, alive, (ContactRecord(ids[(i + 1) % 5], ts),))))
    consumer = DbConsumer(broker, store)
    consumer.drain()
    committed = broker.committed("coronaz", "db-consumer")
    store.close()
    reopened = DocumentStore(tmp_path / "store")
    ends = [s.through_offset for s in reopened.get_snapshots(0, 100)]
    reopened.close()
    broker.close()
    sizes = [b - a for a, b in zip([0] + ends, ends)]
    reasons = [r for r, _, _ in consumer.metrics.sealed]
    ok = sizes == [10, 3, 10] and reasons == ["Full", "NodeDeath", "Full"] \
        and consumer.pending_count == 2 and committed == 23
    record("2 batch aggregation", ok, f"journal batches {sizes} {reasons}, pending {consumer.pending_count}, "
                                      f"committed {committed}")
    assert ok


# ----------------------------------------------------------------------------- 3

SMALL = RunParameters(field_width=15, field_height=15, zombie_lifetime=30)
MATRIX = {
    "store-down": (RunSpec(params=SMALL, node_count=10, duration=40, seed=31,
                           faults=faults("kill:store@10", "restore:store@20")), "store_outage_zero_loss"),
    "consumer-down": (RunSpec(params=SMALL, node_count=10, duration=40, seed=32,
                              faults=faults("kill:consumer@10", "restore:consumer@20")), "consumer_retention"),
    "broker-down": (RunSpec(params=SMALL, node_count=10, duration=40, seed=33,
                            faults=faults("kill:broker@10", "restore:broker@20")), "broker_outage_positions"),
    "node-kill": (RunSpec(params=SMALL, node_count=10, duration=40, seed=34,
                          faults=faults("kill:node:3@12")), "node_kill_isolated"),
    "node-add": (RunSpec(params=SMALL, node_count=10, duration=40, seed=35,
                         faults=faults("spawn:node@15")), "node_add_contacts"),
    "api-store-down": (RunSpec(params=SMALL, node_count=10, duration=40, seed=36,
                               faults=faults("kill:api@5", "restore:api@8", "kill:store@10", "restore:store@20")),
                       "api_failure_opacity"),
}
_matrix_started: list[float] = []


@pytest.mark.parametrize("scenario", list(MATRIX))
def test_3_fault_matrix(tmp_path, scenario):
    if not _matrix_started:
        _matrix_started.append(time.monotonic())
    spec, key = MATRIX[scenario]
    report = run(spec, tmp_path)
    named = [c for c in report["assertions"] if c["name"].startswith(key)]
    failed = [c["name"] for c in report["assertions"] if not c["passed"]]
    extra = ""
    if scenario == "consumer-down":
        r = report["retention"][0]
        during = r["length_at_restore"] - r["length_at_kill"]
        extra = f", retained {r['retained_at_restore']} vs {during} published while down"
        named.append({"passed": r["retained_at_kill"] == 0 and r["retained_at_restore"] == during})
    if scenario == "broker-down":
        named += [c for c in report["assertions"] if c["name"] == "contact_conservation"]
    elapsed = time.monotonic() - _matrix_started[0]
    ok = bool(named) and all(c["passed"] for c in named) and not failed and elapsed < 120
    record(f"3 fault matrix [{scenario}]", ok,
           f"{len(report['assertions'])} checks, failed {failed or 'none'}{extra}, cumulative {elapsed:.1f}s")
    assert ok, report["assertions"]


# ----------------------------------------------------------------------------- 4


@pytest.fixture(scope="module")
def traffic_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("traffic")
    started = time.monotonic()
    report = run(RunSpec(node_count=20, duration=120, seed=4), out)
    return report, time.monotonic() - started


def _row(report, prefix):
    return next(r for r in report["metrics"]["comparison"] if r["metric"].startswith(prefix))


def test_4a_broadcast_payload(traffic_run):
    report, elapsed = traffic_run
    row = _row(report, "broadcast payload")
    ok = 128 <= row["measured"] <= 168 and elapsed < 60
    record("4a broadcast payload", ok, f"{row['measured']} B vs {REFERENCE['broadcast_payload']} B "
                                       f"(window [128, 168]); with headers {_row(report, 'broadcast with')['measured']} B "
                                       f"vs {REFERENCE['broadcast_framed']} B")
    assert ok


def test_4b_worst_case_report(traffic_run):
    report, _ = traffic_run
    row = _row(report, "worst-case report")
    ref = REFERENCE["worst_case_report"]
    ok = abs(row["measured"] - ref) <= 0.20 * ref
    record("4b worst-case report", ok, f"{row['measured']} B vs {ref} B, ratio {row['ratio']:.3f} (window +-20%)")
    assert ok


def test_4c_extrapolated_total(traffic_run):
    report, _ = traffic_run
    row = _row(report, "20 nodes x 120 s")
    per = report["metrics"]["per_node_per_second_bytes"]
    ref = REFERENCE["total_20_nodes_120_s"]
    ok = abs(row["measured"] - ref) <= 0.20 * ref
    record("4c extrapolated total", ok, f"20 x 120 x {per:.1f} B = {row['measured'] / 1e6:.3f} MB vs "
                                        f"{ref / 1e6:.2f} MB, ratio {row['ratio']:.3f} (window +-20%)")
    for line in _comparison_lines(report):
        RESULTS.append("    " + line)
    assert ok


def _comparison_lines(report):
    from contactsim.harness.traffic import TrafficMetrics
    from collections import Counter

    m = report["metrics"]
    metrics = TrafficMetrics.from_sizes(
        Counter({int(k): v for k, v in m["broadcast_payload_bytes"].items()}).elements(),
        Counter({int(k): v for k, v in m["report_payload_bytes"].items()}).elements())
    return format_comparison(metrics).splitlines()


# ----------------------------------------------------------------------------- 5


def test_5_oracle_equivalence(tmp_path):
    started = time.monotonic()
    seed = random.Random(5).randrange(10**6)
    report = run(RunSpec(params=RunParameters(field_width=20, field_height=20), node_count=10, duration=60,
                         seed=seed, faults=faults("kill:broker@20", "restore:broker@35")), tmp_path)
    oracle = replay_oracle(tmp_path / "broker" / "coronaz.log")
    store = DocumentStore(tmp_path / "store")
    docs, snaps = store.get_all(), store.get_snapshots(0, 10**6)
    store.close()
    problems = compare_with_store(oracle, docs, snaps)
    live_stats = [compute_stats(s.documents).to_dict() for s in snaps]
    same_stats = live_stats == oracle.snapshot_stats()
    by_uuid = {d["uuid"]: d for d in docs}
    fieldwise = set(by_uuid) == set(oracle.documents) and all(
        by_uuid[u][k] == oracle.documents[u][k] for u in by_uuid for k in by_uuid[u])
    elapsed = time.monotonic() - started
    ok = not problems and same_stats and fieldwise and report["passed"] and elapsed < 60
    record("5 oracle equivalence", ok, f"seed {seed}: {len(docs)} documents, {len(snaps)} snapshots, "
                                       f"stats sequence match={same_stats}, {elapsed:.1f}s")
    assert ok, problems


# ----------------------------------------------------------------------------- 6


def test_6_broker_durability(tmp_path):
    started = time.monotonic()
    data = tmp_path / "data"
    rng = random.Random()
    proc, port = spawn_service("broker", "--port", "0", "--data-dir", str(data))
    kill_at = rng.randrange(1, 1000)
    killer = threading.Thread(target=os.kill, args=(proc.pid, signal.SIGKILL))
    acked: dict[int, bytes] = {}
    i = 0
    try:
        client = BrokerClient("127.0.0.1", port, timeout=2.0)
        while i < 1000:
            if i == kill_at:
                # fires while the next publishes are in flight
                killer.start()
            payload = f"record-{i:04d}-".encode() + bytes(rng.randrange(256) for _ in range(rng.randrange(64)))
            try:
                acked[client.publish("coronaz", payload)] = payload
            except ServiceUnavailable:
                break
            i += 1
        killer.join()
        proc.wait()
        client.close()
        killed_at = i
        proc, port = spawn_service("broker", "--port", "0", "--data-dir", str(data))
        client = BrokerClient("127.0.0.1", port, timeout=2.0)
        while i < 1000:
            payload = f"record-{i:04d}-after".encode()
            acked[client.publish("coronaz", payload)] = payload
            i += 1
        records = client.poll("coronaz", "verify", 10**6)
        client.close()
    finally:
        if proc.poll() is None:
            proc.kill()
        proc.wait()
    offsets = [r.offset for r in records]
    top = max(acked)
    dense = offsets[: top + 1] == list(range(top + 1))
    identical = all(records[o].payload == p for o, p in acked.items())
    elapsed = time.monotonic() - started
    ok = dense and identical and len(acked) == 1000 and elapsed < 30
    record("6 broker durability", ok, f"SIGKILL sent at publish {kill_at}, {killed_at} acknowledged before it took effect, {len(acked)} acked, "
                                      f"{len(records)} records after restart, no gaps={dense}, "
                                      f"byte-identical={identical}, {elapsed:.1f}s")
    assert ok


# ----------------------------------------------------------------------------- 7


def test_7_determinism(tmp_path):
    spec = RunSpec(params=RunParameters(field_width=20, field_height=20, zombie_lifetime=40), node_count=10,
                   duration=60, seed=7, faults=faults("kill:broker@15", "restore:broker@25", "spawn:node@30"))
    digests = []
    for name in ("a", "b"):
        run(spec, tmp_path / name)
        digests.append(hashlib.sha256((tmp_path / name / "broker" / "coronaz.log").read_bytes()).hexdigest())
    ok = digests[0] == digests[1]
    record("7 determinism", ok, f"sha256 {digests[0][:16]}... vs {digests[1][:16]}...")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
