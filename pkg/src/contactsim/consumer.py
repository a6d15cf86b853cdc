"""The DB consumer: broker topic -> batches -> document store.

Reports are batched globally: a batch seals at ``BATCH_SIZE`` reports or as
soon as a report with ``alive=false`` arrives. Broker offsets are committed
only after the batch is in the store, so a crash means redelivery, and
redelivery is harmless because upserts and snapshot appends are idempotent.
"""

from __future__ import annotations

import enum
import logging
import threading
from dataclasses import dataclass, field
from typing import Optional

from .broker import DEFAULT_GROUP, DEFAULT_TOPIC
from .model import DecodeError, ReportMessage, decode_report
from .store import document_from_report

log = logging.getLogger(__name__)

BATCH_SIZE = 10
RETRY_DELAY = 0.5


class SealReason(enum.Enum):
    FULL = "Full"
    NODE_DEATH = "NodeDeath"


@dataclass
class AggregatedBatch:
    reports: list[ReportMessage]
    sealed_reason: SealReason
    first_offset: int
    end_offset: int  # one past the last broker offset covered, malformed records included

    def __post_init__(self):
        if not 1 <= len(self.reports) <= BATCH_SIZE:
            raise ValueError(f"batch must hold 1..{BATCH_SIZE} reports, got {len(self.reports)}")
        if self.sealed_reason is SealReason.FULL and len(self.reports) != BATCH_SIZE:
            raise ValueError("a Full batch holds exactly BATCH_SIZE reports")
        if self.sealed_reason is SealReason.NODE_DEATH and self.reports[-1].alive:
            raise ValueError("a NodeDeath batch ends with a death report")


class Batcher:
    """Accumulates decoded reports and hands back sealed batches."""

    def __init__(self, batch_size: int = BATCH_SIZE):
        self.batch_size = batch_size
        self.pending: list[ReportMessage] = []
        self.first_offset: Optional[int] = None

    def add(self, offset: int, report: ReportMessage) -> Optional[AggregatedBatch]:
        if self.first_offset is None:
            self.first_offset = offset
        self.pending.append(report)
        if not report.alive:
            return self._seal(SealReason.NODE_DEATH, offset + 1)
        if len(self.pending) >= self.batch_size:
            return self._seal(SealReason.FULL, offset + 1)
        return None

    def _seal(self, reason: SealReason, end_offset: int) -> AggregatedBatch:
        batch = AggregatedBatch(self.pending, reason, self.first_offset, end_offset)
        self.pending = []
        self.first_offset = None
        return batch


def apply_batch(batch: AggregatedBatch, store) -> None:
    """Upsert each report in order (last write per uuid wins), then snapshot."""
    taken_at = batch.reports[-1].timestamp
    for report in batch.reports:
        store.upsert(document_from_report(report, taken_at))
    documents = sorted(store.get_all(), key=lambda d: d["uuid"])
    store.append_snapshot(taken_at, documents, through_offset=batch.end_offset)


@dataclass
class ConsumerMetrics:
    records_seen: int = 0
    malformed: int = 0
    batches_written: int = 0
    store_failures: int = 0
    broker_failures: int = 0
    sealed: list = field(default_factory=list)  # (reason, size, end_offset) per written batch


class DbConsumer:
    """Single-activity consumer. ``step`` does one unit of work; ``run`` loops it."""

    def __init__(self, broker, store, topic: str = DEFAULT_TOPIC, group_id: str = DEFAULT_GROUP,
                 batch_size: int = BATCH_SIZE, retry_delay: float = RETRY_DELAY):
        self.broker = broker
        self.store = store
        self.topic = topic
        self.group_id = group_id
        self.retry_delay = retry_delay
        self.batcher = Batcher(batch_size)
        self.metrics = ConsumerMetrics()
        self._cursor: Optional[int] = None  # next offset to fetch; None = group's committed offset
        self._sealed: Optional[AggregatedBatch] = None
        self._commit_due: Optional[int] = None

    def step(self) -> bool:
        """Advance by one poll, store write or commit. True if anything progressed.

        Raises ``ConnectionError`` when the dependency needed right now is down;
        all state is kept, so calling again later resumes exactly.
        """
        if self._commit_due is not None:
            try:
                self.broker.commit(self.topic, self.group_id, self._commit_due)
            except ConnectionError:
                self.metrics.broker_failures += 1
                raise
            self._commit_due = None
            return True
        if self._sealed is not None:
            batch = self._sealed
            try:
                apply_batch(batch, self.store)
            except ConnectionError:
                self.metrics.store_failures += 1
                raise
            self.metrics.batches_written += 1
            self.metrics.sealed.append((batch.sealed_reason.value, len(batch.reports), batch.end_offset))
            log.info("wrote batch of %d (%s) through offset %d", len(batch.reports),
                     batch.sealed_reason.value, batch.end_offset)
            self._sealed = None
            self._commit_due = batch.end_offset
            return True
        want = self.batcher.batch_size - len(self.batcher.pending)
        try:
            records = self.broker.poll(self.topic, self.group_id, want, self._cursor)
        except ConnectionError:
            self.metrics.broker_failures += 1
            raise
        if not records:
            return False
        for record in records:
            self._cursor = record.offset + 1
            self.metrics.records_seen += 1
            try:
                report = decode_report(record.payload)
            except DecodeError as exc:
                self.metrics.malformed += 1
                log.warning("skipping malformed record at offset %d: %s", record.offset, exc)
                if not self.batcher.pending:
                    # nothing buffered ahead of it, so it can be committed past now
                    self._commit_due = self._cursor
                    return True
                continue
            sealed = self.batcher.add(record.offset, report)
            if sealed is not None:
                self._sealed = sealed
                break
        return True

    def drain(self) -> None:
        """Step until no progress; swallow outages (the next drain retries)."""
        while True:
            try:
                if not self.step():
                    return
            except ConnectionError:
                return

    @property
    def pending_count(self) -> int:
        return len(self.batcher.pending)

    def run(self, stop: threading.Event, idle_delay: float = 0.05):
        while not stop.is_set():
            try:
                progressed = self.step()
            except ConnectionError as exc:
                log.info("dependency unavailable (%s); retrying in %.1fs", exc, self.retry_delay)
                stop.wait(self.retry_delay)
                continue
            if not progressed:
                stop.wait(idle_delay)


def run_consumer(broker_address: tuple[str, int], store_address: tuple[str, int],
                 topic: str = DEFAULT_TOPIC, group_id: str = DEFAULT_GROUP,
                 stop: Optional[threading.Event] = None):
    from .broker import BrokerClient
    from .store import StoreClient

    consumer = DbConsumer(BrokerClient(*broker_address), StoreClient(*store_address), topic, group_id)
    stop = stop or threading.Event()
    try:
        consumer.run(stop)
    except KeyboardInterrupt:
        pass
    return consumer


__all__ = ["AggregatedBatch", "Batcher", "ConsumerMetrics", "DbConsumer", "SealReason", "apply_batch",
           "run_consumer", "BATCH_SIZE"]
