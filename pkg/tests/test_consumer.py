import pytest

from contactsim.broker import Broker
from contactsim.consumer import AggregatedBatch, Batcher, DbConsumer, SealReason
from contactsim.model import ContactRecord, Position, ReportMessage, encode_report
from contactsim.store import DocumentStore

T, G = "coronaz", "db-consumer"
U = [f"00000000-0000-4000-8000-{i:012d}" for i in range(30)]


def ts(i):
    return f"2020-12-02 16:19:{i:02d}.000000"


def report(i, alive=True, node=None):
    return ReportMessage(node or U[i % 3], Position(i % 10, 0), False, ts(i), alive,
                         (ContactRecord(U[29], ts(i)),))


class Switch:
    """Forwards to ``target`` unless switched off, when every call raises ConnectionError."""

    def __init__(self, target):
        self.target = target
        self.up = True

    def __getattr__(self, name):
        attr = getattr(self.target, name)

        def call(*a, **kw):
            if not self.up:
                raise ConnectionError("down")
            return attr(*a, **kw)
        return call


@pytest.fixture
def parts(tmp_path):
    broker = Broker(tmp_path / "b")
    store = DocumentStore(tmp_path / "s")
    yield broker, store
    broker.close()
    store.close()


class TestBatcher:
    def test_full_at_ten(self):
        b = Batcher()
        results = [b.add(i, report(i)) for i in range(10)]
        assert results[:9] == [None] * 9
        assert results[9].sealed_reason is SealReason.FULL
        assert (results[9].first_offset, results[9].end_offset) == (0, 10)
        assert b.pending == []

    def test_death_seals_early(self):
        b = Batcher()
        for i in range(2):
            b.add(i, report(i))
        batch = b.add(2, report(2, alive=False))
        assert batch.sealed_reason is SealReason.NODE_DEATH
        assert len(batch.reports) == 3

    def test_batch_validation(self):
        with pytest.raises(ValueError):
            AggregatedBatch((), SealReason.FULL, 0, 0)


class TestConsumer:
    def test_sizes_and_commit(self, parts):
        broker, store = parts
        for i in range(25):
            broker.publish(T, encode_report(report(i, alive=(i != 12))))
        c = DbConsumer(broker, store)
        c.drain()
        assert [(r, n) for r, n, _ in c.metrics.sealed] == [("Full", 10), ("NodeDeath", 3), ("Full", 10)]
        assert broker.committed(T, G) == 23
        assert c.pending_count == 2
        assert [s.through_offset for s in store.get_snapshots(0, 10)] == [10, 13, 23]

    def test_latest_report_wins(self, parts):
        broker, store = parts
        for i in range(10):
            broker.publish(T, encode_report(report(i, node=U[0])))
        DbConsumer(broker, store).drain()
        (only,) = store.get_all()
        assert only["timestamp"] == ts(9)

    def test_snapshot_taken_at_last_report(self, parts):
        broker, store = parts
        for i in range(10):
            broker.publish(T, encode_report(report(i)))
        DbConsumer(broker, store).drain()
        assert store.get_snapshots(0, 1)[0].taken_at == ts(9)

    def test_store_outage_keeps_batch(self, parts):
        broker, store = parts
        s = Switch(store)
        for i in range(10):
            broker.publish(T, encode_report(report(i)))
        c = DbConsumer(broker, s)
        s.up = False
        c.drain()
        assert broker.committed(T, G) == 0 and c.metrics.store_failures >= 1
        s.up = True
        c.drain()
        assert broker.committed(T, G) == 10
        assert store.snapshot_count() == 1

    def test_broker_outage_before_commit_is_idempotent(self, parts):
        broker, store = parts
        b = Switch(broker)
        for i in range(10):
            broker.publish(T, encode_report(report(i)))
        c = DbConsumer(b, store)
        assert c.step()  # poll and seal
        assert c.step()  # store write
        b.up = False
        with pytest.raises(ConnectionError):
            c.step()
        # a fresh consumer redelivers the uncommitted batch
        fresh = DbConsumer(broker, store)
        fresh.drain()
        assert store.snapshot_count() == 1
        assert broker.committed(T, G) == 10

    def test_malformed_record_skipped(self, parts):
        broker, store = parts
        broker.publish(T, b"not json")
        for i in range(10):
            broker.publish(T, encode_report(report(i)))
        c = DbConsumer(broker, store)
        c.drain()
        assert c.metrics.malformed == 1
        assert broker.committed(T, G) == 11

    def test_restart_resumes_from_commit(self, parts):
        broker, store = parts
        for i in range(15):
            broker.publish(T, encode_report(report(i)))
        DbConsumer(broker, store).drain()
        assert broker.committed(T, G) == 10
        for i in range(15, 20):
            broker.publish(T, encode_report(report(i)))
        c = DbConsumer(broker, store)
        c.drain()
        assert broker.committed(T, G) == 20
        assert store.snapshot_count() == 2
